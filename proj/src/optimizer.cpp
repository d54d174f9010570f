#include "kdreg/optimizer.hpp"

#include <cmath>
#include <string>

#include "kdreg/error.hpp"

namespace kdreg {

void Adam::step(std::span<ad::Tensor* const> params) {
    auto& s = state_;
    if (s.step == 0) {
        s.first_moment.clear();
        s.second_moment.clear();
        for (const ad::Tensor* p : params) {
            s.first_moment.emplace_back(p->size(), 0.0);
            s.second_moment.emplace_back(p->size(), 0.0);
        }
    }
    if (params.size() != s.first_moment.size()) {
        throw ShapeError("adam: " + std::to_string(params.size()) + " parameters, state holds " +
                         std::to_string(s.first_moment.size()));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k]->size() != s.first_moment[k].size()) {
            throw ShapeError("adam: parameter " + std::to_string(k) + " has shape " +
                             ad::to_string(params[k]->shape()) + ", state holds " +
                             std::to_string(s.first_moment[k].size()) + " elements");
        }
    }

    ++s.step;
    const auto& o = s.options;
    const double t = static_cast<double>(s.step);
    const double correction1 = 1.0 - std::pow(o.beta1, t);
    const double correction2 = 1.0 - std::pow(o.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto values = params[k]->values();
        auto grad = params[k]->grad();
        auto& m = s.first_moment[k];
        auto& v = s.second_moment[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            values[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
        }
    }
}

}  // namespace kdreg
