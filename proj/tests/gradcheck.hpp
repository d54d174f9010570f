#pragma once

// Random finite-difference checks of every training objective with respect
// to its differentiable inputs.

#include <random>
#include <string>
#include <vector>

#include "kdreg/autodiff.hpp"
#include "kdreg/hint.hpp"
#include "kdreg/losses.hpp"
#include "oracles.hpp"

namespace gradcheck {

using kdreg::ad::Tensor;
using kdreg::ad::Var;

struct Objective {
    std::string name;
    kdreg::loss::Variant variant = kdreg::loss::Variant::StudentOnly;
    bool hint = false;
    bool attentive_hint = false;
};

inline std::vector<Objective> all_objectives() {
    using V = kdreg::loss::Variant;
    return {{"StudentOnly", V::StudentOnly},  {"MinStudentImitation", V::MinStudentImitation},
            {"AdditiveImitation", V::AdditiveImitation}, {"UpperBound", V::UpperBound},
            {"PILLaplace", V::PILLaplace},    {"PILGaussian", V::PILGaussian},
            {"AIL", V::AIL},                  {"HT", V::StudentOnly, true, false},
            {"AHT", V::StudentOnly, true, true}};
}

inline Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(r * c);
    for (double& x : v) x = u(rng);
    return Tensor::matrix(r, c, v);
}

// Relative error of one random instance.
inline double check_instance(const Objective& obj, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> n_dist(1, 6);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t n = n_dist(rng);

    if (obj.hint) {
        const std::size_t w = n_dist(rng) + 1;
        const Tensor s0 = random_tensor(n, w, rng, -1.0, 1.0);
        const Tensor t0 = random_tensor(n, w, rng, -1.0, 1.0);
        const Tensor phi0 = random_tensor(n, 1, rng, -0.5, 1.0);
        auto build = [&](kdreg::ad::Graph& g, Var s) {
            if (obj.attentive_hint) return kdreg::hint::attentive_hint_loss(s, g.constant(t0), g.constant(phi0));
            return kdreg::hint::hint_loss(s, g.constant(t0));
        };
        kdreg::ad::Graph g;
        Var s = g.variable(s0);
        g.backward(build(g, s));
        const std::vector<double> analytic(g.grad(s).begin(), g.grad(s).end());
        const std::vector<double> base(s0.values().begin(), s0.values().end());
        const auto numeric = oracle::central_differences(base, [&](const std::vector<double>& v) {
            kdreg::ad::Graph h;
            return build(h, h.constant(Tensor(s0.shape(), v))).item();
        });
        return oracle::relative_error(analytic, numeric);
    }

    kdreg::loss::Params p;
    p.variant = obj.variant;
    p.alpha = unit(rng);
    p.beta = unit(rng);
    const Tensor student0 = random_tensor(n, 6, rng, -1.0, 1.0);
    const Tensor teacher0 = random_tensor(n, 6, rng, -1.0, 1.0);
    const Tensor truth0 = random_tensor(n, 6, rng, -1.0, 1.0);
    const Tensor sigma0 = random_tensor(n, 2, rng, -0.7, 0.7);
    // Mixed-sign attention weights, as the unclamped normalized loss allows.
    const Tensor phi0 = random_tensor(n, 2, rng, -0.5, 1.0);
    const bool with_sigma = kdreg::loss::needs_sigma(p.variant);

    // Differentiable inputs: student predictions, then log-sigma when used.
    std::vector<double> base(student0.values().begin(), student0.values().end());
    if (with_sigma) base.insert(base.end(), sigma0.values().begin(), sigma0.values().end());

    auto evaluate = [&](const std::vector<double>& x, std::vector<double>* grad) {
        kdreg::ad::Graph g;
        std::vector<double> sv(x.begin(), x.begin() + static_cast<long>(n * 6));
        Var s = g.variable(Tensor::matrix(n, 6, sv));
        Var ls;
        if (with_sigma) {
            ls = g.variable(Tensor::matrix(n, 2, std::vector<double>(x.begin() + static_cast<long>(n * 6), x.end())));
        }
        kdreg::loss::Batch b{s, g.constant(teacher0), g.constant(truth0), ls, g.constant(phi0)};
        Var l = kdreg::loss::blended_loss(p, b);
        if (grad) {
            g.backward(l);
            grad->assign(g.grad(s).begin(), g.grad(s).end());
            if (with_sigma) grad->insert(grad->end(), g.grad(ls).begin(), g.grad(ls).end());
        }
        return l.item();
    };
    std::vector<double> analytic;
    evaluate(base, &analytic);
    const auto numeric =
        oracle::central_differences(base, [&](const std::vector<double>& x) { return evaluate(x, nullptr); });
    return oracle::relative_error(analytic, numeric);
}

}  // namespace gradcheck
