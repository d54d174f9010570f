#include "kdreg/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "kdreg/error.hpp"

namespace kdreg::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void same_graph(const char* op, Var a, Var b) {
    if (&a.graph() != &b.graph()) {
        throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
    }
}

void require_same_shape(const char* op, Var a, Var b) {
    same_graph(op, a, b);
    if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
    Graph& g = a.graph();
    const Tensor& x = a.value();
    Tensor out(x.shape());
    auto xv = x.values();
    auto yv = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = fwd(xv[i]);
    const std::size_t ia = a.id();
    return g.record(std::move(out), {ia}, [ia, deriv](Graph& graph, std::span<const double> gy) {
        auto ga = graph.grad_buffer(ia);
        if (ga.empty()) return;
        auto xv = graph.node_value(ia).values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * deriv(xv[i]);
    });
}

}  // namespace

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), values_(element_count(shape_), 0.0), grad_(values_.size(), 0.0) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape_));
    }
}

Tensor::Tensor(Shape shape, std::vector<double> values) : Tensor(std::move(shape)) {
    if (values.size() != values_.size()) {
        throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + to_string(shape_));
    }
    values_ = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
    if (shape_.size() > 2) throw ShapeError("tensor: rank-2 view of " + to_string(shape_));
    return shape_.size() == 2 ? shape_[0] : 1;
}

std::size_t Tensor::cols() const {
    if (shape_.empty()) return 1;
    if (shape_.size() > 2) throw ShapeError("tensor: rank-2 view of " + to_string(shape_));
    return shape_.back();
}

double Tensor::item() const {
    if (values_.size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
    return values_[0];
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

bool Tensor::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------- Graph

const Tensor& Var::value() const { return graph_->value(*this); }

Var Graph::constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::variable(Tensor value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor& param) {
    Node n;
    n.external = &param;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Tensor& Graph::tensor(std::size_t id) {
    Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
}

const Tensor& Graph::tensor(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
}

const Tensor& Graph::value(Var v) const { return tensor(v.id()); }
const Tensor& Graph::node_value(std::size_t id) const { return tensor(id); }

std::span<const double> Graph::grad(Var v) const { return tensor(v.id()).grad(); }

bool Graph::requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

std::span<double> Graph::grad_buffer(std::size_t id) {
    if (!nodes_.at(id).requires_grad) return {};
    return tensor(id).grad();
}

Var Graph::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [this](std::size_t p) { return nodes_.at(p).requires_grad; });
    if (n.requires_grad) n.backward = std::move(fn);
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

void Graph::backward(Var loss) {
    if (&loss.graph() != this) throw std::invalid_argument("backward: loss belongs to a different graph");
    const Tensor& lv = value(loss);
    if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape()));
    if (!lv.all_finite()) throw DivergenceError("backward: loss is not finite");
    if (!nodes_[loss.id()].requires_grad) return;

    std::vector<char> reached(loss.id() + 1, 0);
    reached[loss.id()] = 1;
    tensor(loss.id()).grad()[0] += 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        if (!reached[id]) continue;
        Node& n = nodes_[id];
        if (!n.requires_grad || !n.backward) continue;
        n.backward(*this, tensor(id).grad());
        for (auto p : n.parents) reached[p] = 1;
    }
}

// ---------------------------------------------------------------- ops

Var matmul(Var a, Var b) {
    same_graph("matmul", a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) shape_mismatch("matmul", x.shape(), y.shape());
    const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
    Tensor out(Shape{m, n});
    MutMap(out.values().data(), m, n).noalias() = ConstMap(x.values().data(), m, k) * ConstMap(y.values().data(), k, n);
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& g, std::span<const double> gy) {
        ConstMap dy(gy.data(), m, n);
        if (auto ga = g.grad_buffer(ia); !ga.empty()) {
            MutMap(ga.data(), m, k).noalias() += dy * ConstMap(g.node_value(ib).values().data(), k, n).transpose();
        }
        if (auto gb = g.grad_buffer(ib); !gb.empty()) {
            MutMap(gb.data(), k, n).noalias() += ConstMap(g.node_value(ia).values().data(), m, k).transpose() * dy;
        }
    });
}

Var add(Var a, Var b) {
    same_graph("add", a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const std::size_t ia = a.id(), ib = b.id();
    if (x.shape() == y.shape()) {
        Tensor out(x.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = x.values()[i] + y.values()[i];
        return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::span<const double> gy) {
            for (auto id : {ia, ib}) {
                auto gx = g.grad_buffer(id);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
            }
        });
    }
    if (x.rank() == 2 && y.rank() == 2 && y.rows() == 1 && y.cols() == x.cols()) {
        const std::size_t m = x.rows(), n = x.cols();
        Tensor out(x.shape());
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) out.at(r, c) = x.at(r, c) + y.values()[c];
        return a.graph().record(std::move(out), {ia, ib}, [ia, ib, m, n](Graph& g, std::span<const double> gy) {
            if (auto ga = g.grad_buffer(ia); !ga.empty()) {
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
            }
            if (auto gb = g.grad_buffer(ib); !gb.empty()) {
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) gb[c] += gy[r * n + c];
            }
        });
    }
    shape_mismatch("add", x.shape(), y.shape());
}

Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = x.values()[i] - y.values()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::span<const double> gy) {
        if (auto ga = g.grad_buffer(ia); !ga.empty()) {
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
        }
        if (auto gb = g.grad_buffer(ib); !gb.empty()) {
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
        }
    });
}

Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = x.values()[i] * y.values()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::span<const double> gy) {
        if (auto ga = g.grad_buffer(ia); !ga.empty()) {
            auto yv = g.node_value(ib).values();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * yv[i];
        }
        if (auto gb = g.grad_buffer(ib); !gb.empty()) {
            auto xv = g.node_value(ia).values();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * xv[i];
        }
    });
}

Var div(Var a, Var b) {
    require_same_shape("div", a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = x.values()[i] / y.values()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::span<const double> gy) {
        auto xv = g.node_value(ia).values();
        auto yv = g.node_value(ib).values();
        if (auto ga = g.grad_buffer(ia); !ga.empty()) {
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] / yv[i];
        }
        if (auto gb = g.grad_buffer(ib); !gb.empty()) {
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i] * xv[i] / (yv[i] * yv[i]);
        }
    });
}

Var minimum(Var a, Var b) {
    require_same_shape("minimum", a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::min(x.values()[i], y.values()[i]);
    const std::size_t ia = a.id(), ib = b.id();
    // Ties route the gradient to the first operand.
    return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::span<const double> gy) {
        auto xv = g.node_value(ia).values();
        auto yv = g.node_value(ib).values();
        auto ga = g.grad_buffer(ia);
        auto gb = g.grad_buffer(ib);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            if (xv[i] <= yv[i]) {
                if (!ga.empty()) ga[i] += gy[i];
            } else if (!gb.empty()) {
                gb[i] += gy[i];
            }
        }
    });
}

Var scale(Var a, double factor) {
    return unary(a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var add_scalar(Var a, double offset) {
    return unary(a, [offset](double x) { return x + offset; }, [](double) { return 1.0; });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); },
                 [](double x) {
                     const double t = std::tanh(x);
                     return 1.0 - t * t;
                 });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
    for (double v : a.value().values()) {
        if (!(v > 0.0)) throw std::domain_error("log: non-positive input " + std::to_string(v));
    }
    return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var sqrt(Var a) {
    for (double v : a.value().values()) {
        if (v < 0.0) throw std::domain_error("sqrt: negative input " + std::to_string(v));
    }
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Tensor& x = a.value();
    if (x.rank() != 2 || begin >= end || end > x.cols()) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for shape " + to_string(x.shape()));
    }
    const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
    Tensor out(Shape{m, w});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < w; ++c) out.at(r, c) = x.at(r, begin + c);
    const std::size_t ia = a.id();
    return a.graph().record(std::move(out), {ia}, [ia, m, n, w, begin](Graph& g, std::span<const double> gy) {
        auto ga = g.grad_buffer(ia);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < w; ++c) ga[r * n + begin + c] += gy[r * w + c];
    });
}

Var sum_cols(Var a) {
    const Tensor& x = a.value();
    if (x.rank() != 2) throw ShapeError("sum_cols: expected rank 2, got " + to_string(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out(Shape{m, 1});
    for (std::size_t r = 0; r < m; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += x.at(r, c);
        out.values()[r] = s;
    }
    const std::size_t ia = a.id();
    return a.graph().record(std::move(out), {ia}, [ia, m, n](Graph& g, std::span<const double> gy) {
        auto ga = g.grad_buffer(ia);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += gy[r];
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const std::size_t ia = a.id();
    return a.graph().record(Tensor::scalar(s), {ia}, [ia](Graph& g, std::span<const double> gy) {
        auto ga = g.grad_buffer(ia);
        for (double& v : ga) v += gy[0];
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mse(Var a, Var b) { return mean(square(sub(a, b))); }

Var dropout(Var x, double rate, bool training, std::mt19937_64& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate " + std::to_string(rate) + " outside [0, 1)");
    if (!training || rate == 0.0) return x;
    Tensor mask(x.shape());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& m : mask.values()) m = u(rng) < rate ? 0.0 : keep_scale;
    return mul(x, x.graph().constant(std::move(mask)));
}

}  // namespace kdreg::ad
