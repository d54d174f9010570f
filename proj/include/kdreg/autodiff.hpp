#pragma once

// Tape-based reverse-mode automatic differentiation over dense float64 tensors.
//
// A Graph is built fresh for every training step. Nodes are appended in
// evaluation order, so the tape itself is a topological order and backward()
// walks it in reverse. Parameters live outside the graph (owned by the model)
// and are bound as aliasing leaves: backward() accumulates straight into their
// grad buffers.

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace kdreg::ad {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    // Rank-2 view; rank-1 tensors read as a single row, scalars as 1x1.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::span<double> grad() { return grad_; }
    std::span<const double> grad() const { return grad_; }

    double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
    double item() const;

    void zero_grad();
    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double> values_;
    std::vector<double> grad_;
};

class Graph;

class Var {
public:
    Var() = default;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

class Graph {
public:
    // Receives the gradient flowing into the node it is attached to.
    using BackwardFn = std::function<void(Graph&, std::span<const double>)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf with no gradient.
    Var constant(Tensor value);
    // Leaf owning its gradient buffer; read it back with grad().
    Var variable(Tensor value);
    // Leaf aliasing an externally owned tensor. The tensor must outlive the graph.
    Var parameter(Tensor& param);

    const Tensor& value(Var v) const;
    std::span<const double> grad(Var v) const;
    bool requires_grad(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
    void backward(Var loss);

    // Op plumbing.
    Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn);
    // Mutable gradient buffer of a node; empty when the node needs no gradient.
    std::span<double> grad_buffer(std::size_t id);
    const Tensor& node_value(std::size_t id) const;

private:
    struct Node {
        Tensor owned;
        Tensor* external = nullptr;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Tensor& tensor(std::size_t id);
    const Tensor& tensor(std::size_t id) const;

    std::vector<Node> nodes_;
};

// Differentiable ops. Every binary op requires both operands on the same graph.
Var matmul(Var a, Var b);
// Same shape, or b of shape {1, n} broadcast across the rows of a {m, n}.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var square(Var a);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
// Requires strictly positive input.
Var log(Var a);
// Subgradient 0 at the origin.
Var sqrt(Var a);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
// Row sums: {m, n} -> {m, 1}.
Var sum_cols(Var a);
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);

// Inverted dropout: survivors are scaled by 1 / (1 - rate) so eval mode is the identity.
Var dropout(Var x, double rate, bool training, std::mt19937_64& rng);

}  // namespace kdreg::ad
