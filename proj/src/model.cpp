#include "kdreg/model.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

#include "kdreg/checkpoint.hpp"
#include "kdreg/error.hpp"

namespace kdreg {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

void apply_activation(Activation a, RowMatrix& m) {
    switch (a) {
        case Activation::Relu: m = m.cwiseMax(0.0); break;
        case Activation::Tanh: m = m.array().tanh().matrix(); break;
    }
}

ad::Var activate(Activation a, ad::Var v) {
    switch (a) {
        case Activation::Relu: return ad::relu(v);
        case Activation::Tanh: return ad::tanh(v);
    }
    return v;
}

ad::Tensor to_tensor(const RowMatrix& m) {
    return ad::Tensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                              std::vector<double>(m.data(), m.data() + m.size()));
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

Activation activation_from_string(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "tanh") return Activation::Tanh;
    throw ConfigError("unknown activation '" + name + "' (expected relu or tanh)");
}

// ---------------------------------------------------------------- MlpSpec

void MlpSpec::validate() const {
    if (widths.size() < 3) throw ConfigError("mlp: need at least input, one hidden and output width");
    for (auto w : widths) {
        if (w == 0) throw ConfigError("mlp: layer widths must be positive");
    }
    if (widths.back() != kPoseDim) {
        throw ConfigError("mlp: output width must be " + std::to_string(kPoseDim) + ", got " +
                          std::to_string(widths.back()));
    }
    if (activations.size() != widths.size() - 2) {
        throw ConfigError("mlp: expected " + std::to_string(widths.size() - 2) + " hidden activations, got " +
                          std::to_string(activations.size()));
    }
    if (hint_index == 0 || hint_index >= num_layers()) {
        throw ConfigError("mlp: hint/guided index " + std::to_string(hint_index) + " must lie in [1, " +
                          std::to_string(num_layers() - 1) + "]");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("mlp: dropout must lie in [0, 1)");
    if (output_offset.empty() != output_scale.empty() ||
        (!output_offset.empty() && (output_offset.size() != kPoseDim || output_scale.size() != kPoseDim))) {
        throw ConfigError("mlp: output_offset and output_scale must both be empty or hold 6 values");
    }
    for (double v : output_scale) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("mlp: output_scale entries must be positive");
    }
    for (double v : output_offset) {
        if (!std::isfinite(v)) throw ConfigError("mlp: output_offset entries must be finite");
    }
}

MlpSpec MlpSpec::uniform(std::vector<std::size_t> widths, std::size_t hint_index, Activation act, double dropout) {
    MlpSpec s;
    s.activations.assign(widths.size() >= 2 ? widths.size() - 2 : 0, act);
    s.widths = std::move(widths);
    s.hint_index = hint_index;
    s.dropout = dropout;
    return s;
}

nlohmann::json MlpSpec::to_json() const {
    nlohmann::json acts = nlohmann::json::array();
    for (auto a : activations) acts.push_back(to_string(a));
    return {{"widths", widths},   {"activations", acts}, {"hint_index", hint_index},
            {"dropout", dropout}, {"sigma_head", sigma_head}, {"output_offset", output_offset},
            {"output_scale", output_scale}};
}

MlpSpec MlpSpec::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"widths", "activations", "activation", "hint_index",
                                                   "guided_index", "dropout", "sigma_head", "output_offset",
                                                   "output_scale"};
    if (!j.is_object()) throw ConfigError("mlp spec must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("mlp spec: unknown key '" + key + "'");
        }
    }
    try {
        MlpSpec s;
        s.widths = j.at("widths").get<std::vector<std::size_t>>();
        if (j.contains("activations")) {
            for (const auto& a : j.at("activations")) s.activations.push_back(activation_from_string(a));
        } else {
            const auto act = activation_from_string(j.value("activation", std::string("relu")));
            s.activations.assign(s.widths.size() >= 2 ? s.widths.size() - 2 : 0, act);
        }
        if (j.contains("hint_index") && j.contains("guided_index")) {
            throw ConfigError("mlp spec: give hint_index or guided_index, not both");
        }
        if (j.contains("hint_index")) {
            s.hint_index = j.at("hint_index").get<std::size_t>();
        } else if (j.contains("guided_index")) {
            s.hint_index = j.at("guided_index").get<std::size_t>();
        } else {
            s.hint_index = s.widths.size() >= 3 ? s.widths.size() - 2 : 1;  // penultimate
        }
        s.dropout = j.value("dropout", 0.25);
        s.sigma_head = j.value("sigma_head", false);
        s.output_offset = j.value("output_offset", std::vector<double>{});
        s.output_scale = j.value("output_scale", std::vector<double>{});
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("mlp spec: ") + e.what());
    }
}

std::size_t count_parameters(const MlpSpec& spec) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) n += spec.widths[l] * spec.widths[l + 1] + spec.widths[l + 1];
    if (spec.sigma_head && spec.widths.size() >= 2) {
        n += spec.widths[spec.widths.size() - 2] * kSigmaDim + kSigmaDim;
    }
    return n;
}

double distillation_rate(std::size_t teacher_params, std::size_t student_params) {
    if (teacher_params == 0) throw std::invalid_argument("distillation_rate: teacher has no parameters");
    return 100.0 * (1.0 - static_cast<double>(student_params) / static_cast<double>(teacher_params));
}

double distillation_rate(const MlpSpec& teacher, const MlpSpec& student) {
    return distillation_rate(count_parameters(teacher), count_parameters(student));
}

double distillation_rate(const Model& teacher, const Model& student) {
    return distillation_rate(teacher.spec(), student.spec());
}

// ---------------------------------------------------------------- Model

Model::Model(MlpSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
        weights_.emplace_back(ad::Shape{spec_.widths[l], spec_.widths[l + 1]});
        biases_.emplace_back(ad::Shape{1, spec_.widths[l + 1]});
    }
    if (spec_.sigma_head) {
        sigma_weight_ = ad::Tensor(ad::Shape{spec_.widths[spec_.num_layers() - 1], kSigmaDim});
        sigma_bias_ = ad::Tensor(ad::Shape{1, kSigmaDim});
    }
}

Model Model::initialized(MlpSpec spec, std::mt19937_64& rng) {
    Model m(std::move(spec));
    auto fill = [&rng](ad::Tensor& w) {
        const double limit = std::sqrt(6.0 / static_cast<double>(w.rows()));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (double& v : w.values()) v = u(rng);
    };
    for (auto& w : m.weights_) fill(w);
    // The sigma head starts at log-scale 0 (sigma = 1).
    return m;
}

std::vector<ad::Tensor*> Model::parameters() { return layer_parameters(0, num_layers()); }

std::vector<const ad::Tensor*> Model::parameters() const {
    std::vector<const ad::Tensor*> out;
    for (std::size_t l = 0; l < num_layers(); ++l) {
        out.push_back(&weights_[l]);
        out.push_back(&biases_[l]);
    }
    if (spec_.sigma_head) {
        out.push_back(&sigma_weight_);
        out.push_back(&sigma_bias_);
    }
    return out;
}

std::vector<ad::Tensor*> Model::layer_parameters(std::size_t begin, std::size_t end) {
    if (begin > end || end > num_layers()) throw std::out_of_range("layer range out of bounds");
    std::vector<ad::Tensor*> out;
    for (std::size_t l = begin; l < end; ++l) {
        out.push_back(&weights_[l]);
        out.push_back(&biases_[l]);
    }
    if (spec_.sigma_head && end == num_layers()) {
        out.push_back(&sigma_weight_);
        out.push_back(&sigma_bias_);
    }
    return out;
}

std::vector<ad::Tensor*> Model::trainable_parameters() { return layer_parameters(frozen_below_, num_layers()); }

void Model::freeze_below(std::size_t layer_index) {
    if (layer_index > num_layers()) {
        throw std::out_of_range("freeze_below: index " + std::to_string(layer_index) + " exceeds " +
                                std::to_string(num_layers()) + " layers");
    }
    frozen_below_ = layer_index;
}

void Model::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

Model::GraphOutput Model::forward(ad::Graph& graph, ad::Var features, bool training, std::mt19937_64* rng,
                                  bool representation_only) {
    if (features.value().rank() != 2 || features.value().cols() != spec_.input_dim()) {
        throw ShapeError("predict: features of shape " + ad::to_string(features.shape()) + " for input width " +
                         std::to_string(spec_.input_dim()));
    }
    if (training && spec_.dropout > 0.0 && rng == nullptr) {
        throw std::invalid_argument("forward: training with dropout needs an rng");
    }
    GraphOutput out;
    ad::Var h = features;
    for (std::size_t l = 0; l < num_layers(); ++l) {
        h = ad::add(ad::matmul(h, graph.parameter(weights_[l])), graph.parameter(biases_[l]));
        if (l + 1 == num_layers()) break;
        h = activate(spec_.activations[l], h);
        if (l + 1 == spec_.hint_index) {
            out.representation = h;
            if (representation_only) return out;
        }
        if (l + 2 == num_layers() && spec_.sigma_head) {
            out.log_sigma = ad::add(ad::matmul(h, graph.parameter(sigma_weight_)), graph.parameter(sigma_bias_));
        }
        if (training && spec_.dropout > 0.0 && l + 2 == num_layers()) h = ad::dropout(h, spec_.dropout, true, *rng);
    }
    if (!spec_.output_scale.empty()) {
        ad::Tensor diag(ad::Shape{kPoseDim, kPoseDim});
        for (std::size_t i = 0; i < kPoseDim; ++i) diag.values()[i * kPoseDim + i] = spec_.output_scale[i];
        h = ad::add(ad::matmul(h, graph.constant(std::move(diag))),
                    graph.constant(ad::Tensor::matrix(1, kPoseDim, spec_.output_offset)));
    }
    out.pose = h;
    return out;
}

Prediction Model::predict(const ad::Tensor& features) const {
    if (features.rank() != 2 || features.cols() != spec_.input_dim()) {
        throw ShapeError("predict: features of shape " + ad::to_string(features.shape()) + " for input width " +
                         std::to_string(spec_.input_dim()));
    }
    Prediction p;
    RowMatrix h = ConstMap(features.values().data(), static_cast<Eigen::Index>(features.rows()),
                           static_cast<Eigen::Index>(features.cols()));
    for (std::size_t l = 0; l < num_layers(); ++l) {
        const auto& w = weights_[l];
        const auto& b = biases_[l];
        RowMatrix next = h * ConstMap(w.values().data(), static_cast<Eigen::Index>(w.rows()),
                                      static_cast<Eigen::Index>(w.cols()));
        next.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), static_cast<Eigen::Index>(b.cols()));
        h = std::move(next);
        if (l + 1 == num_layers()) break;
        apply_activation(spec_.activations[l], h);
        if (l + 1 == spec_.hint_index) p.representation = to_tensor(h);
    }
    if (!spec_.output_scale.empty()) {
        for (Eigen::Index c = 0; c < h.cols(); ++c) {
            h.col(c) = (h.col(c).array() * spec_.output_scale[c] + spec_.output_offset[c]).matrix();
        }
    }
    p.pose = to_tensor(h);
    return p;
}

std::uint64_t Model::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto* p : parameters()) {
        for (double v : p->values()) {
            h ^= std::bit_cast<std::uint64_t>(v);
            h *= 1099511628211ull;
        }
    }
    return h;
}

void Model::save(const std::filesystem::path& path) const {
    Container c;
    c.kind = "model";
    c.meta = {{"spec", spec_.to_json()}, {"frozen_below", frozen_below_}};
    for (std::size_t l = 0; l < num_layers(); ++l) {
        c.tensors.emplace_back("layer" + std::to_string(l) + ".weight", weights_[l]);
        c.tensors.emplace_back("layer" + std::to_string(l) + ".bias", biases_[l]);
    }
    if (spec_.sigma_head) {
        c.tensors.emplace_back("sigma.weight", sigma_weight_);
        c.tensors.emplace_back("sigma.bias", sigma_bias_);
    }
    write_container(c, path);
}

Model Model::load(const std::filesystem::path& path) {
    const Container c = read_container(path, "model");
    Model m(MlpSpec::from_json(c.meta.at("spec")));
    auto assign = [&](ad::Tensor& dst, const std::string& name) {
        const auto& src = c.tensor(name);
        if (src.shape() != dst.shape()) {
            throw DataError(path.string() + ": tensor '" + name + "' has shape " + ad::to_string(src.shape()) +
                            ", spec expects " + ad::to_string(dst.shape()));
        }
        dst = src;
    };
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        assign(m.weights_[l], "layer" + std::to_string(l) + ".weight");
        assign(m.biases_[l], "layer" + std::to_string(l) + ".bias");
    }
    if (m.spec_.sigma_head) {
        assign(m.sigma_weight_, "sigma.weight");
        assign(m.sigma_bias_, "sigma.bias");
    }
    m.freeze_below(c.meta.value("frozen_below", std::size_t{0}));
    return m;
}

}  // namespace kdreg
