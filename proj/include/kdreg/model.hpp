#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdreg/autodiff.hpp"

namespace kdreg {

inline constexpr std::size_t kPoseDim = 6;
inline constexpr std::size_t kSigmaDim = 2;  // one log-scale per component group

enum class Activation { Relu, Tanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

// Fully connected regressor layout. Layer l maps widths[l] -> widths[l + 1];
// every layer except the last is followed by its activation, and dropout acts on
// the last hidden activation only, right before the linear pose layer. The hint (teacher)
// or guided (student) representation is the activated output of hidden layer
// `hint_index`, i.e. a vector of width widths[hint_index].
struct MlpSpec {
    std::vector<std::size_t> widths;
    std::vector<Activation> activations;
    std::size_t hint_index = 1;
    double dropout = 0.25;
    bool sigma_head = false;
    // Fixed affine map from network output to pose units, pose = offset + scale * out.
    // Empty means identity.
    std::vector<double> output_offset;
    std::vector<double> output_scale;

    std::size_t num_layers() const { return widths.empty() ? 0 : widths.size() - 1; }
    std::size_t input_dim() const { return widths.front(); }
    std::size_t representation_dim() const { return widths.at(hint_index); }

    // Throws ConfigError.
    void validate() const;

    // Uniform activation for every hidden layer.
    static MlpSpec uniform(std::vector<std::size_t> widths, std::size_t hint_index, Activation act = Activation::Relu,
                           double dropout = 0.25);

    nlohmann::json to_json() const;
    static MlpSpec from_json(const nlohmann::json& j);

    bool operator==(const MlpSpec&) const = default;
};

std::size_t count_parameters(const MlpSpec& spec);

struct Prediction {
    ad::Tensor pose;            // n x 6
    ad::Tensor representation;  // n x widths[hint_index]
};

class Model {
public:
    // All parameters zero.
    explicit Model(MlpSpec spec);
    // He-style uniform initialization scaled by fan-in, zero biases.
    static Model initialized(MlpSpec spec, std::mt19937_64& rng);

    const MlpSpec& spec() const { return spec_; }
    std::size_t num_layers() const { return spec_.num_layers(); }

    ad::Tensor& weight(std::size_t layer) { return weights_.at(layer); }
    ad::Tensor& bias(std::size_t layer) { return biases_.at(layer); }
    const ad::Tensor& weight(std::size_t layer) const { return weights_.at(layer); }
    const ad::Tensor& bias(std::size_t layer) const { return biases_.at(layer); }
    ad::Tensor& sigma_weight() { return sigma_weight_; }
    ad::Tensor& sigma_bias() { return sigma_bias_; }

    // Layer-ordered: w0, b0, w1, b1, ..., then the sigma head if present.
    std::vector<ad::Tensor*> parameters();
    std::vector<const ad::Tensor*> parameters() const;
    // Parameters of layers [begin, end); the sigma head belongs to no layer
    // range and is included when end == num_layers().
    std::vector<ad::Tensor*> layer_parameters(std::size_t begin, std::size_t end);
    // Everything not frozen.
    std::vector<ad::Tensor*> trainable_parameters();

    // Layers below `layer_index` receive no optimizer updates. Throws
    // std::out_of_range beyond num_layers().
    void freeze_below(std::size_t layer_index);
    std::size_t frozen_below() const { return frozen_below_; }

    void zero_grad();
    std::size_t parameter_count() const { return count_parameters(spec_); }

    struct GraphOutput {
        ad::Var pose;
        ad::Var representation;
        ad::Var log_sigma;  // invalid unless the spec has a sigma head
    };

    // Builds the forward pass on `graph`. With `representation_only`, stops at
    // the hint/guided layer and `pose` is left invalid. Dropout is active only
    // when `training` is set; `rng` is then required.
    GraphOutput forward(ad::Graph& graph, ad::Var features, bool training, std::mt19937_64* rng,
                        bool representation_only = false);

    // Eval-mode inference (no dropout, no tape).
    Prediction predict(const ad::Tensor& features) const;

    // Hash of all parameter bit patterns; used to verify freezing.
    std::uint64_t checksum() const;

    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);

private:
    MlpSpec spec_;
    std::vector<ad::Tensor> weights_;
    std::vector<ad::Tensor> biases_;
    ad::Tensor sigma_weight_;
    ad::Tensor sigma_bias_;
    std::size_t frozen_below_ = 0;
};

// Percentage of teacher parameters removed in the student: 100 * (1 - |S| / |T|).
double distillation_rate(std::size_t teacher_params, std::size_t student_params);
double distillation_rate(const MlpSpec& teacher, const MlpSpec& student);
double distillation_rate(const Model& teacher, const Model& student);

}  // namespace kdreg
