#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdreg/data.hpp"
#include "kdreg/hint.hpp"
#include "kdreg/losses.hpp"
#include "kdreg/model.hpp"
#include "kdreg/optimizer.hpp"
#include "kdreg/training.hpp"

namespace kdreg {

struct AblationRow {
    hint::Mode stage1 = hint::Mode::None;
    loss::Variant loss = loss::Variant::StudentOnly;
    std::optional<double> alpha;
    std::optional<double> beta;

    std::string label() const;
};

struct CapacityStudent {
    std::string name;
    double target_weights_pct = 0.0;  // |S| / |T| in percent
    MlpSpec spec;
};

// Every knob of a run. JSON keys are flat and match the CLI flags; unknown
// keys are rejected, and to_json() always emits every field with its value.
struct DistillConfig {
    std::string dataset_path;  // empty: generate from `generator`
    data::GeneratorSpec generator;

    MlpSpec teacher;
    MlpSpec student;
    std::string teacher_path;  // empty: train one teacher per seed
    double dropout = 0.25;
    // Networks emit standardized poses mapped back through training-set mean and std.
    bool normalize_targets = true;

    hint::Mode stage1 = hint::Mode::AHT;
    hint::PhiSource hint_phi = hint::PhiSource::Blend;
    loss::Params loss;
    bool clamp_phi = false;

    std::size_t teacher_epochs = 30;
    std::size_t stage1_epochs = 30;
    std::size_t stage2_epochs = 30;
    std::size_t batch_size = 32;
    AdamOptions adam;

    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    bool ate_align = false;
    // Teacher validation RPE must stay below both limits for supervised-gap claims.
    double quality_gate_rpe_t = 0.05;
    double quality_gate_rpe_r = 0.01;
    std::string out_dir = "runs";

    std::vector<AblationRow> ablation_rows;
    std::vector<CapacityStudent> capacity_students;

    DistillConfig();

    // Throws ConfigError.
    void validate() const;

    // Specs with the run-level dropout applied; the student grows a sigma head
    // for the probabilistic imitation variants.
    MlpSpec teacher_spec() const;
    MlpSpec student_spec() const;
    MlpSpec resolved(const MlpSpec& spec, bool sigma_head) const;

    TrainOptions train_options(std::size_t epochs) const;

    nlohmann::json to_json() const;
    static DistillConfig from_json(const nlohmann::json& j);
    // Accepts a config file or a run manifest (uses its "config" entry).
    static DistillConfig load(const std::filesystem::path& path);

    // Override one key, value given as JSON text (bare words are taken as strings).
    void set(const std::string& key, const std::string& value);

    // Same dataset source and generator parameters.
    bool same_dataset(const DistillConfig& other) const;
};

}  // namespace kdreg
