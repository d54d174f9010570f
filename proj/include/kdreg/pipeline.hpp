#pragma once

// Teacher training, two-stage distillation, evaluation and the comparison
// harnesses built on top of them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kdreg/config.hpp"
#include "kdreg/data.hpp"
#include "kdreg/geometry.hpp"
#include "kdreg/hint.hpp"
#include "kdreg/model.hpp"

namespace kdreg::pipeline {

inline constexpr int kReportFormatVersion = 1;

data::SequenceDataset load_or_generate(const DistillConfig& cfg);

struct Metrics {
    double rpe_t = 0.0;
    double rpe_r = 0.0;
    double ate = 0.0;
    std::size_t frames = 0;  // frame pairs
};

struct SequenceEvaluation {
    std::string name;
    Metrics metrics;
    geo::Trajectory predicted;
    geo::Trajectory truth;
};

struct Evaluation {
    std::vector<SequenceEvaluation> sequences;
    Metrics pooled;  // RMS over all frames (RPE) and all poses (ATE) of the split
};

// Integrates the model's per-pair predictions over each sequence of the split.
Evaluation evaluate(const Model& model, const data::SequenceDataset& ds, data::Split split, bool align);
// Throws DataError on length mismatch.
Metrics evaluate_trajectories(const geo::Trajectory& predicted, const geo::Trajectory& truth, bool align);

// Writes pred_<name>.txt, gt_<name>.txt per sequence and metrics.csv.
void write_evaluation(const Evaluation& ev, const std::filesystem::path& dir);

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_rpe_t = 0.0;
    double val_rpe_r = 0.0;
};

// Supervised training with the student loss on ground truth.
Model train_teacher(const DistillConfig& cfg, const data::SequenceDataset& ds, std::uint64_t seed,
                    std::vector<EpochLog>* log = nullptr);
void write_epoch_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

struct Stage2Options {
    loss::Params loss;
    TrainOptions train;
    bool freeze_prefix = true;  // freeze layers below the guided index
    bool clamp_phi = false;
    std::uint64_t seed = 1;
};

// Trains with the configured blended loss. The cache is required for every
// variant that consults the teacher.
std::vector<double> train_stage2(Model& student, const data::TeacherCache* cache, const data::SequenceDataset& ds,
                                 const Stage2Options& options);

struct Timing {
    double teacher_s = 0.0;
    double stage1_s = 0.0;
    double stage2_s = 0.0;
    double inference_us = 0.0;  // median single-pair predict
};

struct RunResult {
    std::uint64_t seed = 0;
    std::string label;
    hint::Mode stage1 = hint::Mode::None;
    loss::Params loss;
    std::size_t teacher_params = 0;
    std::size_t student_params = 0;
    double d_rate = 0.0;
    hint::Stage1Report stage1_report;
    double recon_error = 0.0;  // guided-layer error of the final student
    Metrics test;
    Metrics teacher_val;
    Metrics teacher_test;
    bool teacher_gate = false;
    Timing timing;
};

// Seed-level artifacts shared between rows of a comparison.
struct TeacherArtifacts {
    Model teacher;
    data::TeacherCache cache;
    Metrics val;
    Metrics test;
    double seconds = 0.0;
};

TeacherArtifacts prepare_teacher(const DistillConfig& cfg, const data::SequenceDataset& ds, std::uint64_t seed,
                                 std::vector<EpochLog>* log = nullptr);

bool passes_quality_gate(const DistillConfig& cfg, const Metrics& teacher_val);

// Per-component mean and std of the training-split ground truth as the
// spec's output map (a zero std maps to 1).
MlpSpec with_output_scaling(MlpSpec spec, const data::SequenceDataset& ds);

// Student initialization shared by every row of the same seed.
Model initial_student(const DistillConfig& cfg, const data::SequenceDataset& ds, std::uint64_t seed);

struct StudentRun {
    Model student;
    RunResult result;
    Evaluation evaluation;
};

// Stage 1 (optional) then stage 2 for one seed. `stage1_student`, when
// given, is a student already trained through stage 1 with cfg's settings.
StudentRun distill_seed(const DistillConfig& cfg, const data::SequenceDataset& ds, const TeacherArtifacts& teacher,
                        std::uint64_t seed, const Model* stage1_student = nullptr,
                        const hint::Stage1Report* stage1_report = nullptr);

// Full distill command: every seed of cfg, artifacts under out_dir. Writes
// report.csv (deterministic), timing.csv and manifest.json.
std::vector<RunResult> run_distill(const DistillConfig& cfg, const std::filesystem::path& out_dir);

// Per-seed rows, then one median row per label; no timings.
void write_report(const std::vector<RunResult>& runs, const std::filesystem::path& path);
void write_manifest(const DistillConfig& cfg, const std::string& command, const std::filesystem::path& out_dir,
                    const std::vector<std::string>& outputs);

struct AblationSummary {
    std::string label;
    hint::Mode stage1 = hint::Mode::None;
    loss::Variant loss = loss::Variant::StudentOnly;
    double recon_error = 0.0;
    double rpe_t = 0.0;
    double rpe_r = 0.0;
    double ate = 0.0;
};

struct AblationResult {
    std::vector<AblationSummary> rows;
    std::vector<RunResult> runs;
    bool teacher_gate = false;  // every seed's teacher passed
};

// One config per row of cfg.ablation_rows.
std::vector<DistillConfig> expand_ablation(const DistillConfig& cfg);
// Rows must share dataset, seeds and teacher settings (ConfigError otherwise).
// Teachers are trained once per seed and stage 1 once per (seed, settings).
AblationResult run_ablation(const std::vector<DistillConfig>& configs, const std::filesystem::path& out_dir);

struct CapacityRow {
    std::string name;
    std::size_t params = 0;
    std::uintmax_t bytes = 0;
    double inference_us = 0.0;
    double d_rate = 0.0;
    double weights_pct = 0.0;
    std::optional<double> target_weights_pct;
    std::optional<double> ate;
};

// Teacher row first, then one row per student in order.
std::vector<CapacityRow> report_capacity(const Model& teacher, const std::vector<std::pair<std::string, Model>>& students,
                                         const std::vector<std::optional<double>>& targets,
                                         const data::SequenceDataset* ds, bool align,
                                         const std::filesystem::path& scratch_dir, std::size_t timing_calls = 1000);
void write_capacity(const std::vector<CapacityRow>& rows, const std::filesystem::path& path);

// Capacity command: ladder students from cfg; with `train`, the teacher and each
// student are trained (first seed, configured method) and test ATE is reported.
std::vector<CapacityRow> run_capacity(const DistillConfig& cfg, bool train, const std::filesystem::path& out_dir);

double median(std::vector<double> v);

}  // namespace kdreg::pipeline
