#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kdreg/autodiff.hpp"
#include "kdreg/geometry.hpp"
#include "kdreg/model.hpp"

namespace kdreg::data {

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& name);

struct Sequence {
    std::string name;
    Split split = Split::Train;
    std::vector<std::uint64_t> ids;      // one per frame pair
    std::vector<double> features;        // length x feature_dim, row-major
    std::vector<geo::PoseDelta> truth;   // ground-truth relative motion per frame pair

    std::size_t length() const { return truth.size(); }
};

struct SampleRef {
    std::size_t sequence;
    std::size_t frame;
};

struct SequenceDataset {
    std::size_t feature_dim = 0;
    std::vector<Sequence> sequences;

    // Throws DataError when the invariants (constant width, unique ids,
    // finite poses) do not hold.
    void validate() const;

    std::vector<SampleRef> samples(Split split) const;
    std::size_t count(Split split) const;

    std::span<const double> features(SampleRef s) const;
    const geo::PoseDelta& truth(SampleRef s) const { return sequences[s.sequence].truth[s.frame]; }
    std::uint64_t id(SampleRef s) const { return sequences[s.sequence].ids[s.frame]; }

    // Row-stacked batch tensors.
    ad::Tensor feature_batch(std::span<const SampleRef> refs) const;
    ad::Tensor truth_batch(std::span<const SampleRef> refs) const;

    // Line-oriented text with a versioned magic header; doubles are written in
    // shortest round-trip form, so save/load is bit-exact.
    void save(const std::filesystem::path& path) const;
    static SequenceDataset load(const std::filesystem::path& path);

    bool operator==(const SequenceDataset&) const;
};

// Heteroscedastic feature noise. Per-frame standard deviation is
//   base * (1 + motion_gain * |yaw rate| / max_yaw_rate) * (burst_scale inside adverse bursts)
// where adverse bursts start with probability burst_prob per frame and last
// burst_length frames on average.
struct NoiseSpec {
    double base = 0.05;
    double motion_gain = 1.0;
    double burst_prob = 0.01;
    double burst_scale = 6.0;
    double burst_length = 20.0;
};

struct GeneratorSpec {
    std::uint64_t seed = 7;
    std::size_t train_sequences = 12;
    std::size_t val_sequences = 2;
    std::size_t test_sequences = 2;
    std::size_t length = 500;
    std::size_t feature_dim = 32;
    // Observation model x = Q [g z; sin(w A z + b)] over the standardized pose z:
    // g is the linear gain, w the folding frequency.
    double embed_linear_gain = 1.0;
    double embed_frequency = 1.0;
    NoiseSpec noise;
};

// Smooth car-like trajectories (dominant forward motion, yaw-heavy rotation,
// bounded curvature) observed through a fixed random nonlinear embedding plus
// heteroscedastic noise. Deterministic per seed.
SequenceDataset generate_synthetic(const GeneratorSpec& spec);

// ---------------------------------------------------------------- KITTI poses

// Each non-empty line holds 12 reals: the row-major 3x4 matrix [R | t].
// Malformed lines raise DataError naming the line; rotation blocks off by more
// than 1e-3 from orthonormal are re-orthonormalized with a warning on stderr.
geo::Trajectory load_kitti_poses(const std::filesystem::path& path);
void save_kitti_poses(const geo::Trajectory& traj, const std::filesystem::path& path);
geo::Trajectory parse_kitti_poses(const std::string& text, const std::string& origin = "<memory>");
std::string format_kitti_poses(const geo::Trajectory& traj);

// ---------------------------------------------------------------- teacher cache

// Attention weight of one sample: 1 - e / eta, or 1 when eta == 0.
double normalized_teacher_loss(double error, double eta);
// max - min over the given errors.
double error_spread(std::span<const double> errors);

struct TeacherCache {
    std::vector<std::uint64_t> ids;
    ad::Tensor pose;            // N x 6 teacher predictions
    ad::Tensor representation;  // N x w hint-layer outputs
    std::vector<double> error_t;  // squared translation error vs ground truth
    std::vector<double> error_r;  // squared rotation (Euler vector) error
    std::vector<double> phi_t;
    std::vector<double> phi_r;
    std::vector<char> is_train;
    double eta_t = 0.0;
    double eta_r = 0.0;

    std::size_t size() const { return ids.size(); }
    bool contains(std::uint64_t id) const { return index_.contains(id); }
    // Throws DataError for unknown ids.
    std::size_t row(std::uint64_t id) const;

    void rebuild_index();

    void save(const std::filesystem::path& path) const;
    static TeacherCache load(const std::filesystem::path& path);

private:
    std::unordered_map<std::uint64_t, std::size_t> index_;
};

// Runs the teacher over every sample. eta comes from the training split only
// and is reused for every split.
TeacherCache build_teacher_cache(const Model& teacher, const SequenceDataset& dataset);

struct Histogram {
    std::vector<double> edges;       // bins + 1 edges
    std::vector<std::size_t> counts;
};

// Equal-width bins over [min, max]. Bins are right-closed, (a, b], except the
// first which also holds its left edge. Constant input collapses to one bin.
Histogram histogram(std::span<const double> values, std::size_t bins);

// Training-split teacher error distribution, squared and unsquared, as CSV
// with separate translation and rotation tables.
void export_error_distribution(const TeacherCache& cache, const std::filesystem::path& path, std::size_t bins = 20);

}  // namespace kdreg::data
