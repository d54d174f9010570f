#pragma once

#include <array>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kdreg/autodiff.hpp"
#include "kdreg/config.hpp"
#include "kdreg/data.hpp"
#include "oracles.hpp"

namespace support {

inline kdreg::ad::Tensor rows_tensor(const std::vector<oracle::Row>& rows) {
    std::vector<double> v;
    for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
    return kdreg::ad::Tensor::matrix(rows.size(), 6, std::move(v));
}

inline kdreg::ad::Tensor pairs_tensor(const std::vector<std::array<double, 2>>& rows) {
    std::vector<double> v;
    for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
    return kdreg::ad::Tensor::matrix(rows.size(), 2, std::move(v));
}

inline std::vector<oracle::Row> random_rows(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    std::vector<oracle::Row> out(n);
    for (auto& r : out)
        for (double& v : r) v = nd(rng);
    return out;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("kdreg_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline kdreg::data::GeneratorSpec tiny_generator(std::uint64_t seed = 3) {
    kdreg::data::GeneratorSpec g;
    g.seed = seed;
    g.train_sequences = 3;
    g.val_sequences = 1;
    g.test_sequences = 1;
    g.length = 40;
    g.feature_dim = 8;
    return g;
}

// Small but complete configuration for end-to-end runs.
inline kdreg::DistillConfig tiny_config() {
    kdreg::DistillConfig c;
    c.generator = tiny_generator();
    c.teacher = kdreg::MlpSpec::uniform({8, 24, 16, 6}, 2);
    c.student = kdreg::MlpSpec::uniform({8, 12, 16, 6}, 2);
    c.teacher_epochs = 3;
    c.stage1_epochs = 2;
    c.stage2_epochs = 2;
    c.batch_size = 16;
    c.adam.lr = 1e-3;
    c.seeds = {1, 2};
    c.capacity_students.clear();
    c.validate();
    return c;
}

}  // namespace support
