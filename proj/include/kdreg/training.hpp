#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "kdreg/data.hpp"
#include "kdreg/model.hpp"
#include "kdreg/optimizer.hpp"

namespace kdreg {

// Independent stream per (seed, purpose) so that adding a consumer never shifts another.
std::mt19937_64 derive_rng(std::uint64_t seed, std::string_view purpose);

// Shuffled minibatches over `samples`, last batch possibly short.
std::vector<std::vector<data::SampleRef>> make_batches(std::span<const data::SampleRef> samples,
                                                       std::size_t batch_size, std::mt19937_64& rng);

struct TrainOptions {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    AdamOptions adam;
};

// Row-stacked teacher-cache lookups keyed by sample id.
ad::Tensor gather_rows(const ad::Tensor& table, const data::TeacherCache& cache, const data::SequenceDataset& ds,
                       std::span<const data::SampleRef> refs);

}  // namespace kdreg
