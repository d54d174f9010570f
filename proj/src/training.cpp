#include "kdreg/training.hpp"

#include <algorithm>

#include "kdreg/error.hpp"

namespace kdreg {

std::mt19937_64 derive_rng(std::uint64_t seed, std::string_view purpose) {
    // FNV-1a of the purpose tag, mixed with the seed through seed_seq.
    std::uint64_t h = 1469598103934665603ull;
    for (char c : purpose) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return std::mt19937_64(seq);
}

std::vector<std::vector<data::SampleRef>> make_batches(std::span<const data::SampleRef> samples,
                                                       std::size_t batch_size, std::mt19937_64& rng) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (samples.empty()) throw DataError("no samples to batch");
    std::vector<data::SampleRef> order(samples.begin(), samples.end());
    // Fisher-Yates with an explicit draw so the order does not depend on std::shuffle's implementation.
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    std::vector<std::vector<data::SampleRef>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

ad::Tensor gather_rows(const ad::Tensor& table, const data::TeacherCache& cache, const data::SequenceDataset& ds,
                       std::span<const data::SampleRef> refs) {
    const std::size_t w = table.cols();
    std::vector<double> v;
    v.reserve(refs.size() * w);
    for (auto r : refs) {
        const std::size_t row = cache.row(ds.id(r));
        for (std::size_t c = 0; c < w; ++c) v.push_back(table.at(row, c));
    }
    return ad::Tensor::matrix(refs.size(), w, std::move(v));
}

}  // namespace kdreg
