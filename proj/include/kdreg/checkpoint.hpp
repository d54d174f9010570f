#pragma once

// Versioned binary container shared by model checkpoints and teacher caches.
//
// Layout (all integers little-endian):
//   "KDREGBIN"                      8-byte magic
//   u32 version                     currently 1
//   u32 + bytes                     kind tag ("model", "teacher-cache")
//   u64 + bytes                     JSON metadata
//   u32                             tensor count
//   per tensor: u32 + name, u32 rank, u64 dims[rank], f64 values[prod(dims)]
//
// Doubles are stored as raw IEEE-754 bit patterns, so round trips are exact.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdreg/autodiff.hpp"

namespace kdreg {

inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
    std::string kind;
    nlohmann::json meta;
    std::vector<std::pair<std::string, ad::Tensor>> tensors;

    const ad::Tensor& tensor(const std::string& name) const;
};

void write_container(const Container& c, const std::filesystem::path& path);
// Throws DataError on bad magic, version, kind mismatch or truncation.
Container read_container(const std::filesystem::path& path, const std::string& expected_kind);

}  // namespace kdreg
