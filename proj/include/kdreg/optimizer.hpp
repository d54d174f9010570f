#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kdreg/autodiff.hpp"

namespace kdreg {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moment accumulators for one parameter set; shapes are fixed by the first step.
struct AdamState {
    AdamOptions options;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    std::uint64_t step = 0;
};

class Adam {
public:
    explicit Adam(AdamOptions options = {}) { state_.options = options; }

    // Bias-corrected Adam update using the grad buffers of `params`. The
    // parameter list must have the same layout on every call.
    void step(std::span<ad::Tensor* const> params);

    const AdamState& state() const { return state_; }

private:
    AdamState state_;
};

}  // namespace kdreg
