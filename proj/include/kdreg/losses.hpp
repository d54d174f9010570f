#pragma once

// Blending objectives for distilling a pose regressor.
//
// Every op takes an n x 6 batch of poses laid out as [t_x t_y t_z | r_x r_y r_z]
// and returns a scalar mean over the batch. Each squared norm is taken
// separately over the translation and rotation groups and recombined as
// beta * translation + (1 - beta) * rotation.
//
// The student prediction is the differentiable input; teacher predictions,
// ground truth and attention weights enter as graph constants.

#include <string>

#include "kdreg/autodiff.hpp"

namespace kdreg::loss {

enum class Variant { StudentOnly, MinStudentImitation, AdditiveImitation, UpperBound, PILLaplace, PILGaussian, AIL };

// How the teacher-vs-student comparisons (min, upper-bound gate) are evaluated.
enum class GateMode { PerComponent, Full };

enum class Distribution { Laplace, Gaussian };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
std::string to_string(GateMode g);
GateMode gate_from_string(const std::string& name);

bool needs_teacher(Variant v);
bool needs_sigma(Variant v);

struct Params {
    Variant variant = Variant::AIL;
    double alpha = 0.5;
    double beta = 0.5;
    GateMode gate = GateMode::PerComponent;

    // Throws std::invalid_argument when alpha or beta leave [0, 1].
    void validate() const;
};

struct Batch {
    ad::Var student;    // n x 6
    ad::Var teacher;    // n x 6, needed by every imitation variant
    ad::Var truth;      // n x 6
    ad::Var log_sigma;  // n x 2, PIL only: s with sigma = exp(s), [translation, rotation]
    ad::Var phi;        // n x 2, AIL only: [phi_t, phi_r]
};

ad::Var student_loss(ad::Var student, ad::Var truth, double beta);

ad::Var min_loss(ad::Var student, ad::Var teacher, ad::Var truth, double beta,
                 GateMode gate = GateMode::PerComponent);

ad::Var additive_imitation_loss(ad::Var student, ad::Var teacher, ad::Var truth, double alpha, double beta);

// The imitation term is active only where the student is worse than the
// teacher; the gate is a constant mask, so no gradient flows through it.
ad::Var upper_bound_loss(ad::Var student, ad::Var teacher, ad::Var truth, double alpha, double beta,
                         GateMode gate = GateMode::PerComponent);

// Negative log-likelihood imitation term, constants dropped:
//   Laplace:  |d| / sigma + log sigma
//   Gaussian: |d|^2 / (2 sigma^2) + log sigma
// weighted by (1 - alpha) next to the alpha-weighted student term.
ad::Var pil_loss(ad::Var student, ad::Var teacher, ad::Var truth, ad::Var log_sigma, double alpha, double beta,
                 Distribution dist);

// Imitation term weighted per sample by the normalized teacher loss phi.
ad::Var attentive_imitation_loss(ad::Var student, ad::Var teacher, ad::Var truth, ad::Var phi, double alpha,
                                 double beta);

// Dispatches on params.variant.
ad::Var blended_loss(const Params& params, const Batch& batch);

}  // namespace kdreg::loss
