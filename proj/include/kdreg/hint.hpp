#pragma once

// Stage-1 training of the student up to its guided layer against the teacher's
// hint-layer representation, either plain (HT) or weighted per sample by the
// teacher's normalized loss (AHT).

#include <string>
#include <vector>

#include "kdreg/autodiff.hpp"
#include "kdreg/data.hpp"
#include "kdreg/model.hpp"
#include "kdreg/training.hpp"

namespace kdreg::hint {

enum class Mode { None, HT, AHT };

// Which normalized teacher loss weights a hint sample. The representation
// feeds both output groups, so the default blends them with beta.
enum class PhiSource { Blend, Translation, Rotation };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& name);
std::string to_string(PhiSource s);
PhiSource phi_source_from_string(const std::string& name);

// (1/n) sum_i |psi_T,i - psi_S,i|^2
ad::Var hint_loss(ad::Var student_repr, ad::Var teacher_repr);
// (1/n) sum_i phi_i |psi_T,i - psi_S,i|^2, phi of shape n x 1.
ad::Var attentive_hint_loss(ad::Var student_repr, ad::Var teacher_repr, ad::Var phi);

double hint_phi(double phi_t, double phi_r, double beta, PhiSource source);

// Root mean square over every representation element.
double reconstruction_error(const ad::Tensor& student_repr, const ad::Tensor& teacher_repr);

struct Stage1Options {
    Mode mode = Mode::AHT;
    TrainOptions train;
    double beta = 0.5;
    PhiSource phi_source = PhiSource::Blend;
    bool clamp_phi = false;
    std::uint64_t seed = 1;
    data::Split report_split = data::Split::Test;
};

struct Stage1Report {
    double initial_error = 0.0;
    double final_error = 0.0;
    std::vector<double> epoch_loss;
};

// Reconstruction error of the student's guided layer against the cached hint
// representation over one split.
double representation_error(const Model& student, const data::TeacherCache& cache,
                            const data::SequenceDataset& dataset, data::Split split);

// Optimizes only the layers below the student's guided index. Mode None
// leaves the student untouched and reports its current error.
Stage1Report train_stage1(Model& student, const data::TeacherCache& cache, const data::SequenceDataset& dataset,
                          const Stage1Options& options);

}  // namespace kdreg::hint
