#include "kdreg/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "kdreg/error.hpp"

namespace kdreg::loss {

namespace {

using ad::Var;

struct GroupTerms {
    Var t;  // n x 1
    Var r;  // n x 1
};

void check_pose_batch(const char* op, Var v, const char* what) {
    if (!v.valid()) throw std::invalid_argument(std::string(op) + ": missing " + what);
    const auto& s = v.shape();
    if (s.size() != 2 || s[1] != 6) {
        throw ShapeError(std::string(op) + ": " + what + " must be n x 6, got " + ad::to_string(s));
    }
}

void check_inputs(const char* op, Var student, Var truth, Var teacher = {}) {
    check_pose_batch(op, student, "student predictions");
    check_pose_batch(op, truth, "ground truth");
    if (student.shape() != truth.shape()) {
        throw ShapeError(std::string(op) + ": student " + ad::to_string(student.shape()) + " vs ground truth " +
                         ad::to_string(truth.shape()));
    }
    if (teacher.valid()) {
        check_pose_batch(op, teacher, "teacher predictions");
        if (teacher.shape() != student.shape()) {
            throw ShapeError(std::string(op) + ": student " + ad::to_string(student.shape()) + " vs teacher " +
                             ad::to_string(teacher.shape()));
        }
    }
}

void check_weight(const char* op, const char* name, double w) {
    if (!(w >= 0.0 && w <= 1.0)) {
        throw std::invalid_argument(std::string(op) + ": " + name + " = " + std::to_string(w) + " outside [0, 1]");
    }
}

GroupTerms squared_groups(Var a, Var b) {
    Var d = ad::square(ad::sub(a, b));
    return {ad::sum_cols(ad::slice_cols(d, 0, 3)), ad::sum_cols(ad::slice_cols(d, 3, 6))};
}

Var combine(const GroupTerms& g, double beta) { return ad::add(ad::scale(g.t, beta), ad::scale(g.r, 1.0 - beta)); }

Var blend(Var student_term, Var imitation_term, double alpha) {
    return ad::mean(ad::add(ad::scale(student_term, alpha), ad::scale(imitation_term, 1.0 - alpha)));
}

// Constant 0/1 column, 1 where a > b.
Var greater_mask(Var a, Var b) {
    ad::Tensor m(a.shape());
    auto av = a.value().values();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = av[i] > bv[i] ? 1.0 : 0.0;
    return a.graph().constant(std::move(m));
}

Var column(Var m, std::size_t c) { return ad::slice_cols(m, c, c + 1); }

}  // namespace

std::string to_string(Variant v) {
    switch (v) {
        case Variant::StudentOnly: return "StudentOnly";
        case Variant::MinStudentImitation: return "MinStudentImitation";
        case Variant::AdditiveImitation: return "AdditiveImitation";
        case Variant::UpperBound: return "UpperBound";
        case Variant::PILLaplace: return "PILLaplace";
        case Variant::PILGaussian: return "PILGaussian";
        case Variant::AIL: return "AIL";
    }
    return "?";
}

Variant variant_from_string(const std::string& name) {
    for (auto v : {Variant::StudentOnly, Variant::MinStudentImitation, Variant::AdditiveImitation, Variant::UpperBound,
                   Variant::PILLaplace, Variant::PILGaussian, Variant::AIL}) {
        if (to_string(v) == name) return v;
    }
    if (name == "student") return Variant::StudentOnly;
    if (name == "min") return Variant::MinStudentImitation;
    if (name == "additive") return Variant::AdditiveImitation;
    if (name == "upper_bound") return Variant::UpperBound;
    throw ConfigError("unknown loss variant '" + name + "'");
}

std::string to_string(GateMode g) { return g == GateMode::PerComponent ? "per_component" : "full"; }

GateMode gate_from_string(const std::string& name) {
    if (name == "per_component") return GateMode::PerComponent;
    if (name == "full") return GateMode::Full;
    throw ConfigError("unknown gate mode '" + name + "' (expected per_component or full)");
}

bool needs_teacher(Variant v) { return v != Variant::StudentOnly; }

bool needs_sigma(Variant v) { return v == Variant::PILLaplace || v == Variant::PILGaussian; }

void Params::validate() const {
    check_weight("loss", "alpha", alpha);
    check_weight("loss", "beta", beta);
}

Var student_loss(Var student, Var truth, double beta) {
    check_inputs("student_loss", student, truth);
    check_weight("student_loss", "beta", beta);
    return ad::mean(combine(squared_groups(student, truth), beta));
}

Var min_loss(Var student, Var teacher, Var truth, double beta, GateMode gate) {
    check_inputs("min_loss", student, truth, teacher);
    if (!teacher.valid()) throw std::invalid_argument("min_loss: missing teacher predictions");
    check_weight("min_loss", "beta", beta);
    const GroupTerms s = squared_groups(student, truth);
    const GroupTerms i = squared_groups(student, teacher);
    if (gate == GateMode::Full) return ad::mean(ad::minimum(combine(s, beta), combine(i, beta)));
    return ad::mean(combine({ad::minimum(s.t, i.t), ad::minimum(s.r, i.r)}, beta));
}

Var additive_imitation_loss(Var student, Var teacher, Var truth, double alpha, double beta) {
    check_inputs("additive_imitation_loss", student, truth, teacher);
    if (!teacher.valid()) throw std::invalid_argument("additive_imitation_loss: missing teacher predictions");
    check_weight("additive_imitation_loss", "alpha", alpha);
    check_weight("additive_imitation_loss", "beta", beta);
    return blend(combine(squared_groups(student, truth), beta), combine(squared_groups(student, teacher), beta),
                 alpha);
}

Var upper_bound_loss(Var student, Var teacher, Var truth, double alpha, double beta, GateMode gate) {
    check_inputs("upper_bound_loss", student, truth, teacher);
    if (!teacher.valid()) throw std::invalid_argument("upper_bound_loss: missing teacher predictions");
    check_weight("upper_bound_loss", "alpha", alpha);
    check_weight("upper_bound_loss", "beta", beta);
    const GroupTerms s = squared_groups(student, truth);
    const GroupTerms i = squared_groups(student, teacher);
    // Teacher error is data, not a function of the student.
    ad::Graph& g = student.graph();
    const GroupTerms e = squared_groups(g.constant(teacher.value()), truth);
    Var imitation;
    if (gate == GateMode::Full) {
        imitation = ad::mul(combine(i, beta), greater_mask(combine(s, beta), combine(e, beta)));
    } else {
        imitation = combine({ad::mul(i.t, greater_mask(s.t, e.t)), ad::mul(i.r, greater_mask(s.r, e.r))}, beta);
    }
    return blend(combine(s, beta), imitation, alpha);
}

Var pil_loss(Var student, Var teacher, Var truth, Var log_sigma, double alpha, double beta, Distribution dist) {
    check_inputs("pil_loss", student, truth, teacher);
    if (!teacher.valid()) throw std::invalid_argument("pil_loss: missing teacher predictions");
    check_weight("pil_loss", "alpha", alpha);
    check_weight("pil_loss", "beta", beta);
    if (!log_sigma.valid()) throw std::invalid_argument("pil_loss: missing sigma head output");
    const std::size_t n = student.shape()[0];
    if (log_sigma.shape() != ad::Shape{n, 2}) {
        throw ShapeError("pil_loss: log-sigma must be " + ad::to_string({n, 2}) + ", got " +
                         ad::to_string(log_sigma.shape()));
    }
    Var sigma = ad::exp(log_sigma);
    for (double s : sigma.value().values()) {
        if (!(s > 0.0) || !std::isfinite(s)) throw std::domain_error("pil_loss: sigma must be positive and finite");
    }
    const GroupTerms i = squared_groups(student, teacher);
    auto nll = [&](Var sq, std::size_t c) {
        Var sig = column(sigma, c);
        Var logs = column(log_sigma, c);
        if (dist == Distribution::Laplace) return ad::add(ad::div(ad::sqrt(sq), sig), logs);
        return ad::add(ad::div(sq, ad::scale(ad::square(sig), 2.0)), logs);
    };
    return blend(combine(squared_groups(student, truth), beta), combine({nll(i.t, 0), nll(i.r, 1)}, beta), alpha);
}

Var attentive_imitation_loss(Var student, Var teacher, Var truth, Var phi, double alpha, double beta) {
    check_inputs("attentive_imitation_loss", student, truth, teacher);
    if (!teacher.valid()) throw std::invalid_argument("attentive_imitation_loss: missing teacher predictions");
    check_weight("attentive_imitation_loss", "alpha", alpha);
    check_weight("attentive_imitation_loss", "beta", beta);
    if (!phi.valid()) throw std::invalid_argument("attentive_imitation_loss: missing phi weights");
    const std::size_t n = student.shape()[0];
    if (phi.shape() != ad::Shape{n, 2}) {
        throw ShapeError("attentive_imitation_loss: phi must be " + ad::to_string({n, 2}) + ", got " +
                         ad::to_string(phi.shape()));
    }
    const GroupTerms i = squared_groups(student, teacher);
    const GroupTerms weighted{ad::mul(column(phi, 0), i.t), ad::mul(column(phi, 1), i.r)};
    return blend(combine(squared_groups(student, truth), beta), combine(weighted, beta), alpha);
}

Var blended_loss(const Params& p, const Batch& b) {
    p.validate();
    switch (p.variant) {
        case Variant::StudentOnly: return student_loss(b.student, b.truth, p.beta);
        case Variant::MinStudentImitation: return min_loss(b.student, b.teacher, b.truth, p.beta, p.gate);
        case Variant::AdditiveImitation:
            return additive_imitation_loss(b.student, b.teacher, b.truth, p.alpha, p.beta);
        case Variant::UpperBound: return upper_bound_loss(b.student, b.teacher, b.truth, p.alpha, p.beta, p.gate);
        case Variant::PILLaplace:
            return pil_loss(b.student, b.teacher, b.truth, b.log_sigma, p.alpha, p.beta, Distribution::Laplace);
        case Variant::PILGaussian:
            return pil_loss(b.student, b.teacher, b.truth, b.log_sigma, p.alpha, p.beta, Distribution::Gaussian);
        case Variant::AIL: return attentive_imitation_loss(b.student, b.teacher, b.truth, b.phi, p.alpha, p.beta);
    }
    throw std::logic_error("blended_loss: unhandled variant");
}

}  // namespace kdreg::loss
