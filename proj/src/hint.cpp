#include "kdreg/hint.hpp"

#include <algorithm>
#include <cmath>

#include "kdreg/error.hpp"

namespace kdreg::hint {

namespace {

void check_repr(const char* op, ad::Var s, ad::Var t) {
    if (s.shape().size() != 2 || s.shape() != t.shape()) {
        throw ShapeError(std::string(op) + ": representation widths differ, " + ad::to_string(s.shape()) + " vs " +
                         ad::to_string(t.shape()));
    }
}

ad::Var per_sample_sq(ad::Var s, ad::Var t) { return ad::sum_cols(ad::square(ad::sub(t, s))); }

}  // namespace

std::string to_string(Mode m) {
    switch (m) {
        case Mode::None: return "none";
        case Mode::HT: return "HT";
        case Mode::AHT: return "AHT";
    }
    return "?";
}

Mode mode_from_string(const std::string& name) {
    if (name == "none") return Mode::None;
    if (name == "HT") return Mode::HT;
    if (name == "AHT") return Mode::AHT;
    throw ConfigError("unknown stage-1 mode '" + name + "' (expected none, HT or AHT)");
}

std::string to_string(PhiSource s) {
    switch (s) {
        case PhiSource::Blend: return "blend";
        case PhiSource::Translation: return "translation";
        case PhiSource::Rotation: return "rotation";
    }
    return "?";
}

PhiSource phi_source_from_string(const std::string& name) {
    if (name == "blend") return PhiSource::Blend;
    if (name == "translation") return PhiSource::Translation;
    if (name == "rotation") return PhiSource::Rotation;
    throw ConfigError("unknown hint phi source '" + name + "' (expected blend, translation or rotation)");
}

ad::Var hint_loss(ad::Var student_repr, ad::Var teacher_repr) {
    check_repr("hint_loss", student_repr, teacher_repr);
    const auto n = static_cast<double>(student_repr.shape()[0]);
    return ad::scale(ad::sum(per_sample_sq(student_repr, teacher_repr)), 1.0 / n);
}

ad::Var attentive_hint_loss(ad::Var student_repr, ad::Var teacher_repr, ad::Var phi) {
    check_repr("attentive_hint_loss", student_repr, teacher_repr);
    if (!phi.valid()) throw std::invalid_argument("attentive_hint_loss: missing phi weights");
    const std::size_t n = student_repr.shape()[0];
    if (phi.shape() != ad::Shape{n, 1}) {
        throw ShapeError("attentive_hint_loss: phi must be " + ad::to_string({n, 1}) + ", got " +
                         ad::to_string(phi.shape()));
    }
    return ad::scale(ad::sum(ad::mul(phi, per_sample_sq(student_repr, teacher_repr))), 1.0 / static_cast<double>(n));
}

double hint_phi(double phi_t, double phi_r, double beta, PhiSource source) {
    switch (source) {
        case PhiSource::Blend: return beta * phi_t + (1.0 - beta) * phi_r;
        case PhiSource::Translation: return phi_t;
        case PhiSource::Rotation: return phi_r;
    }
    return 1.0;
}

double reconstruction_error(const ad::Tensor& student_repr, const ad::Tensor& teacher_repr) {
    if (student_repr.shape() != teacher_repr.shape()) {
        throw ShapeError("reconstruction_error: " + ad::to_string(student_repr.shape()) + " vs " +
                         ad::to_string(teacher_repr.shape()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < student_repr.size(); ++i) {
        const double d = student_repr.values()[i] - teacher_repr.values()[i];
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(student_repr.size()));
}

double representation_error(const Model& student, const data::TeacherCache& cache,
                            const data::SequenceDataset& dataset, data::Split split) {
    const auto refs = dataset.samples(split);
    if (refs.empty()) throw DataError("representation_error: split '" + data::to_string(split) + "' is empty");
    if (cache.representation.cols() != student.spec().representation_dim()) {
        throw ShapeError("representation_error: teacher hint width " + std::to_string(cache.representation.cols()) +
                         " vs student guided width " + std::to_string(student.spec().representation_dim()));
    }
    const Prediction p = student.predict(dataset.feature_batch(refs));
    return reconstruction_error(p.representation, gather_rows(cache.representation, cache, dataset, refs));
}

Stage1Report train_stage1(Model& student, const data::TeacherCache& cache, const data::SequenceDataset& dataset,
                          const Stage1Options& options) {
    if (cache.representation.size() == 0) throw DataError("stage 1: teacher cache holds no hint representations");
    Stage1Report report;
    report.initial_error = representation_error(student, cache, dataset, options.report_split);
    if (options.mode == Mode::None) {
        report.final_error = report.initial_error;
        return report;
    }

    const std::size_t guided = student.spec().hint_index;
    auto params = student.layer_parameters(0, guided);
    // The sigma head hangs off the last hidden layer, never below the guided one.
    std::erase_if(params, [&](ad::Tensor* p) { return p == &student.sigma_weight() || p == &student.sigma_bias(); });
    Adam adam(options.train.adam);
    auto rng = derive_rng(options.seed, "stage1");
    const auto train = dataset.samples(data::Split::Train);

    for (std::size_t epoch = 0; epoch < options.train.epochs; ++epoch) {
        double epoch_loss = 0.0;
        const auto batches = make_batches(train, options.train.batch_size, rng);
        for (const auto& batch : batches) {
            ad::Graph g;
            ad::Var x = g.constant(dataset.feature_batch(batch));
            ad::Var target = g.constant(gather_rows(cache.representation, cache, dataset, batch));
            auto out = student.forward(g, x, true, &rng, true);
            ad::Var loss;
            if (options.mode == Mode::HT) {
                loss = hint_loss(out.representation, target);
            } else {
                ad::Tensor phi(ad::Shape{batch.size(), 1});
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    const std::size_t row = cache.row(dataset.id(batch[i]));
                    double w = hint_phi(cache.phi_t[row], cache.phi_r[row], options.beta, options.phi_source);
                    if (options.clamp_phi) w = std::clamp(w, 0.0, 1.0);
                    phi.values()[i] = w;
                }
                loss = attentive_hint_loss(out.representation, target, g.constant(std::move(phi)));
            }
            if (!std::isfinite(loss.item())) {
                throw DivergenceError("stage 1 diverged at epoch " + std::to_string(epoch + 1) + " (seed " +
                                      std::to_string(options.seed) + ")");
            }
            student.zero_grad();
            g.backward(loss);
            adam.step(params);
            epoch_loss += loss.item() * static_cast<double>(batch.size());
        }
        report.epoch_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    }
    report.final_error = representation_error(student, cache, dataset, options.report_split);
    return report;
}

}  // namespace kdreg::hint
