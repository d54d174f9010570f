#include "kdreg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "kdreg/error.hpp"
#include "kdreg/textio.hpp"
#include "kdreg/training.hpp"

namespace kdreg::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

geo::PoseDelta delta_from_row(const ad::Tensor& poses, std::size_t i) {
    geo::PoseDelta d;
    for (int k = 0; k < 3; ++k) {
        d.t[k] = poses.at(i, static_cast<std::size_t>(k));
        d.r[k] = poses.at(i, static_cast<std::size_t>(k) + 3);
    }
    return d;
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    return os;
}

std::string fmt(double v) { return format_double(v); }

std::string fmt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

// Mean student loss over a split, eval mode.
double split_loss(const Model& model, const data::SequenceDataset& ds, data::Split split, double beta) {
    const auto refs = ds.samples(split);
    if (refs.empty()) return kNaN;
    ad::Graph g;
    const auto p = model.predict(ds.feature_batch(refs));
    return loss::student_loss(g.constant(p.pose), g.constant(ds.truth_batch(refs)), beta).item();
}

void check_finite(double loss, const char* stage, std::size_t epoch, std::uint64_t seed) {
    if (!std::isfinite(loss)) {
        throw DivergenceError(std::string(stage) + " diverged at epoch " + std::to_string(epoch + 1) + " (seed " +
                              std::to_string(seed) + ")");
    }
}

double time_inference(const Model& model, const data::SequenceDataset& ds, std::size_t calls) {
    auto refs = ds.samples(data::Split::Test);
    if (refs.empty()) refs = ds.samples(data::Split::Train);
    if (refs.empty() || calls == 0) return kNaN;
    const ad::Tensor x = ds.feature_batch(std::span(refs).first(1));
    std::vector<double> us;
    us.reserve(calls);
    double sink = 0.0;
    for (std::size_t i = 0; i < calls; ++i) {
        Stopwatch w;
        sink += model.predict(x).pose.values()[0];
        us.push_back(w.seconds() * 1e6);
    }
    if (std::isnan(sink)) return kNaN;
    return median(us);
}

hint::Stage1Options stage1_options(const DistillConfig& cfg, std::uint64_t seed) {
    hint::Stage1Options o;
    o.mode = cfg.stage1;
    o.train = cfg.train_options(cfg.stage1_epochs);
    o.beta = cfg.loss.beta;
    o.phi_source = cfg.hint_phi;
    o.clamp_phi = cfg.clamp_phi;
    o.seed = seed;
    return o;
}

// Everything that determines the shared teacher of a seed.
json teacher_key(const DistillConfig& c) {
    json j = c.to_json();
    return {j["teacher"], j["teacher_path"], j["teacher_epochs"], j["dropout"], j["normalize_targets"], j["batch_size"], j["lr"],
            j["adam_beta1"], j["adam_beta2"], j["adam_eps"], j["beta"], j["ate_align"]};
}

// Everything that determines a stage-1 student for a seed and mode.
std::string stage1_key(const DistillConfig& c) {
    json j = c.to_json();
    return json{j["student"], c.student_spec().sigma_head, j["stage1"], j["stage1_epochs"], j["hint_phi"], j["beta"],
                j["clamp_phi"], j["dropout"], j["normalize_targets"], j["batch_size"], j["lr"], j["adam_beta1"], j["adam_beta2"],
                j["adam_eps"]}
        .dump();
}

std::string row_label(const DistillConfig& c) {
    return hint::to_string(c.stage1) + "+" + loss::to_string(c.loss.variant);
}

void write_teacher_artifacts(const TeacherArtifacts& t, const std::vector<EpochLog>& log, const fs::path& dir,
                             bool save_teacher) {
    fs::create_directories(dir);
    if (save_teacher) t.teacher.save(dir / "teacher.bin");
    if (!log.empty()) write_epoch_log(log, dir / "teacher_log.csv");
    t.cache.save(dir / "teacher_cache.bin");
    data::export_error_distribution(t.cache, dir / "teacher_errors.csv");
}

}  // namespace

double median(std::vector<double> v) {
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

data::SequenceDataset load_or_generate(const DistillConfig& cfg) {
    data::SequenceDataset ds = cfg.dataset_path.empty() ? data::generate_synthetic(cfg.generator)
                                                        : data::SequenceDataset::load(cfg.dataset_path);
    if (ds.feature_dim != cfg.teacher.input_dim()) {
        throw DataError("dataset feature width " + std::to_string(ds.feature_dim) + " differs from model input width " +
                        std::to_string(cfg.teacher.input_dim()));
    }
    if (ds.count(data::Split::Train) == 0) throw DataError("dataset has no training samples");
    return ds;
}

// ---------------------------------------------------------------- evaluation

Metrics evaluate_trajectories(const geo::Trajectory& predicted, const geo::Trajectory& truth, bool align) {
    if (predicted.size() != truth.size()) {
        throw DataError("trajectory lengths differ: " + std::to_string(predicted.size()) + " predicted vs " +
                        std::to_string(truth.size()) + " ground-truth poses");
    }
    if (truth.empty()) throw DataError("empty trajectory");
    Metrics m;
    m.frames = truth.size() - 1;
    if (m.frames > 0) {
        const auto r = geo::rpe(geo::differences(predicted), geo::differences(truth));
        m.rpe_t = r.rms_t;
        m.rpe_r = r.rms_r;
    }
    m.ate = geo::ate(predicted, truth, align);
    return m;
}

Evaluation evaluate(const Model& model, const data::SequenceDataset& ds, data::Split split, bool align) {
    Evaluation ev;
    double sum_t = 0.0, sum_r = 0.0, sum_a = 0.0;
    std::size_t frames = 0, poses = 0;
    for (std::size_t s = 0; s < ds.sequences.size(); ++s) {
        const auto& seq = ds.sequences[s];
        if (seq.split != split || seq.length() == 0) continue;
        std::vector<data::SampleRef> refs;
        for (std::size_t f = 0; f < seq.length(); ++f) refs.push_back({s, f});
        const auto p = model.predict(ds.feature_batch(refs));
        std::vector<geo::PoseDelta> deltas;
        for (std::size_t i = 0; i < refs.size(); ++i) deltas.push_back(delta_from_row(p.pose, i));

        SequenceEvaluation se;
        se.name = seq.name;
        se.predicted = geo::integrate(deltas);
        se.truth = geo::integrate(seq.truth);
        const auto r = geo::rpe(deltas, seq.truth);
        se.metrics = {r.rms_t, r.rms_r, geo::ate(se.predicted, se.truth, align), seq.length()};
        const auto n = static_cast<double>(seq.length());
        sum_t += r.rms_t * r.rms_t * n;
        sum_r += r.rms_r * r.rms_r * n;
        sum_a += se.metrics.ate * se.metrics.ate * (n + 1.0);
        frames += seq.length();
        poses += seq.length() + 1;
        ev.sequences.push_back(std::move(se));
    }
    if (ev.sequences.empty()) throw DataError("split '" + data::to_string(split) + "' has no sequences to evaluate");
    ev.pooled = {std::sqrt(sum_t / static_cast<double>(frames)), std::sqrt(sum_r / static_cast<double>(frames)),
                 std::sqrt(sum_a / static_cast<double>(poses)), frames};
    return ev;
}

void write_evaluation(const Evaluation& ev, const fs::path& dir) {
    fs::create_directories(dir);
    auto os = open_out(dir / "metrics.csv");
    os << "format_version,sequence,frames,rpe_t,rpe_r,ate\n";
    for (const auto& s : ev.sequences) {
        data::save_kitti_poses(s.predicted, dir / ("pred_" + s.name + ".txt"));
        data::save_kitti_poses(s.truth, dir / ("gt_" + s.name + ".txt"));
        os << kReportFormatVersion << ',' << s.name << ',' << s.metrics.frames << ',' << fmt(s.metrics.rpe_t) << ','
           << fmt(s.metrics.rpe_r) << ',' << fmt(s.metrics.ate) << '\n';
    }
    os << kReportFormatVersion << ",all," << ev.pooled.frames << ',' << fmt(ev.pooled.rpe_t) << ','
       << fmt(ev.pooled.rpe_r) << ',' << fmt(ev.pooled.ate) << '\n';
}

// ---------------------------------------------------------------- training

Model train_teacher(const DistillConfig& cfg, const data::SequenceDataset& ds, std::uint64_t seed,
                    std::vector<EpochLog>* log) {
    auto init = derive_rng(seed, "teacher-init");
    Model model = Model::initialized(
        cfg.normalize_targets ? with_output_scaling(cfg.teacher_spec(), ds) : cfg.teacher_spec(), init);
    const TrainOptions opts = cfg.train_options(cfg.teacher_epochs);
    const double beta = cfg.loss.beta;
    const bool has_val = ds.count(data::Split::Val) > 0;

    auto params = model.trainable_parameters();
    Adam adam(opts.adam);
    auto rng = derive_rng(seed, "teacher");
    const auto train = ds.samples(data::Split::Train);
    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        double total = 0.0;
        for (const auto& batch : make_batches(train, opts.batch_size, rng)) {
            ad::Graph g;
            auto out = model.forward(g, g.constant(ds.feature_batch(batch)), true, &rng);
            ad::Var loss = loss::student_loss(out.pose, g.constant(ds.truth_batch(batch)), beta);
            check_finite(loss.item(), "teacher training", epoch, seed);
            model.zero_grad();
            g.backward(loss);
            adam.step(params);
            total += loss.item() * static_cast<double>(batch.size());
        }
        if (log) {
            EpochLog e{epoch + 1, total / static_cast<double>(train.size()), kNaN, kNaN, kNaN};
            if (has_val) {
                e.val_loss = split_loss(model, ds, data::Split::Val, beta);
                const auto m = evaluate(model, ds, data::Split::Val, false).pooled;
                e.val_rpe_t = m.rpe_t;
                e.val_rpe_r = m.rpe_r;
            }
            log->push_back(e);
        }
    }
    return model;
}

void write_epoch_log(const std::vector<EpochLog>& log, const fs::path& path) {
    auto os = open_out(path);
    os << "format_version,epoch,train_loss,val_loss,val_rpe_t,val_rpe_r\n";
    for (const auto& e : log) {
        os << kReportFormatVersion << ',' << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_loss) << ','
           << fmt(e.val_rpe_t) << ',' << fmt(e.val_rpe_r) << '\n';
    }
}

std::vector<double> train_stage2(Model& student, const data::TeacherCache* cache, const data::SequenceDataset& ds,
                                 const Stage2Options& options) {
    const auto variant = options.loss.variant;
    if (loss::needs_teacher(variant) && !cache) {
        throw DataError("stage 2: loss " + loss::to_string(variant) + " needs a teacher cache");
    }
    if (loss::needs_sigma(variant) && !student.spec().sigma_head) {
        throw ConfigError("stage 2: loss " + loss::to_string(variant) + " needs a student with a sigma head");
    }
    student.freeze_below(options.freeze_prefix ? student.spec().hint_index : 0);
    auto params = student.trainable_parameters();
    Adam adam(options.train.adam);
    auto rng = derive_rng(options.seed, "stage2");
    const auto train = ds.samples(data::Split::Train);
    std::vector<double> epoch_loss;

    for (std::size_t epoch = 0; epoch < options.train.epochs; ++epoch) {
        double total = 0.0;
        for (const auto& batch : make_batches(train, options.train.batch_size, rng)) {
            ad::Graph g;
            auto out = student.forward(g, g.constant(ds.feature_batch(batch)), true, &rng);
            loss::Batch b;
            b.student = out.pose;
            b.truth = g.constant(ds.truth_batch(batch));
            if (loss::needs_teacher(variant)) b.teacher = g.constant(gather_rows(cache->pose, *cache, ds, batch));
            if (loss::needs_sigma(variant)) b.log_sigma = out.log_sigma;
            if (variant == loss::Variant::AIL) {
                ad::Tensor phi(ad::Shape{batch.size(), 2});
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    const std::size_t row = cache->row(ds.id(batch[i]));
                    double pt = cache->phi_t[row], pr = cache->phi_r[row];
                    if (options.clamp_phi) {
                        pt = std::clamp(pt, 0.0, 1.0);
                        pr = std::clamp(pr, 0.0, 1.0);
                    }
                    phi.values()[2 * i] = pt;
                    phi.values()[2 * i + 1] = pr;
                }
                b.phi = g.constant(std::move(phi));
            }
            ad::Var loss = loss::blended_loss(options.loss, b);
            check_finite(loss.item(), "stage 2", epoch, options.seed);
            student.zero_grad();
            g.backward(loss);
            adam.step(params);
            total += loss.item() * static_cast<double>(batch.size());
        }
        epoch_loss.push_back(total / static_cast<double>(train.size()));
    }
    return epoch_loss;
}

// ---------------------------------------------------------------- distillation

TeacherArtifacts prepare_teacher(const DistillConfig& cfg, const data::SequenceDataset& ds, std::uint64_t seed,
                                 std::vector<EpochLog>* log) {
    Stopwatch w;
    Model teacher = cfg.teacher_path.empty() ? train_teacher(cfg, ds, seed, log) : Model::load(cfg.teacher_path);
    const double seconds = cfg.teacher_path.empty() ? w.seconds() : 0.0;
    if (teacher.spec().input_dim() != ds.feature_dim) {
        throw DataError("teacher input width " + std::to_string(teacher.spec().input_dim()) +
                        " differs from dataset feature width " + std::to_string(ds.feature_dim));
    }
    if (teacher.spec().representation_dim() != cfg.student.representation_dim()) {
        throw ConfigError("teacher hint width " + std::to_string(teacher.spec().representation_dim()) +
                          " differs from student guided width " + std::to_string(cfg.student.representation_dim()));
    }
    TeacherArtifacts t{std::move(teacher), {}, {kNaN, kNaN, kNaN, 0}, {}, seconds};
    t.cache = data::build_teacher_cache(t.teacher, ds);
    if (ds.count(data::Split::Val) > 0) t.val = evaluate(t.teacher, ds, data::Split::Val, cfg.ate_align).pooled;
    t.test = evaluate(t.teacher, ds, data::Split::Test, cfg.ate_align).pooled;
    return t;
}

bool passes_quality_gate(const DistillConfig& cfg, const Metrics& v) {
    return v.rpe_t < cfg.quality_gate_rpe_t && v.rpe_r < cfg.quality_gate_rpe_r;
}

MlpSpec with_output_scaling(MlpSpec spec, const data::SequenceDataset& ds) {
    const auto refs = ds.samples(data::Split::Train);
    if (refs.empty()) throw DataError("output scaling: no training samples");
    const ad::Tensor y = ds.truth_batch(refs);
    const auto n = static_cast<double>(refs.size());
    spec.output_offset.assign(kPoseDim, 0.0);
    spec.output_scale.assign(kPoseDim, 0.0);
    for (std::size_t c = 0; c < kPoseDim; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < refs.size(); ++i) mean += y.at(i, c);
        mean /= n;
        for (std::size_t i = 0; i < refs.size(); ++i) var += (y.at(i, c) - mean) * (y.at(i, c) - mean);
        const double sd = std::sqrt(var / n);
        spec.output_offset[c] = mean;
        spec.output_scale[c] = sd > 0.0 ? sd : 1.0;
    }
    return spec;
}

Model initial_student(const DistillConfig& cfg, const data::SequenceDataset& ds, std::uint64_t seed) {
    auto rng = derive_rng(seed, "student-init");
    return Model::initialized(cfg.normalize_targets ? with_output_scaling(cfg.student_spec(), ds) : cfg.student_spec(),
                              rng);
}

StudentRun distill_seed(const DistillConfig& cfg, const data::SequenceDataset& ds, const TeacherArtifacts& teacher,
                        std::uint64_t seed, const Model* stage1_student, const hint::Stage1Report* stage1_report) {
    StudentRun run{stage1_student ? *stage1_student : initial_student(cfg, ds, seed), {}, {}};
    auto& r = run.result;
    r.seed = seed;
    r.label = row_label(cfg);
    r.stage1 = cfg.stage1;
    r.loss = cfg.loss;
    r.teacher_params = teacher.teacher.parameter_count();
    r.student_params = run.student.parameter_count();
    r.d_rate = distillation_rate(teacher.teacher, run.student);
    r.teacher_val = teacher.val;
    r.teacher_test = teacher.test;
    r.teacher_gate = passes_quality_gate(cfg, teacher.val);
    r.timing.teacher_s = teacher.seconds;

    if (stage1_student) {
        if (!stage1_report) throw std::invalid_argument("distill_seed: stage-1 student given without its report");
        r.stage1_report = *stage1_report;
    } else {
        Stopwatch w;
        r.stage1_report = hint::train_stage1(run.student, teacher.cache, ds, stage1_options(cfg, seed));
        r.timing.stage1_s = w.seconds();
    }

    Stage2Options s2;
    s2.loss = cfg.loss;
    s2.train = cfg.train_options(cfg.stage2_epochs);
    s2.freeze_prefix = cfg.stage1 != hint::Mode::None;
    s2.clamp_phi = cfg.clamp_phi;
    s2.seed = seed;
    Stopwatch w2;
    train_stage2(run.student, &teacher.cache, ds, s2);
    r.timing.stage2_s = w2.seconds();

    r.recon_error = hint::representation_error(run.student, teacher.cache, ds, data::Split::Test);
    run.evaluation = evaluate(run.student, ds, data::Split::Test, cfg.ate_align);
    r.test = run.evaluation.pooled;
    r.timing.inference_us = time_inference(run.student, ds, 1000);
    return run;
}

void write_report(const std::vector<RunResult>& runs, const fs::path& path) {
    auto os = open_out(path);
    os << "format_version,row,seed,stage1,loss,alpha,beta,gate,teacher_params,student_params,d_rate,"
          "recon_error_initial,recon_error_stage1,recon_error,rpe_t,rpe_r,ate,"
          "teacher_val_rpe_t,teacher_val_rpe_r,teacher_gate,teacher_rpe_t,teacher_rpe_r,teacher_ate\n";
    auto line = [&](const RunResult& r, const std::string& seed, const std::string& gate_flag) {
        os << kReportFormatVersion << ',' << r.label << ',' << seed << ',' << hint::to_string(r.stage1) << ','
           << loss::to_string(r.loss.variant) << ',' << fmt(r.loss.alpha) << ',' << fmt(r.loss.beta) << ','
           << loss::to_string(r.loss.gate) << ',' << r.teacher_params << ',' << r.student_params << ','
           << fmt(r.d_rate) << ',' << fmt(r.stage1_report.initial_error) << ',' << fmt(r.stage1_report.final_error)
           << ',' << fmt(r.recon_error) << ',' << fmt(r.test.rpe_t) << ',' << fmt(r.test.rpe_r) << ','
           << fmt(r.test.ate) << ',' << fmt(r.teacher_val.rpe_t) << ',' << fmt(r.teacher_val.rpe_r) << ','
           << gate_flag << ',' << fmt(r.teacher_test.rpe_t) << ',' << fmt(r.teacher_test.rpe_r) << ','
           << fmt(r.teacher_test.ate) << '\n';
    };
    std::vector<std::string> labels;
    for (const auto& r : runs) {
        if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
        line(r, std::to_string(r.seed), r.teacher_gate ? "1" : "0");
    }
    for (const auto& label : labels) {
        std::vector<const RunResult*> group;
        for (const auto& r : runs) {
            if (r.label == label) group.push_back(&r);
        }
        auto med = [&](auto field) {
            std::vector<double> v;
            for (const auto* r : group) v.push_back(field(*r));
            return median(std::move(v));
        };
        RunResult m = *group.front();
        m.stage1_report.initial_error = med([](const RunResult& r) { return r.stage1_report.initial_error; });
        m.stage1_report.final_error = med([](const RunResult& r) { return r.stage1_report.final_error; });
        m.recon_error = med([](const RunResult& r) { return r.recon_error; });
        m.test.rpe_t = med([](const RunResult& r) { return r.test.rpe_t; });
        m.test.rpe_r = med([](const RunResult& r) { return r.test.rpe_r; });
        m.test.ate = med([](const RunResult& r) { return r.test.ate; });
        m.teacher_val.rpe_t = med([](const RunResult& r) { return r.teacher_val.rpe_t; });
        m.teacher_val.rpe_r = med([](const RunResult& r) { return r.teacher_val.rpe_r; });
        m.teacher_test.rpe_t = med([](const RunResult& r) { return r.teacher_test.rpe_t; });
        m.teacher_test.rpe_r = med([](const RunResult& r) { return r.teacher_test.rpe_r; });
        m.teacher_test.ate = med([](const RunResult& r) { return r.teacher_test.ate; });
        const bool all_gated = std::all_of(group.begin(), group.end(), [](const auto* r) { return r->teacher_gate; });
        line(m, "median", all_gated ? "1" : "0");
    }
}

void write_manifest(const DistillConfig& cfg, const std::string& command, const fs::path& out_dir,
                    const std::vector<std::string>& outputs) {
    json j = {{"kdreg_manifest", 1},
              {"format_version", kReportFormatVersion},
              {"command", command},
              {"config", cfg.to_json()},
              {"outputs", outputs}};
    auto os = open_out(out_dir / "manifest.json");
    os << j.dump(2) << '\n';
}

namespace {

void write_timing(const std::vector<RunResult>& runs, const fs::path& path) {
    auto os = open_out(path);
    os << "format_version,row,seed,teacher_s,stage1_s,stage2_s,inference_us\n";
    for (const auto& r : runs) {
        os << kReportFormatVersion << ',' << r.label << ',' << r.seed << ',' << fmt(r.timing.teacher_s) << ','
           << fmt(r.timing.stage1_s) << ',' << fmt(r.timing.stage2_s) << ',' << fmt(r.timing.inference_us) << '\n';
    }
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

}  // namespace

std::vector<RunResult> run_distill(const DistillConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    const auto ds = load_or_generate(cfg);
    std::vector<RunResult> runs;
    std::vector<std::string> outputs = {"report.csv", "timing.csv"};
    for (auto seed : cfg.seeds) {
        const fs::path dir = out_dir / seed_dir(seed);
        std::vector<EpochLog> log;
        const auto teacher = prepare_teacher(cfg, ds, seed, &log);
        write_teacher_artifacts(teacher, log, dir, cfg.teacher_path.empty());
        auto run = distill_seed(cfg, ds, teacher, seed);
        run.student.save(dir / "student.bin");
        write_evaluation(run.evaluation, dir / "test");
        outputs.push_back(seed_dir(seed) + "/");
        runs.push_back(std::move(run.result));
    }
    write_report(runs, out_dir / "report.csv");
    write_timing(runs, out_dir / "timing.csv");
    write_manifest(cfg, "distill", out_dir, outputs);
    return runs;
}

// ---------------------------------------------------------------- ablation

std::vector<DistillConfig> expand_ablation(const DistillConfig& cfg) {
    if (cfg.ablation_rows.empty()) throw ConfigError("ablation_rows is empty");
    std::vector<DistillConfig> out;
    for (const auto& row : cfg.ablation_rows) {
        DistillConfig c = cfg;
        c.stage1 = row.stage1;
        c.loss.variant = row.loss;
        if (row.alpha) c.loss.alpha = *row.alpha;
        if (row.beta) c.loss.beta = *row.beta;
        c.ablation_rows = {row};
        c.validate();
        out.push_back(std::move(c));
    }
    return out;
}

namespace {

json ablation_checks(const AblationResult& res) {
    auto find = [&](hint::Mode m, loss::Variant v) -> const AblationSummary* {
        for (const auto& r : res.rows) {
            if (r.stage1 == m && r.loss == v) return &r;
        }
        return nullptr;
    };
    using hint::Mode;
    using loss::Variant;
    const auto* none_s = find(Mode::None, Variant::StudentOnly);
    const auto* ht_s = find(Mode::HT, Variant::StudentOnly);
    const auto* ht_a = find(Mode::HT, Variant::AIL);
    const auto* aht_s = find(Mode::AHT, Variant::StudentOnly);
    const auto* aht_a = find(Mode::AHT, Variant::AIL);
    json j = {{"teacher_gate", res.teacher_gate}};
    if (none_s && ht_s && ht_a && aht_a) {
        j["ate_ordering"] = aht_a->ate <= ht_a->ate && ht_a->ate <= ht_s->ate && ht_s->ate <= none_s->ate;
    }
    if (ht_s && aht_s) j["recon_aht_le_ht"] = aht_s->recon_error <= ht_s->recon_error;
    if (none_s && aht_a) {
        j["supervised_gap"] = !res.teacher_gate ? "inconclusive" : (aht_a->ate < none_s->ate ? "pass" : "fail");
    }
    return j;
}

}  // namespace

AblationResult run_ablation(const std::vector<DistillConfig>& configs, const fs::path& out_dir) {
    if (configs.empty()) throw ConfigError("ablation needs at least one row");
    const DistillConfig& base = configs.front();
    for (const auto& c : configs) {
        c.validate();
        if (!c.same_dataset(base)) throw ConfigError("ablation rows use inconsistent datasets");
        if (c.seeds != base.seeds) throw ConfigError("ablation rows use different seeds");
        if (teacher_key(c) != teacher_key(base)) throw ConfigError("ablation rows use different teacher settings");
    }
    fs::create_directories(out_dir);
    const auto ds = load_or_generate(base);

    std::vector<std::string> labels;
    for (const auto& c : configs) {
        std::string label = row_label(c);
        for (int k = 2; std::find(labels.begin(), labels.end(), label) != labels.end(); ++k) {
            label = row_label(c) + "#" + std::to_string(k);
        }
        labels.push_back(label);
    }

    AblationResult res;
    res.teacher_gate = true;
    for (auto seed : base.seeds) {
        const fs::path dir = out_dir / seed_dir(seed);
        std::vector<EpochLog> log;
        const auto teacher = prepare_teacher(base, ds, seed, &log);
        write_teacher_artifacts(teacher, log, dir, base.teacher_path.empty());
        res.teacher_gate = res.teacher_gate && passes_quality_gate(base, teacher.val);

        struct Stage1 {
            Model student;
            hint::Stage1Report report;
            double seconds;
        };
        std::map<std::string, Stage1> stage1;
        for (std::size_t i = 0; i < configs.size(); ++i) {
            const auto& c = configs[i];
            const Stage1* shared = nullptr;
            if (c.stage1 != hint::Mode::None) {
                const auto key = stage1_key(c);
                auto it = stage1.find(key);
                if (it == stage1.end()) {
                    Model s = initial_student(c, ds, seed);
                    Stopwatch w;
                    auto rep = hint::train_stage1(s, teacher.cache, ds, stage1_options(c, seed));
                    it = stage1.emplace(key, Stage1{std::move(s), std::move(rep), w.seconds()}).first;
                }
                shared = &it->second;
            }
            auto run = shared ? distill_seed(c, ds, teacher, seed, &shared->student, &shared->report)
                              : distill_seed(c, ds, teacher, seed);
            if (shared) run.result.timing.stage1_s = shared->seconds;
            run.result.label = labels[i];
            res.runs.push_back(std::move(run.result));
        }
    }

    for (std::size_t i = 0; i < configs.size(); ++i) {
        AblationSummary s{labels[i], configs[i].stage1, configs[i].loss.variant};
        std::vector<double> rec, t, r, a;
        for (const auto& run : res.runs) {
            if (run.label != labels[i]) continue;
            rec.push_back(run.recon_error);
            t.push_back(run.test.rpe_t);
            r.push_back(run.test.rpe_r);
            a.push_back(run.test.ate);
        }
        s.recon_error = median(rec);
        s.rpe_t = median(t);
        s.rpe_r = median(r);
        s.ate = median(a);
        res.rows.push_back(std::move(s));
    }

    {
        auto os = open_out(out_dir / "ablation.csv");
        os << "format_version,row,stage1,loss,alpha,beta,seeds,recon_error,rpe_t,rpe_r,ate\n";
        for (std::size_t i = 0; i < res.rows.size(); ++i) {
            const auto& s = res.rows[i];
            os << kReportFormatVersion << ',' << s.label << ',' << hint::to_string(s.stage1) << ','
               << loss::to_string(s.loss) << ',' << fmt(configs[i].loss.alpha) << ',' << fmt(configs[i].loss.beta)
               << ',' << base.seeds.size() << ',' << fmt(s.recon_error) << ',' << fmt(s.rpe_t) << ','
               << fmt(s.rpe_r) << ',' << fmt(s.ate) << '\n';
        }
    }
    write_report(res.runs, out_dir / "ablation_runs.csv");
    write_timing(res.runs, out_dir / "timing.csv");
    {
        auto os = open_out(out_dir / "ablation_checks.json");
        os << ablation_checks(res).dump(2) << '\n';
    }
    DistillConfig recorded = base;
    recorded.ablation_rows.clear();
    for (const auto& c : configs) {
        recorded.ablation_rows.push_back({c.stage1, c.loss.variant, c.loss.alpha, c.loss.beta});
    }
    write_manifest(recorded, "ablate", out_dir,
                   {"ablation.csv", "ablation_runs.csv", "ablation_checks.json", "timing.csv"});
    return res;
}

// ---------------------------------------------------------------- capacity

std::vector<CapacityRow> report_capacity(const Model& teacher, const std::vector<std::pair<std::string, Model>>& students,
                                         const std::vector<std::optional<double>>& targets,
                                         const data::SequenceDataset* ds, bool align, const fs::path& scratch_dir,
                                         std::size_t timing_calls) {
    if (!targets.empty() && targets.size() != students.size()) {
        throw std::invalid_argument("report_capacity: one target per student expected");
    }
    fs::create_directories(scratch_dir);
    const double teacher_params = static_cast<double>(teacher.parameter_count());
    auto row = [&](const std::string& name, const Model& m, std::optional<double> target) {
        CapacityRow r;
        r.name = name;
        r.params = m.parameter_count();
        const fs::path ckpt = scratch_dir / (name + ".bin");
        m.save(ckpt);
        r.bytes = fs::file_size(ckpt);
        r.d_rate = distillation_rate(teacher.spec(), m.spec());
        r.weights_pct = 100.0 * static_cast<double>(r.params) / teacher_params;
        r.target_weights_pct = target;
        if (ds) {
            r.inference_us = time_inference(m, *ds, timing_calls);
            r.ate = evaluate(m, *ds, data::Split::Test, align).pooled.ate;
        } else {
            data::SequenceDataset probe;
            probe.feature_dim = m.spec().input_dim();
            probe.sequences.push_back({"probe", data::Split::Test, {0}, std::vector<double>(probe.feature_dim, 0.1),
                                       {geo::PoseDelta::identity()}});
            r.inference_us = time_inference(m, probe, timing_calls);
        }
        return r;
    };
    std::vector<CapacityRow> rows = {row("teacher", teacher, std::nullopt)};
    for (std::size_t i = 0; i < students.size(); ++i) {
        rows.push_back(row(students[i].first, students[i].second, targets.empty() ? std::nullopt : targets[i]));
    }
    return rows;
}

void write_capacity(const std::vector<CapacityRow>& rows, const fs::path& path) {
    auto os = open_out(path);
    os << "format_version,model,params,bytes,inference_us,d_rate,weights_pct,target_weights_pct,ate\n";
    for (const auto& r : rows) {
        os << kReportFormatVersion << ',' << r.name << ',' << r.params << ',' << r.bytes << ','
           << fmt(r.inference_us) << ',' << fmt(r.d_rate) << ',' << fmt(r.weights_pct) << ','
           << fmt(r.target_weights_pct) << ',' << fmt(r.ate) << '\n';
    }
}

std::vector<CapacityRow> run_capacity(const DistillConfig& cfg, bool train, const fs::path& out_dir) {
    cfg.validate();
    if (cfg.capacity_students.empty()) throw ConfigError("capacity_students is empty");
    fs::create_directories(out_dir);
    const std::uint64_t seed = cfg.seeds.front();
    std::vector<std::pair<std::string, Model>> students;
    std::vector<std::optional<double>> targets;
    std::vector<CapacityRow> rows;
    if (train) {
        const auto ds = load_or_generate(cfg);
        const auto teacher = prepare_teacher(cfg, ds, seed);
        for (const auto& cs : cfg.capacity_students) {
            DistillConfig c = cfg;
            c.student = cs.spec;
            c.validate();
            students.emplace_back(cs.name, distill_seed(c, ds, teacher, seed).student);
            targets.push_back(cs.target_weights_pct);
        }
        rows = report_capacity(teacher.teacher, students, targets, &ds, cfg.ate_align, out_dir / "checkpoints");
    } else {
        Model teacher = cfg.teacher_path.empty() ? [&] {
            auto rng = derive_rng(seed, "teacher-init");
            return Model::initialized(cfg.teacher_spec(), rng);
        }()
                                                 : Model::load(cfg.teacher_path);
        for (const auto& cs : cfg.capacity_students) {
            DistillConfig c = cfg;
            c.student = cs.spec;
            auto rng = derive_rng(seed, "student-init");
            students.emplace_back(cs.name, Model::initialized(c.student_spec(), rng));
            targets.push_back(cs.target_weights_pct);
        }
        rows = report_capacity(teacher, students, targets, nullptr, cfg.ate_align, out_dir / "checkpoints");
    }
    write_capacity(rows, out_dir / "capacity.csv");
    write_manifest(cfg, train ? "capacity --train" : "capacity", out_dir, {"capacity.csv", "checkpoints/"});
    return rows;
}

}  // namespace kdreg::pipeline
