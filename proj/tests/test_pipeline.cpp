#include <doctest.h>

#include <fstream>
#include <sstream>

#include "kdreg/error.hpp"
#include "kdreg/pipeline.hpp"
#include "support.hpp"

using namespace kdreg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    REQUIRE(it != header.end());
    return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

TEST_CASE("median") {
    CHECK(pipeline::median({3, 1, 2}) == 2.0);
    CHECK(pipeline::median({4, 1, 2, 3}) == 2.5);
    CHECK(std::isnan(pipeline::median({})));
}

TEST_CASE("evaluating the ground truth gives zero error") {
    const auto ds = data::generate_synthetic(support::tiny_generator(4));
    const auto truth = geo::integrate(ds.sequences[0].truth);
    const auto m = pipeline::evaluate_trajectories(truth, truth, false);
    CHECK(m.rpe_t == 0.0);
    CHECK(m.rpe_r == 0.0);
    CHECK(m.ate == 0.0);
    CHECK(m.frames == ds.sequences[0].length());
    CHECK_THROWS_AS(pipeline::evaluate_trajectories(truth, geo::Trajectory(truth.begin(), truth.end() - 1), false),
                    DataError);
}

TEST_CASE("pooled evaluation matches per-frame errors") {
    const auto ds = data::generate_synthetic(support::tiny_generator(4));
    std::mt19937_64 rng(2);
    const Model m = Model::initialized(MlpSpec::uniform({8, 10, 6}, 1), rng);
    const auto ev = pipeline::evaluate(m, ds, data::Split::Train, false);
    CHECK(ev.sequences.size() == 3);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& ref : ds.samples(data::Split::Train)) {
        const auto p = m.predict(ds.feature_batch(std::vector<data::SampleRef>{ref}));
        const auto& d = ds.truth(ref);
        for (int k = 0; k < 3; ++k) sum += std::pow(p.pose.at(0, k) - d.t[k], 2);
        ++n;
    }
    CHECK(ev.pooled.frames == n);
    CHECK(ev.pooled.rpe_t == doctest::Approx(std::sqrt(sum / static_cast<double>(n))).epsilon(1e-10));
    CHECK_THROWS_AS(pipeline::evaluate(m, data::SequenceDataset{}, data::Split::Test, false), DataError);
}

TEST_CASE("output scaling uses training statistics") {
    const auto ds = data::generate_synthetic(support::tiny_generator(4));
    const auto spec = pipeline::with_output_scaling(MlpSpec::uniform({8, 10, 6}, 1), ds);
    double mean = 0.0;
    const auto train = ds.samples(data::Split::Train);
    for (const auto& r : train) mean += ds.truth(r).t.x();
    mean /= static_cast<double>(train.size());
    CHECK(spec.output_offset[0] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(spec.output_scale[0] > 0.0);
}

TEST_CASE("teacher training") {
    auto cfg = support::tiny_config();
    const auto ds = pipeline::load_or_generate(cfg);
    cfg.teacher_epochs = 4;
    std::vector<pipeline::EpochLog> log;
    pipeline::train_teacher(cfg, ds, 1, &log);
    REQUIRE(log.size() == 4);
    CHECK(log.back().train_loss < log.front().train_loss);

    auto larger = cfg;
    larger.generator.train_sequences = 12;
    larger.adam.lr = 3e-4;
    log.clear();
    pipeline::train_teacher(larger, pipeline::load_or_generate(larger), 1, &log);
    CHECK(log.back().val_loss < log.front().val_loss);

    cfg.adam.lr = 0.0;
    log.clear();
    pipeline::train_teacher(cfg, ds, 1, &log);
    for (const auto& e : log) CHECK(e.val_loss == log.front().val_loss);

    cfg.adam.lr = 1e200;
    CHECK_THROWS_AS(pipeline::train_teacher(cfg, ds, 1), DivergenceError);
}

TEST_CASE("dataset errors") {
    auto cfg = support::tiny_config();
    cfg.dataset_path = (support::temp_dir("pipeline_missing") / "none.txt").string();
    CHECK_THROWS_AS(pipeline::load_or_generate(cfg), DataError);
    const auto dir = support::temp_dir("pipeline_width");
    auto g = support::tiny_generator();
    g.feature_dim = 10;
    data::generate_synthetic(g).save(dir / "wide.txt");
    cfg.dataset_path = (dir / "wide.txt").string();
    CHECK_THROWS_AS(pipeline::load_or_generate(cfg), DataError);
}

TEST_CASE("distill writes a deterministic report") {
    const auto cfg = support::tiny_config();
    const auto a = support::temp_dir("distill_a"), b = support::temp_dir("distill_b");
    const auto runs = pipeline::run_distill(cfg, a);
    pipeline::run_distill(cfg, b);
    REQUIRE(runs.size() == 2);
    CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));
    for (const char* f : {"report.csv", "timing.csv", "manifest.json", "seed_1/teacher.bin", "seed_1/student.bin",
                          "seed_1/teacher_log.csv", "seed_2/test/metrics.csv"}) {
        CAPTURE(f);
        CHECK(fs::exists(a / f));
    }
    CHECK(fs::exists(a / "seed_1/test" / ("pred_" + pipeline::load_or_generate(cfg).sequences.back().name + ".txt")));

    const auto rows = read_csv(a / "report.csv");
    REQUIRE(rows.size() == 1 + 2 + 1);
    const auto& header = rows[0];
    CHECK(rows[1][column(header, "seed")] == "1");
    CHECK(rows[3][column(header, "seed")] == "median");
    CHECK(rows[1][column(header, "row")] == "AHT+AIL");

    // Reloading the student reproduces the reported metrics.
    const auto ds = pipeline::load_or_generate(cfg);
    const Model student = Model::load(a / "seed_1/student.bin");
    const auto ev = pipeline::evaluate(student, ds, data::Split::Test, cfg.ate_align);
    CHECK(std::stod(rows[1][column(header, "ate")]) == ev.pooled.ate);
    CHECK(std::stod(rows[1][column(header, "rpe_t")]) == ev.pooled.rpe_t);
    CHECK(runs[0].test.ate == ev.pooled.ate);
    CHECK(std::stod(rows[1][column(header, "d_rate")]) == distillation_rate(cfg.teacher, cfg.student));

    const auto manifest = DistillConfig::load(a / "manifest.json");
    CHECK(manifest.to_json() == cfg.to_json());
}

TEST_CASE("distill with a saved teacher") {
    auto cfg = support::tiny_config();
    cfg.seeds = {1};
    const auto dir = support::temp_dir("distill_teacher");
    const auto ds = pipeline::load_or_generate(cfg);
    pipeline::train_teacher(cfg, ds, 1).save(dir / "teacher.bin");
    cfg.teacher_path = (dir / "teacher.bin").string();
    const auto runs = pipeline::run_distill(cfg, dir / "run");
    REQUIRE(runs.size() == 1);
    CHECK(runs[0].teacher_params == count_parameters(cfg.teacher));
}

TEST_CASE("stage 2 with zero learning rate keeps the student") {
    auto cfg = support::tiny_config();
    const auto ds = pipeline::load_or_generate(cfg);
    const auto teacher = pipeline::prepare_teacher(cfg, ds, 1);
    for (auto v : {loss::Variant::StudentOnly, loss::Variant::AIL, loss::Variant::PILLaplace}) {
        cfg.loss.variant = v;
        Model s = pipeline::initial_student(cfg, ds, 1);
        const auto before = s.checksum();
        pipeline::Stage2Options o;
        o.loss = cfg.loss;
        o.train = cfg.train_options(2);
        o.train.adam.lr = 0.0;
        const auto losses = pipeline::train_stage2(s, &teacher.cache, ds, o);
        CHECK(losses.size() == 2);
        CHECK(s.checksum() == before);
    }
    cfg.loss.variant = loss::Variant::AIL;
    Model s = pipeline::initial_student(cfg, ds, 1);
    pipeline::Stage2Options o;
    o.loss = cfg.loss;
    o.train = cfg.train_options(1);
    CHECK_THROWS(pipeline::train_stage2(s, nullptr, ds, o));
}

TEST_CASE("ablation grid") {
    auto cfg = support::tiny_config();
    cfg.seeds = {1};
    cfg.ablation_rows.push_back(cfg.ablation_rows.back());
    const auto dir = support::temp_dir("ablation");
    const auto res = pipeline::run_ablation(pipeline::expand_ablation(cfg), dir);
    REQUIRE(res.rows.size() == 6);
    CHECK(res.rows[4].label == "AHT+AIL");
    CHECK(res.rows[5].label == "AHT+AIL#2");
    // Identical settings on the same seed give identical students.
    CHECK(res.rows[4].ate == res.rows[5].ate);
    // Rows sharing a stage-1 setting share the stage-1 student.
    CHECK(res.rows[3].recon_error == res.rows[4].recon_error);
    CHECK(res.rows[0].recon_error > res.rows[1].recon_error);
    for (const char* f : {"ablation.csv", "ablation_runs.csv", "ablation_checks.json", "manifest.json"}) {
        CHECK(fs::exists(dir / f));
    }

    auto other = pipeline::expand_ablation(cfg);
    other[1].generator.noise.base *= 2;
    CHECK_THROWS_AS(pipeline::run_ablation(other, dir), ConfigError);
    other = pipeline::expand_ablation(cfg);
    other[1].seeds = {2};
    CHECK_THROWS_AS(pipeline::run_ablation(other, dir), ConfigError);
    cfg.ablation_rows.clear();
    CHECK_THROWS_AS(pipeline::expand_ablation(cfg), ConfigError);
}

TEST_CASE("capacity report") {
    DistillConfig cfg;
    const auto dir = support::temp_dir("capacity");
    const auto rows = pipeline::run_capacity(cfg, false, dir);
    REQUIRE(rows.size() == 7);
    CHECK(rows[0].name == "teacher");
    CHECK(rows[0].d_rate == 0.0);
    CHECK(rows[0].params == count_parameters(cfg.teacher));
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i].params == count_parameters(cfg.capacity_students[i - 1].spec));
        CHECK(rows[i].bytes < rows[0].bytes);
        CHECK(std::abs(rows[i].weights_pct - *rows[i].target_weights_pct) <= 2.0);
        CHECK(rows[i].inference_us > 0.0);
    }
    CHECK(read_csv(dir / "capacity.csv").size() == 8);

    auto tiny = support::tiny_config();
    tiny.seeds = {1};
    tiny.capacity_students = {{"half", 50.0, MlpSpec::uniform({8, 8, 16, 6}, 2)}};
    const auto trained = pipeline::run_capacity(tiny, true, support::temp_dir("capacity_train"));
    REQUIRE(trained.size() == 2);
    CHECK(trained[1].ate.has_value());
    CHECK(trained[0].ate.has_value());
}
