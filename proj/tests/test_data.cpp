#include <doctest.h>

#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "cache_oracle.hpp"
#include "kdreg/data.hpp"
#include "kdreg/error.hpp"
#include "kdreg/model.hpp"
#include "support.hpp"

using namespace kdreg;

TEST_CASE("generator defaults") {
    const data::GeneratorSpec g;
    CHECK(g.train_sequences == 12);
    CHECK(g.test_sequences == 2);
    CHECK(g.length == 500);
}

TEST_CASE("generator is deterministic per seed") {
    const auto a = data::generate_synthetic(support::tiny_generator(5));
    const auto b = data::generate_synthetic(support::tiny_generator(5));
    const auto c = data::generate_synthetic(support::tiny_generator(6));
    CHECK(a == b);
    CHECK_FALSE(a == c);
    CHECK(a.count(data::Split::Train) == 3 * 40);
    CHECK(a.count(data::Split::Val) == 40);
    CHECK(a.count(data::Split::Test) == 40);
}

TEST_CASE("noise-free features determine the motion linearly") {
    auto g = support::tiny_generator(9);
    g.noise.base = 0.0;
    g.length = 200;
    g.feature_dim = 16;
    const auto ds = data::generate_synthetic(g);
    const auto refs = ds.samples(data::Split::Train);
    Eigen::MatrixXd X(refs.size(), g.feature_dim + 1), Y(refs.size(), 6);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto x = ds.features(refs[i]);
        for (std::size_t k = 0; k < g.feature_dim; ++k) X(i, k) = x[k];
        X(i, g.feature_dim) = 1.0;
        const auto& d = ds.truth(refs[i]);
        Y.row(i) << d.t.x(), d.t.y(), d.t.z(), d.r.x(), d.r.y(), d.r.z();
    }
    const Eigen::MatrixXd beta = X.colPivHouseholderQr().solve(Y);
    const Eigen::MatrixXd resid = Y - X * beta;
    for (int c = 0; c < 6; ++c) {
        const double var = (Y.col(c).array() - Y.col(c).mean()).square().sum();
        const double r2 = 1.0 - resid.col(c).squaredNorm() / var;
        CAPTURE(c);
        CHECK(r2 > 0.99);
    }
}

TEST_CASE("generated motion looks like driving") {
    const auto ds = data::generate_synthetic(support::tiny_generator(4));
    double forward = 0.0, sideways = 0.0, yaw = 0.0, roll = 0.0;
    for (const auto& seq : ds.sequences)
        for (const auto& d : seq.truth) {
            forward += std::abs(d.t.x());
            sideways += std::abs(d.t.y());
            yaw += std::abs(d.r.z());
            roll += std::abs(d.r.x());
        }
    CHECK(forward > 3 * sideways);
    CHECK(yaw > roll);
}

TEST_CASE("dataset save and load") {
    const auto ds = data::generate_synthetic(support::tiny_generator(2));
    const auto dir = support::temp_dir("dataset");
    ds.save(dir / "ds.txt");
    CHECK(data::SequenceDataset::load(dir / "ds.txt") == ds);
    {
        std::ofstream bad(dir / "bad.txt");
        bad << "not a dataset\n";
    }
    CHECK_THROWS_AS(data::SequenceDataset::load(dir / "bad.txt"), DataError);
    CHECK_THROWS_AS(data::SequenceDataset::load(dir / "none.txt"), DataError);
    auto dup = ds;
    dup.sequences[1].ids[0] = dup.sequences[0].ids[0];
    CHECK_THROWS_AS(dup.validate(), DataError);
}

TEST_CASE("normalized teacher loss") {
    const std::vector<double> e{2, 6, 10};
    const double eta = data::error_spread(e);
    CHECK(eta == 8.0);
    CHECK(data::normalized_teacher_loss(2, eta) == 0.75);
    CHECK(data::normalized_teacher_loss(6, eta) == 0.25);
    CHECK(data::normalized_teacher_loss(10, eta) == -0.25);
    CHECK(data::normalized_teacher_loss(3.5, 0.0) == 1.0);
    CHECK_THROWS_AS(data::error_spread(std::vector<double>{}), DataError);
}

TEST_CASE("teacher cache matches the brute-force oracle") {
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        CAPTURE(seed);
        const auto o = cache_oracle::check(seed, false);
        CHECK(o.values_bitwise);
        CHECK(o.replay_bitwise);
        CHECK(o.forward_error < 1e-12);
        CHECK(o.eta_t > 0.0);
    }
    const auto perfect = cache_oracle::check(11, true);
    CHECK(perfect.values_bitwise);
    CHECK(perfect.eta_t == 0.0);
    CHECK(perfect.eta_r == 0.0);
}

TEST_CASE("perfect teacher gives unit weights and AIL equals the additive loss") {
    auto ds = data::generate_synthetic(support::tiny_generator(3));
    std::mt19937_64 rng(3);
    const Model teacher = Model::initialized(MlpSpec::uniform({8, 6, 6}, 1), rng);
    for (std::size_t s = 0; s < ds.sequences.size(); ++s) {
        std::vector<data::SampleRef> refs;
        for (std::size_t f = 0; f < ds.sequences[s].length(); ++f) refs.push_back({s, f});
        const auto p = teacher.predict(ds.feature_batch(refs));
        for (std::size_t f = 0; f < refs.size(); ++f)
            for (int k = 0; k < 3; ++k) {
                ds.sequences[s].truth[f].t[k] = p.pose.at(f, k);
                ds.sequences[s].truth[f].r[k] = p.pose.at(f, 3 + k);
            }
    }
    const auto cache = data::build_teacher_cache(teacher, ds);
    for (std::size_t i = 0; i < cache.size(); ++i) {
        CHECK(cache.error_t[i] == 0.0);
        CHECK(cache.phi_t[i] == 1.0);
        CHECK(cache.phi_r[i] == 1.0);
    }
    const auto refs = ds.samples(data::Split::Train);
    std::vector<data::SampleRef> batch(refs.begin(), refs.begin() + 10);
    ad::Graph g;
    std::mt19937_64 r2(1);
    ad::Var student = g.constant(support::rows_tensor(support::random_rows(10, r2)));
    loss::Batch b{student, g.constant(gather_rows(cache.pose, cache, ds, batch)), g.constant(ds.truth_batch(batch)), {}, {}};
    std::vector<double> phi;
    for (const auto& ref : batch) {
        const auto row = cache.row(ds.id(ref));
        phi.push_back(cache.phi_t[row]);
        phi.push_back(cache.phi_r[row]);
    }
    b.phi = g.constant(ad::Tensor::matrix(10, 2, phi));
    loss::Params ail{loss::Variant::AIL, 0.3, 0.6};
    loss::Params add{loss::Variant::AdditiveImitation, 0.3, 0.6};
    CHECK(loss::blended_loss(ail, b).item() == loss::blended_loss(add, b).item());
}

TEST_CASE("teacher cache save and load") {
    const auto ds = data::generate_synthetic(support::tiny_generator(2));
    std::mt19937_64 rng(4);
    const Model teacher = Model::initialized(MlpSpec::uniform({8, 10, 6}, 1), rng);
    const auto cache = data::build_teacher_cache(teacher, ds);
    const auto dir = support::temp_dir("cache");
    cache.save(dir / "cache.bin");
    const auto back = data::TeacherCache::load(dir / "cache.bin");
    CHECK(back.ids == cache.ids);
    CHECK(back.phi_t == cache.phi_t);
    CHECK(back.error_r == cache.error_r);
    CHECK(back.eta_t == cache.eta_t);
    CHECK(std::equal(back.pose.values().begin(), back.pose.values().end(), cache.pose.values().begin()));
    CHECK(back.row(cache.ids[7]) == 7);
    CHECK_THROWS_AS(back.row(987654321), DataError);
    CHECK_THROWS_AS(Model::load(dir / "cache.bin"), DataError);
}

TEST_CASE("histogram") {
    const std::vector<double> v{2, 6, 10};
    const auto h = data::histogram(v, 2);
    CHECK(h.counts == std::vector<std::size_t>{2, 1});
    CHECK(h.edges == std::vector<double>{2, 6, 10});
    const auto zero = data::histogram(std::vector<double>{0, 0, 0}, 5);
    CHECK(zero.counts == std::vector<std::size_t>{3});
    CHECK(zero.edges.front() == 0.0);

    std::mt19937_64 rng(1);
    std::exponential_distribution<double> ex(2.0);
    std::vector<double> many(1000);
    for (double& x : many) x = ex(rng);
    const auto hm = data::histogram(many, 17);
    CHECK(std::accumulate(hm.counts.begin(), hm.counts.end(), std::size_t{0}) == 1000);
    // Each value sits in (left, right], the first bin also holding its left edge.
    std::vector<std::size_t> expected(17, 0);
    for (double x : many) {
        std::size_t k = 0;
        while (k + 1 < 17 && x > hm.edges[k + 1]) ++k;
        ++expected[k];
    }
    CHECK(hm.counts == expected);
}

TEST_CASE("error distribution export") {
    const auto ds = data::generate_synthetic(support::tiny_generator(2));
    std::mt19937_64 rng(4);
    const Model teacher = Model::initialized(MlpSpec::uniform({8, 10, 6}, 1), rng);
    const auto cache = data::build_teacher_cache(teacher, ds);
    const auto dir = support::temp_dir("hist");
    data::export_error_distribution(cache, dir / "h.csv", 10);
    std::ifstream in(dir / "h.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "component,quantity,bin,left,right,count");
    std::map<std::string, std::size_t> totals;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string comp, qty, bin, left, right, count;
        std::getline(ss, comp, ',');
        std::getline(ss, qty, ',');
        std::getline(ss, bin, ',');
        std::getline(ss, left, ',');
        std::getline(ss, right, ',');
        std::getline(ss, count, ',');
        totals[comp + "/" + qty] += std::stoul(count);
    }
    CHECK(totals.size() == 4);
    for (const auto& [k, n] : totals) CHECK(n == ds.count(data::Split::Train));
}
