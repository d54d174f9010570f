#include <doctest.h>

#include <bit>
#include <filesystem>
#include <fstream>
#include <random>

#include "cache_oracle.hpp"
#include "kdreg/error.hpp"
#include "kdreg/model.hpp"
#include "kdreg/optimizer.hpp"
#include "support.hpp"

using namespace kdreg;

namespace {

std::size_t hand_count(const std::vector<std::size_t>& w) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l] * w[l + 1] + w[l + 1];
    return n;
}

ad::Tensor random_features(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(n * d);
    for (double& x : v) x = g(rng);
    return ad::Tensor::matrix(n, d, v);
}

}  // namespace

TEST_CASE("parameter counts and distillation rate") {
    const auto teacher = MlpSpec::uniform({8, 64, 64, 32, 6}, 2);
    const auto student = MlpSpec::uniform({8, 16, 8, 6}, 1);
    CHECK(count_parameters(teacher) == hand_count({8, 64, 64, 32, 6}));
    CHECK(count_parameters(teacher) == 8 * 64 + 64 + 64 * 64 + 64 + 64 * 32 + 32 + 32 * 6 + 6);
    const double expected = 100.0 * (1.0 - static_cast<double>(hand_count({8, 16, 8, 6})) /
                                               static_cast<double>(hand_count({8, 64, 64, 32, 6})));
    CHECK(distillation_rate(teacher, student) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(distillation_rate(teacher, teacher) == 0.0);
    CHECK(distillation_rate(std::size_t{33'640'000}, std::size_t{2'370'000}) == doctest::Approx(92.95).epsilon(1e-4));
    CHECK_THROWS_AS(distillation_rate(std::size_t{0}, std::size_t{1}), std::invalid_argument);

    auto with_sigma = student;
    with_sigma.sigma_head = true;
    CHECK(count_parameters(with_sigma) == hand_count({8, 16, 8, 6}) + 8 * 2 + 2);
}

TEST_CASE("spec validation") {
    CHECK_NOTHROW(MlpSpec::uniform({4, 5, 6}, 1).validate());
    CHECK_THROWS_AS(MlpSpec::uniform({4, 6}, 1).validate(), ConfigError);
    CHECK_THROWS_AS(MlpSpec::uniform({4, 5, 7}, 1).validate(), ConfigError);
    CHECK_THROWS_AS(MlpSpec::uniform({4, 5, 6}, 2).validate(), ConfigError);
    CHECK_THROWS_AS(MlpSpec::uniform({4, 5, 6}, 0).validate(), ConfigError);
    CHECK_THROWS_AS(MlpSpec::uniform({4, 0, 6}, 1).validate(), ConfigError);
    CHECK_THROWS_AS(MlpSpec::uniform({4, 5, 6}, 1, Activation::Relu, 1.0).validate(), ConfigError);
    auto s = MlpSpec::uniform({4, 5, 6}, 1);
    s.output_scale = {1, 1, 1, 1, 1, 1};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.output_offset = {0, 0, 0, 0, 0, 0};
    CHECK_NOTHROW(s.validate());
    s.output_scale[2] = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK(MlpSpec::from_json(MlpSpec::uniform({4, 5, 5, 6}, 2, Activation::Tanh).to_json()) ==
          MlpSpec::uniform({4, 5, 5, 6}, 2, Activation::Tanh));
    CHECK_THROWS_AS(activation_from_string("sigmoid"), ConfigError);
}

TEST_CASE("zero model predicts the output offset") {
    auto spec = MlpSpec::uniform({5, 7, 4, 6}, 2);
    const Model zero(spec);
    std::mt19937_64 rng(1);
    const auto p = zero.predict(random_features(3, 5, rng));
    CHECK(p.pose.shape() == ad::Shape{3, 6});
    CHECK(p.representation.shape() == ad::Shape{3, 4});
    for (double v : p.pose.values()) CHECK(v == 0.0);

    spec.output_offset = {1, 2, 3, 4, 5, 6};
    spec.output_scale = {2, 2, 2, 2, 2, 2};
    const auto q = Model(spec).predict(random_features(2, 5, rng));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t c = 0; c < 6; ++c) CHECK(q.pose.at(i, c) == static_cast<double>(c + 1));
    CHECK_THROWS_AS(Model(spec).predict(random_features(2, 4, rng)), ShapeError);
}

TEST_CASE("predict agrees with a loop forward pass and the graph") {
    std::mt19937_64 rng(2);
    for (auto act : {Activation::Relu, Activation::Tanh}) {
        auto spec = MlpSpec::uniform({6, 9, 7, 5, 6}, 2, act);
        spec.output_offset = {0.5, 0, 0, -0.1, 0, 0};
        spec.output_scale = {2, 1, 1, 0.1, 0.1, 0.3};
        Model m = Model::initialized(spec, rng);
        const auto x = random_features(4, 6, rng);
        const auto p = m.predict(x);
        ad::Graph g;
        const auto out = m.forward(g, g.constant(x), false, nullptr);
        for (std::size_t i = 0; i < 4; ++i) {
            const auto ref = cache_oracle::plain_forward(m, std::span<const double>(x.values()).subspan(i * 6, 6));
            for (std::size_t c = 0; c < 6; ++c) {
                CHECK(p.pose.at(i, c) == doctest::Approx(ref.pose[c]).epsilon(1e-13));
                CHECK(out.pose.value().at(i, c) == doctest::Approx(ref.pose[c]).epsilon(1e-13));
            }
            for (std::size_t k = 0; k < 7; ++k) CHECK(p.representation.at(i, k) == doctest::Approx(ref.representation[k]).epsilon(1e-13));
        }
    }
}

TEST_CASE("dropout acts on the last hidden layer during training only") {
    std::mt19937_64 rng(3);
    auto spec = MlpSpec::uniform({4, 8, 8, 6}, 1, Activation::Relu, 0.5);
    Model m = Model::initialized(spec, rng);
    const auto x = random_features(16, 4, rng);
    ad::Graph g;
    std::mt19937_64 drop(9);
    const auto train = m.forward(g, g.constant(x), true, &drop);
    const auto eval = m.predict(x);
    // The guided representation sits below the dropout layer.
    CHECK(std::equal(train.representation.value().values().begin(), train.representation.value().values().end(),
                     eval.representation.values().begin()));
    bool differs = false;
    for (std::size_t i = 0; i < eval.pose.size(); ++i) differs |= train.pose.value().values()[i] != eval.pose.values()[i];
    CHECK(differs);
    ad::Graph h;
    CHECK_THROWS_AS(m.forward(h, h.constant(x), true, nullptr), std::invalid_argument);
}

TEST_CASE("freezing and layer parameters") {
    std::mt19937_64 rng(4);
    auto spec = MlpSpec::uniform({4, 8, 8, 6}, 2);
    spec.sigma_head = true;
    Model m = Model::initialized(spec, rng);
    CHECK(m.parameters().size() == 8);
    CHECK(m.layer_parameters(0, 2).size() == 4);
    CHECK(m.layer_parameters(2, 3).size() == 4);
    CHECK(m.trainable_parameters().size() == 8);
    m.freeze_below(2);
    CHECK(m.trainable_parameters().size() == 4);
    CHECK_THROWS_AS(m.freeze_below(4), std::out_of_range);

    // Updating only the trainable parameters leaves the frozen prefix bit-identical.
    auto prefix_checksum = [&] {
        std::uint64_t h = 0;
        for (auto* p : m.layer_parameters(0, 2))
            for (double v : p->values()) h = h * 31 + std::bit_cast<std::uint64_t>(v);
        return h;
    };
    const auto before = prefix_checksum();
    const auto whole = m.checksum();
    const auto x = random_features(8, 4, rng);
    Adam adam(AdamOptions{});
    for (int step = 0; step < 3; ++step) {
        ad::Graph g;
        std::mt19937_64 drop(step);
        const auto out = m.forward(g, g.constant(x), true, &drop);
        m.zero_grad();
        g.backward(ad::sum(ad::square(out.pose)));
        adam.step(m.trainable_parameters());
    }
    CHECK(prefix_checksum() == before);
    CHECK(m.checksum() != whole);
}

TEST_CASE("checkpoint round trip") {
    std::mt19937_64 rng(5);
    auto spec = MlpSpec::uniform({5, 9, 7, 6}, 2, Activation::Tanh, 0.1);
    spec.sigma_head = true;
    spec.output_offset = {1, 0, 0, 0, 0, 0.5};
    spec.output_scale = {0.3, 1, 1, 1, 1, 0.25};
    Model m = Model::initialized(spec, rng);
    m.freeze_below(1);
    const auto dir = support::temp_dir("checkpoint");
    m.save(dir / "m.bin");
    const Model back = Model::load(dir / "m.bin");
    CHECK(back.spec() == m.spec());
    CHECK(back.checksum() == m.checksum());
    CHECK(back.frozen_below() == 1);
    const auto x = random_features(3, 5, rng);
    const auto a = m.predict(x), b = back.predict(x);
    CHECK(std::equal(a.pose.values().begin(), a.pose.values().end(), b.pose.values().begin()));

    CHECK_THROWS_AS(Model::load(dir / "missing.bin"), DataError);
    {
        std::ofstream bad(dir / "bad.bin", std::ios::binary);
        bad << "KDREGBOX";
    }
    CHECK_THROWS_AS(Model::load(dir / "bad.bin"), DataError);
    const auto size = std::filesystem::file_size(dir / "m.bin");
    std::filesystem::copy_file(dir / "m.bin", dir / "short.bin", std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(dir / "short.bin", size - 9);
    CHECK_THROWS_AS(Model::load(dir / "short.bin"), DataError);
}

TEST_CASE("initialization is seeded and scaled by fan-in") {
    std::mt19937_64 a(6), b(6);
    const auto spec = MlpSpec::uniform({400, 300, 20, 6}, 1);
    const Model x = Model::initialized(spec, a), y = Model::initialized(spec, b);
    CHECK(x.checksum() == y.checksum());
    double sq = 0.0;
    for (double v : x.weight(0).values()) sq += v * v;
    const double var = sq / static_cast<double>(x.weight(0).size());
    CHECK(var == doctest::Approx(2.0 / 400.0).epsilon(0.05));
    for (double v : x.bias(0).values()) CHECK(v == 0.0);
}
