#include "kdreg/data.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "kdreg/checkpoint.hpp"
#include "kdreg/error.hpp"
#include "kdreg/textio.hpp"

namespace kdreg::data {

namespace {

constexpr const char* kDatasetMagic = "KDREG-DATASET";
constexpr int kDatasetVersion = 1;
constexpr double kMaxYawRate = 0.12;

// Fixed standardization of pose deltas before embedding.
const std::array<double, 6> kPoseCenter = {1.0, 0.0, 0.0, 0.0, 0.0, 0.0};
const std::array<double, 6> kPoseScale = {0.4, 0.03, 0.01, 0.006, 0.006, 0.05};

std::array<double, 6> flatten(const geo::PoseDelta& d) { return {d.t.x(), d.t.y(), d.t.z(), d.r.x(), d.r.y(), d.r.z()}; }

// Random nonlinear observation model shared by every sequence of a dataset:
// x = Q [g z; sin(w A z + b)] with Q orthogonal.
struct Embedding {
    Eigen::MatrixXd mix;      // d x d orthogonal
    Eigen::MatrixXd lift;     // (d - 6) x 6
    Eigen::VectorXd offset;   // d - 6
    double linear_gain = 1.0;
    double frequency = 1.0;

    Embedding(std::size_t dim, double gain, double freq, std::mt19937_64& rng) : linear_gain(gain), frequency(freq) {
        std::normal_distribution<double> n01(0.0, 1.0);
        const auto d = static_cast<Eigen::Index>(dim);
        Eigen::MatrixXd g(d, d);
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n01(rng);
        mix = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
        lift.resize(d - 6, 6);
        for (Eigen::Index i = 0; i < lift.size(); ++i) lift.data()[i] = n01(rng) / std::sqrt(3.0);
        offset.resize(d - 6);
        std::uniform_real_distribution<double> phase(-3.14159265358979323846, 3.14159265358979323846);
        for (Eigen::Index i = 0; i < offset.size(); ++i) offset[i] = phase(rng);
    }

    Eigen::VectorXd operator()(const Eigen::Matrix<double, 6, 1>& z) const {
        Eigen::VectorXd latent(mix.rows());
        latent.head<6>() = linear_gain * z;
        latent.tail(lift.rows()) = (frequency * (lift * z) + offset).array().sin().matrix();
        return mix * latent;
    }
};

Sequence simulate(const std::string& name, Split split, const GeneratorSpec& spec, const Embedding& embed,
                  std::mt19937_64& rng, std::uint64_t& next_id) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Sequence seq;
    seq.name = name;
    seq.split = split;
    const double cruise = 0.6 + 0.8 * u01(rng);
    double dv = 0.0, yaw = 0.0, roll = 0.0, pitch = 0.0, lift = 0.0;
    bool burst = false;
    const auto& noise = spec.noise;
    const double burst_exit = noise.burst_length > 0.0 ? 1.0 / noise.burst_length : 1.0;
    const auto dim = static_cast<Eigen::Index>(spec.feature_dim);
    seq.features.reserve(spec.length * spec.feature_dim);
    for (std::size_t k = 0; k < spec.length; ++k) {
        dv = 0.95 * dv + 0.04 * n01(rng);
        yaw = std::clamp(0.97 * yaw + 0.008 * n01(rng), -kMaxYawRate, kMaxYawRate);
        roll = 0.9 * roll + 0.003 * n01(rng);
        pitch = 0.9 * pitch + 0.003 * n01(rng);
        lift = 0.8 * lift + 0.005 * n01(rng);
        const double speed = std::clamp(cruise + dv, 0.05, 2.5);

        geo::PoseDelta d;
        d.t = {speed, 0.3 * speed * yaw + 0.01 * n01(rng), lift};
        d.r = {roll, pitch, yaw};
        seq.truth.push_back(d);
        seq.ids.push_back(next_id++);

        Eigen::Matrix<double, 6, 1> z;
        const auto flat = flatten(d);
        for (int i = 0; i < 6; ++i) z[i] = (flat[i] - kPoseCenter[i]) / kPoseScale[i];
        Eigen::VectorXd x = embed(z);

        burst = burst ? u01(rng) >= burst_exit : u01(rng) < noise.burst_prob;
        const double sigma = noise.base * (1.0 + noise.motion_gain * std::abs(yaw) / kMaxYawRate) *
                             (burst ? noise.burst_scale : 1.0);
        for (Eigen::Index i = 0; i < dim; ++i) seq.features.push_back(x[i] + sigma * n01(rng));
    }
    return seq;
}

bool parse_double(std::string_view token, double& out) {
    const char* first = token.data();
    const char* last = token.data() + token.size();
    if (!token.empty() && token.front() == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

std::vector<std::string_view> tokenize(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        const std::size_t start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

}  // namespace

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw DataError("unknown split '" + name + "'");
}

// ---------------------------------------------------------------- SequenceDataset

void SequenceDataset::validate() const {
    if (feature_dim == 0) throw DataError("dataset: feature dimension must be positive");
    std::unordered_set<std::uint64_t> seen;
    for (const auto& s : sequences) {
        if (s.ids.size() != s.truth.size() || s.features.size() != s.truth.size() * feature_dim) {
            throw DataError("dataset: sequence '" + s.name + "' has inconsistent array sizes");
        }
        for (auto id : s.ids) {
            if (!seen.insert(id).second) throw DataError("dataset: duplicate sample id " + std::to_string(id));
        }
        for (const auto& d : s.truth) {
            if (!d.t.allFinite() || !d.r.allFinite()) {
                throw DataError("dataset: non-finite ground truth in sequence '" + s.name + "'");
            }
        }
    }
}

std::vector<SampleRef> SequenceDataset::samples(Split split) const {
    std::vector<SampleRef> out;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        if (sequences[s].split != split) continue;
        for (std::size_t f = 0; f < sequences[s].length(); ++f) out.push_back({s, f});
    }
    return out;
}

std::size_t SequenceDataset::count(Split split) const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.split == split ? s.length() : 0;
    return n;
}

std::span<const double> SequenceDataset::features(SampleRef s) const {
    return std::span<const double>(sequences[s.sequence].features).subspan(s.frame * feature_dim, feature_dim);
}

ad::Tensor SequenceDataset::feature_batch(std::span<const SampleRef> refs) const {
    if (refs.empty()) throw DataError("dataset: empty batch");
    std::vector<double> v;
    v.reserve(refs.size() * feature_dim);
    for (auto r : refs) {
        auto f = features(r);
        v.insert(v.end(), f.begin(), f.end());
    }
    return ad::Tensor::matrix(refs.size(), feature_dim, std::move(v));
}

ad::Tensor SequenceDataset::truth_batch(std::span<const SampleRef> refs) const {
    if (refs.empty()) throw DataError("dataset: empty batch");
    std::vector<double> v;
    v.reserve(refs.size() * 6);
    for (auto r : refs) {
        const auto flat = flatten(truth(r));
        v.insert(v.end(), flat.begin(), flat.end());
    }
    return ad::Tensor::matrix(refs.size(), 6, std::move(v));
}

bool SequenceDataset::operator==(const SequenceDataset& o) const {
    if (feature_dim != o.feature_dim || sequences.size() != o.sequences.size()) return false;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const auto& a = sequences[i];
        const auto& b = o.sequences[i];
        if (a.name != b.name || a.split != b.split || a.ids != b.ids || a.features != b.features ||
            a.truth != b.truth) {
            return false;
        }
    }
    return true;
}

void SequenceDataset::save(const std::filesystem::path& path) const {
    validate();
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << kDatasetMagic << ' ' << kDatasetVersion << '\n';
    os << "feature_dim " << feature_dim << '\n';
    os << "sequences " << sequences.size() << '\n';
    std::string line;
    for (const auto& s : sequences) {
        os << "sequence " << s.name << ' ' << to_string(s.split) << ' ' << s.length() << '\n';
        for (std::size_t f = 0; f < s.length(); ++f) {
            line.clear();
            line += std::to_string(s.ids[f]);
            for (double v : flatten(s.truth[f])) {
                line += ' ';
                line += format_double(v);
            }
            for (std::size_t j = 0; j < feature_dim; ++j) {
                line += ' ';
                line += format_double(s.features[f * feature_dim + j]);
            }
            os << line << '\n';
        }
    }
    if (!os) throw DataError("write failed: " + path.string());
}

SequenceDataset SequenceDataset::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    std::size_t line_no = 0;
    std::string line;
    auto fail = [&](const std::string& what) -> DataError {
        return DataError(path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    auto next = [&]() -> std::vector<std::string_view> {
        if (!std::getline(is, line)) throw fail("unexpected end of file");
        ++line_no;
        return tokenize(line);
    };
    auto count_field = [&](std::string_view tok) {
        std::size_t v = 0;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc() || p != tok.data() + tok.size()) throw fail("expected an integer, got '" + std::string(tok) + "'");
        return v;
    };

    auto header = next();
    if (header.size() != 2 || header[0] != kDatasetMagic) throw fail("missing " + std::string(kDatasetMagic) + " header");
    if (count_field(header[1]) != kDatasetVersion) throw fail("unsupported dataset version");
    auto dim = next();
    if (dim.size() != 2 || dim[0] != "feature_dim") throw fail("expected feature_dim");
    SequenceDataset ds;
    ds.feature_dim = count_field(dim[1]);
    auto seqs = next();
    if (seqs.size() != 2 || seqs[0] != "sequences") throw fail("expected sequences");
    const std::size_t num_sequences = count_field(seqs[1]);
    for (std::size_t s = 0; s < num_sequences; ++s) {
        auto head = next();
        if (head.size() != 4 || head[0] != "sequence") throw fail("expected sequence header");
        Sequence seq;
        seq.name = std::string(head[1]);
        try {
            seq.split = split_from_string(std::string(head[2]));
        } catch (const DataError& e) {
            throw fail(e.what());
        }
        const std::size_t length = count_field(head[3]);
        for (std::size_t f = 0; f < length; ++f) {
            auto tok = next();
            if (tok.size() != 7 + ds.feature_dim) throw fail("expected " + std::to_string(7 + ds.feature_dim) + " fields");
            seq.ids.push_back(count_field(tok[0]));
            std::array<double, 6> pose{};
            for (int i = 0; i < 6; ++i) {
                if (!parse_double(tok[1 + i], pose[i])) throw fail("non-numeric field '" + std::string(tok[1 + i]) + "'");
            }
            seq.truth.push_back({{pose[0], pose[1], pose[2]}, {pose[3], pose[4], pose[5]}});
            for (std::size_t j = 0; j < ds.feature_dim; ++j) {
                double v = 0.0;
                if (!parse_double(tok[7 + j], v)) throw fail("non-numeric field '" + std::string(tok[7 + j]) + "'");
                seq.features.push_back(v);
            }
        }
        ds.sequences.push_back(std::move(seq));
    }
    ds.validate();
    return ds;
}

SequenceDataset generate_synthetic(const GeneratorSpec& spec) {
    if (spec.feature_dim < 7) throw ConfigError("generator: feature_dim must be at least 7");
    if (spec.length < 2) throw ConfigError("generator: sequence length must be at least 2");
    if (spec.train_sequences == 0 || spec.test_sequences == 0) {
        throw ConfigError("generator: need at least one training and one test sequence");
    }
    const auto& n = spec.noise;
    if (!(spec.embed_linear_gain >= 0.0) || !(spec.embed_frequency >= 0.0) || !std::isfinite(spec.embed_linear_gain) ||
        !std::isfinite(spec.embed_frequency)) {
        throw ConfigError("generator: embedding gain and frequency must be finite and non-negative");
    }
    if (n.base < 0.0 || n.motion_gain < 0.0 || n.burst_scale < 0.0 || n.burst_prob < 0.0 || n.burst_prob > 1.0) {
        throw ConfigError("generator: invalid noise specification");
    }
    std::mt19937_64 rng(spec.seed);
    const Embedding embed(spec.feature_dim, spec.embed_linear_gain, spec.embed_frequency, rng);
    SequenceDataset ds;
    ds.feature_dim = spec.feature_dim;
    std::uint64_t next_id = 0;
    std::size_t index = 0;
    auto emit = [&](std::size_t count, Split split) {
        for (std::size_t i = 0; i < count; ++i, ++index) {
            std::string name = "seq" + std::string(index < 10 ? "0" : "") + std::to_string(index);
            ds.sequences.push_back(simulate(name, split, spec, embed, rng, next_id));
        }
    };
    emit(spec.train_sequences, Split::Train);
    emit(spec.val_sequences, Split::Val);
    emit(spec.test_sequences, Split::Test);
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------- KITTI poses

geo::Trajectory parse_kitti_poses(const std::string& text, const std::string& origin) {
    geo::Trajectory traj;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto tok = tokenize(line);
        if (tok.empty()) continue;
        if (tok.size() != 12) {
            throw DataError(origin + ":" + std::to_string(line_no) + ": expected 12 values, found " +
                            std::to_string(tok.size()));
        }
        double v[12];
        for (int i = 0; i < 12; ++i) {
            if (!parse_double(tok[i], v[i])) {
                throw DataError(origin + ":" + std::to_string(line_no) + ": non-numeric value '" +
                                std::string(tok[i]) + "'");
            }
        }
        geo::Pose p;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[r * 4 + c];
            p.translation[r] = v[r * 4 + 3];
        }
        if (!p.rotation.allFinite() || !p.translation.allFinite()) {
            throw DataError(origin + ":" + std::to_string(line_no) + ": non-finite value");
        }
        const double err = geo::orthonormality_error(p.rotation);
        if (err > 1e-3) {
            std::cerr << "warning: " << origin << ":" << line_no << ": rotation off orthonormal by " << err
                      << ", re-orthonormalizing\n";
            p.rotation = geo::orthonormalize(p.rotation);
        }
        traj.push_back(p);
    }
    return traj;
}

std::string format_kitti_poses(const geo::Trajectory& traj) {
    std::string out;
    for (const auto& p : traj) {
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 4; ++c) {
                if (r || c) out += ' ';
                out += format_double(c < 3 ? p.rotation(r, c) : p.translation[r]);
            }
        }
        out += '\n';
    }
    return out;
}

geo::Trajectory load_kitti_poses(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_kitti_poses(ss.str(), path.string());
}

void save_kitti_poses(const geo::Trajectory& traj, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << format_kitti_poses(traj);
    if (!os) throw DataError("write failed: " + path.string());
}

// ---------------------------------------------------------------- teacher cache

double normalized_teacher_loss(double error, double eta) { return eta > 0.0 ? 1.0 - error / eta : 1.0; }

double error_spread(std::span<const double> errors) {
    if (errors.empty()) throw DataError("teacher cache: no training errors");
    const auto [lo, hi] = std::minmax_element(errors.begin(), errors.end());
    return *hi - *lo;
}

std::size_t TeacherCache::row(std::uint64_t id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("teacher cache: no entry for sample id " + std::to_string(id));
    return it->second;
}

void TeacherCache::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < ids.size(); ++i) index_.emplace(ids[i], i);
}

TeacherCache build_teacher_cache(const Model& teacher, const SequenceDataset& dataset) {
    dataset.validate();
    TeacherCache c;
    const std::size_t total = dataset.count(Split::Train) + dataset.count(Split::Val) + dataset.count(Split::Test);
    const std::size_t width = teacher.spec().representation_dim();
    std::vector<double> pose, repr;
    pose.reserve(total * 6);
    repr.reserve(total * width);
    std::vector<double> train_t, train_r;
    for (std::size_t s = 0; s < dataset.sequences.size(); ++s) {
        const auto& seq = dataset.sequences[s];
        std::vector<SampleRef> refs;
        for (std::size_t f = 0; f < seq.length(); ++f) refs.push_back({s, f});
        const Prediction p = teacher.predict(dataset.feature_batch(refs));
        if (!p.pose.all_finite() || !p.representation.all_finite()) {
            throw DivergenceError("teacher cache: non-finite teacher output on sequence '" + seq.name + "'");
        }
        for (std::size_t f = 0; f < seq.length(); ++f) {
            const auto truth = flatten(seq.truth[f]);
            double et = 0.0, er = 0.0;
            for (int i = 0; i < 3; ++i) {
                const double dt = p.pose.at(f, i) - truth[i];
                const double dr = p.pose.at(f, 3 + i) - truth[3 + i];
                et += dt * dt;
                er += dr * dr;
            }
            c.ids.push_back(seq.ids[f]);
            c.error_t.push_back(et);
            c.error_r.push_back(er);
            c.is_train.push_back(seq.split == Split::Train ? 1 : 0);
            if (seq.split == Split::Train) {
                train_t.push_back(et);
                train_r.push_back(er);
            }
            for (int i = 0; i < 6; ++i) pose.push_back(p.pose.at(f, i));
            for (std::size_t j = 0; j < width; ++j) repr.push_back(p.representation.at(f, j));
        }
    }
    c.pose = ad::Tensor::matrix(c.ids.size(), 6, std::move(pose));
    c.representation = ad::Tensor::matrix(c.ids.size(), width, std::move(repr));
    c.eta_t = error_spread(train_t);
    c.eta_r = error_spread(train_r);
    for (std::size_t i = 0; i < c.ids.size(); ++i) {
        c.phi_t.push_back(normalized_teacher_loss(c.error_t[i], c.eta_t));
        c.phi_r.push_back(normalized_teacher_loss(c.error_r[i], c.eta_r));
    }
    c.rebuild_index();
    return c;
}

void TeacherCache::save(const std::filesystem::path& path) const {
    Container c;
    c.kind = "teacher-cache";
    c.meta = {{"eta_t", eta_t}, {"eta_r", eta_r}, {"samples", ids.size()}};
    const std::size_t n = ids.size();
    auto column = [n](const auto& v) {
        return ad::Tensor(ad::Shape{n}, std::vector<double>(v.begin(), v.end()));
    };
    std::vector<double> id_values;
    for (auto id : ids) {
        if (id > (1ull << 53)) throw DataError("teacher cache: sample id too large to store");
        id_values.push_back(static_cast<double>(id));
    }
    c.tensors.emplace_back("ids", column(id_values));
    c.tensors.emplace_back("pose", pose);
    c.tensors.emplace_back("representation", representation);
    c.tensors.emplace_back("error_t", column(error_t));
    c.tensors.emplace_back("error_r", column(error_r));
    c.tensors.emplace_back("phi_t", column(phi_t));
    c.tensors.emplace_back("phi_r", column(phi_r));
    c.tensors.emplace_back("is_train", column(is_train));
    write_container(c, path);
}

TeacherCache TeacherCache::load(const std::filesystem::path& path) {
    const Container c = read_container(path, "teacher-cache");
    TeacherCache t;
    t.eta_t = c.meta.at("eta_t").get<double>();
    t.eta_r = c.meta.at("eta_r").get<double>();
    auto values = [&](const std::string& name) {
        auto v = c.tensor(name).values();
        return std::vector<double>(v.begin(), v.end());
    };
    for (double id : values("ids")) t.ids.push_back(static_cast<std::uint64_t>(id));
    t.pose = c.tensor("pose");
    t.representation = c.tensor("representation");
    t.error_t = values("error_t");
    t.error_r = values("error_r");
    t.phi_t = values("phi_t");
    t.phi_r = values("phi_r");
    for (double v : values("is_train")) t.is_train.push_back(v != 0.0 ? 1 : 0);
    const std::size_t n = t.ids.size();
    if (t.pose.rows() != n || t.representation.rows() != n || t.error_t.size() != n || t.error_r.size() != n ||
        t.phi_t.size() != n || t.phi_r.size() != n || t.is_train.size() != n) {
        throw DataError(path.string() + ": teacher cache arrays disagree in length");
    }
    t.rebuild_index();
    return t;
}

Histogram histogram(std::span<const double> values, std::size_t bins) {
    if (values.empty()) throw DataError("histogram: no values");
    if (bins == 0) throw std::invalid_argument("histogram: need at least one bin");
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it;
    Histogram h;
    if (hi == lo) {
        h.edges = {lo, hi};
        h.counts = {values.size()};
        return h;
    }
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t k = 0; k <= bins; ++k) h.edges.push_back(k == bins ? hi : lo + width * static_cast<double>(k));
    h.counts.assign(bins, 0);
    for (double v : values) {
        const double pos = std::ceil((v - lo) / width);
        std::size_t k = pos <= 1.0 ? 0 : static_cast<std::size_t>(pos) - 1;
        ++h.counts[std::min(k, bins - 1)];
    }
    return h;
}

void export_error_distribution(const TeacherCache& cache, const std::filesystem::path& path, std::size_t bins) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "component,quantity,bin,left,right,count\n";
    auto table = [&](const char* component, const std::vector<double>& errors) {
        std::vector<double> squared, unsquared;
        for (std::size_t i = 0; i < errors.size(); ++i) {
            if (!cache.is_train[i]) continue;
            squared.push_back(errors[i]);
            unsquared.push_back(std::sqrt(errors[i]));
        }
        for (const auto& [quantity, vals] : {std::pair{"squared", &squared}, std::pair{"unsquared", &unsquared}}) {
            const Histogram h = histogram(*vals, bins);
            for (std::size_t k = 0; k < h.counts.size(); ++k) {
                os << component << ',' << quantity << ',' << k << ',' << format_double(h.edges[k]) << ','
                   << format_double(h.edges[k + 1]) << ',' << h.counts[k] << '\n';
            }
        }
    };
    table("translation", cache.error_t);
    table("rotation", cache.error_r);
    if (!os) throw DataError("write failed: " + path.string());
}

}  // namespace kdreg::data
