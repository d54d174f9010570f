#include "kdreg/config.hpp"

#include <fstream>
#include <set>

#include "kdreg/error.hpp"

namespace kdreg {

namespace {

using nlohmann::json;

json spec_json(const MlpSpec& s) {
    json acts = json::array();
    for (auto a : s.activations) acts.push_back(to_string(a));
    return {{"widths", s.widths}, {"activations", acts}, {"hint_index", s.hint_index}};
}

MlpSpec spec_from(const json& j, const std::string& what) {
    if (j.is_object() && (j.contains("dropout") || j.contains("sigma_head") || j.contains("output_offset") ||
                          j.contains("output_scale"))) {
        throw ConfigError(what + ": dropout, sigma_head and output scaling are run-level settings, not part of the layout");
    }
    try {
        return MlpSpec::from_json(j);
    } catch (const ConfigError& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

std::vector<AblationRow> table1_rows() {
    using hint::Mode;
    using loss::Variant;
    return {{Mode::None, Variant::StudentOnly, {}, {}},
            {Mode::HT, Variant::StudentOnly, {}, {}},
            {Mode::HT, Variant::AIL, {}, {}},
            {Mode::AHT, Variant::StudentOnly, {}, {}},
            {Mode::AHT, Variant::AIL, {}, {}}};
}

// Uniform [in, a, a, 64, 6] students realizing the weight ladder against the default teacher.
std::vector<CapacityStudent> default_ladder() {
    std::vector<CapacityStudent> out;
    for (auto [name, pct, width] : std::initializer_list<std::tuple<const char*, double, std::size_t>>{
             {"S55", 55.0, 94}, {"S41", 41.0, 76}, {"S34", 34.0, 67}, {"S27", 27.0, 56}, {"S20", 20.0, 44},
             {"S7", 7.0, 17}}) {
        out.push_back({name, pct, MlpSpec::uniform({32, width, width, 64, 6}, 3)});
    }
    return out;
}

json row_json(const AblationRow& r) {
    json j = {{"stage1", hint::to_string(r.stage1)}, {"loss", loss::to_string(r.loss)}};
    if (r.alpha) j["alpha"] = *r.alpha;
    if (r.beta) j["beta"] = *r.beta;
    return j;
}

AblationRow row_from(const json& j) {
    static const std::set<std::string> known = {"stage1", "loss", "alpha", "beta"};
    if (!j.is_object()) throw ConfigError("ablation row must be an object");
    for (const auto& [k, _] : j.items()) {
        if (!known.contains(k)) {
            throw ConfigError("ablation row: unknown key '" + k +
                              "' (rows may only vary stage1, loss, alpha, beta; the dataset is shared)");
        }
    }
    AblationRow r;
    r.stage1 = hint::mode_from_string(j.at("stage1").get<std::string>());
    r.loss = loss::variant_from_string(j.at("loss").get<std::string>());
    if (j.contains("alpha")) r.alpha = j.at("alpha").get<double>();
    if (j.contains("beta")) r.beta = j.at("beta").get<double>();
    return r;
}

}  // namespace

std::string AblationRow::label() const {
    std::string s = hint::to_string(stage1) + "+" + loss::to_string(loss);
    if (alpha) s += "@a=" + std::to_string(*alpha);
    if (beta) s += "@b=" + std::to_string(*beta);
    return s;
}

DistillConfig::DistillConfig()
    : teacher(MlpSpec::uniform({32, 128, 128, 64, 64, 6}, 4)),
      student(MlpSpec::uniform({32, 17, 17, 64, 6}, 3)),
      ablation_rows(table1_rows()),
      capacity_students(default_ladder()) {}

void DistillConfig::validate() const {
    teacher_spec().validate();
    student_spec().validate();
    if (teacher.representation_dim() != student.representation_dim()) {
        throw ConfigError("teacher hint width " + std::to_string(teacher.representation_dim()) +
                          " differs from student guided width " + std::to_string(student.representation_dim()));
    }
    if (teacher.input_dim() != student.input_dim()) throw ConfigError("teacher and student input widths differ");
    if (dataset_path.empty() && teacher.input_dim() != generator.feature_dim) {
        throw ConfigError("model input width " + std::to_string(teacher.input_dim()) + " differs from feature_dim " +
                          std::to_string(generator.feature_dim));
    }
    try {
        loss.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(adam.lr >= 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
        !(adam.eps > 0.0)) {
        throw ConfigError("invalid Adam settings");
    }
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    for (const auto& r : ablation_rows) {
        loss::Params p = loss;
        p.alpha = r.alpha.value_or(p.alpha);
        p.beta = r.beta.value_or(p.beta);
        try {
            p.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("ablation row " + r.label() + ": " + e.what());
        }
    }
    for (const auto& c : capacity_students) {
        c.spec.validate();
        if (c.spec.representation_dim() != teacher.representation_dim() || c.spec.input_dim() != teacher.input_dim()) {
            throw ConfigError("capacity student " + c.name + " does not match the teacher's input/hint widths");
        }
    }
}

MlpSpec DistillConfig::resolved(const MlpSpec& spec, bool sigma_head) const {
    MlpSpec s = spec;
    s.dropout = dropout;
    s.sigma_head = sigma_head;
    return s;
}

MlpSpec DistillConfig::teacher_spec() const { return resolved(teacher, false); }

MlpSpec DistillConfig::student_spec() const { return resolved(student, loss::needs_sigma(loss.variant)); }

TrainOptions DistillConfig::train_options(std::size_t epochs) const { return {epochs, batch_size, adam}; }

json DistillConfig::to_json() const {
    json rows = json::array();
    for (const auto& r : ablation_rows) rows.push_back(row_json(r));
    json ladder = json::array();
    for (const auto& c : capacity_students) {
        json s = spec_json(c.spec);
        s["name"] = c.name;
        s["target_weights_pct"] = c.target_weights_pct;
        ladder.push_back(s);
    }
    const auto& g = generator;
    return {
        {"dataset_path", dataset_path},
        {"data_seed", g.seed},
        {"train_sequences", g.train_sequences},
        {"val_sequences", g.val_sequences},
        {"test_sequences", g.test_sequences},
        {"sequence_length", g.length},
        {"feature_dim", g.feature_dim},
        {"embed_linear_gain", g.embed_linear_gain},
        {"embed_frequency", g.embed_frequency},
        {"noise_base", g.noise.base},
        {"noise_motion_gain", g.noise.motion_gain},
        {"noise_burst_prob", g.noise.burst_prob},
        {"noise_burst_scale", g.noise.burst_scale},
        {"noise_burst_length", g.noise.burst_length},
        {"teacher", spec_json(teacher)},
        {"student", spec_json(student)},
        {"teacher_path", teacher_path},
        {"dropout", dropout},
        {"normalize_targets", normalize_targets},
        {"stage1", hint::to_string(stage1)},
        {"hint_phi", hint::to_string(hint_phi)},
        {"loss", loss::to_string(loss.variant)},
        {"alpha", loss.alpha},
        {"beta", loss.beta},
        {"gate", loss::to_string(loss.gate)},
        {"clamp_phi", clamp_phi},
        {"teacher_epochs", teacher_epochs},
        {"stage1_epochs", stage1_epochs},
        {"stage2_epochs", stage2_epochs},
        {"batch_size", batch_size},
        {"lr", adam.lr},
        {"adam_beta1", adam.beta1},
        {"adam_beta2", adam.beta2},
        {"adam_eps", adam.eps},
        {"seeds", seeds},
        {"ate_align", ate_align},
        {"quality_gate_rpe_t", quality_gate_rpe_t},
        {"quality_gate_rpe_r", quality_gate_rpe_r},
        {"out_dir", out_dir},
        {"ablation_rows", rows},
        {"capacity_students", ladder},
    };
}

DistillConfig DistillConfig::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    DistillConfig c;
    const json defaults = c.to_json();
    for (const auto& [k, _] : j.items()) {
        if (!defaults.contains(k)) throw ConfigError("unknown config key '" + k + "'");
    }
    try {
        auto get = [&](const char* key, auto& dst) {
            if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
        };
        get("dataset_path", c.dataset_path);
        auto& g = c.generator;
        get("data_seed", g.seed);
        get("train_sequences", g.train_sequences);
        get("val_sequences", g.val_sequences);
        get("test_sequences", g.test_sequences);
        get("sequence_length", g.length);
        get("feature_dim", g.feature_dim);
        get("embed_linear_gain", g.embed_linear_gain);
        get("embed_frequency", g.embed_frequency);
        get("noise_base", g.noise.base);
        get("noise_motion_gain", g.noise.motion_gain);
        get("noise_burst_prob", g.noise.burst_prob);
        get("noise_burst_scale", g.noise.burst_scale);
        get("noise_burst_length", g.noise.burst_length);
        if (j.contains("teacher")) c.teacher = spec_from(j.at("teacher"), "teacher");
        if (j.contains("student")) c.student = spec_from(j.at("student"), "student");
        get("teacher_path", c.teacher_path);
        get("dropout", c.dropout);
        get("normalize_targets", c.normalize_targets);
        if (j.contains("stage1")) c.stage1 = hint::mode_from_string(j.at("stage1").get<std::string>());
        if (j.contains("hint_phi")) c.hint_phi = hint::phi_source_from_string(j.at("hint_phi").get<std::string>());
        if (j.contains("loss")) c.loss.variant = loss::variant_from_string(j.at("loss").get<std::string>());
        get("alpha", c.loss.alpha);
        get("beta", c.loss.beta);
        if (j.contains("gate")) c.loss.gate = loss::gate_from_string(j.at("gate").get<std::string>());
        get("clamp_phi", c.clamp_phi);
        get("teacher_epochs", c.teacher_epochs);
        get("stage1_epochs", c.stage1_epochs);
        get("stage2_epochs", c.stage2_epochs);
        get("batch_size", c.batch_size);
        get("lr", c.adam.lr);
        get("adam_beta1", c.adam.beta1);
        get("adam_beta2", c.adam.beta2);
        get("adam_eps", c.adam.eps);
        get("seeds", c.seeds);
        get("ate_align", c.ate_align);
        get("quality_gate_rpe_t", c.quality_gate_rpe_t);
        get("quality_gate_rpe_r", c.quality_gate_rpe_r);
        get("out_dir", c.out_dir);
        if (j.contains("ablation_rows")) {
            c.ablation_rows.clear();
            for (const auto& r : j.at("ablation_rows")) c.ablation_rows.push_back(row_from(r));
        }
        if (j.contains("capacity_students")) {
            c.capacity_students.clear();
            for (const auto& s : j.at("capacity_students")) {
                if (!s.is_object()) throw ConfigError("capacity student must be an object");
                json layout = s;
                CapacityStudent cs;
                cs.name = layout.at("name").get<std::string>();
                cs.target_weights_pct = layout.at("target_weights_pct").get<double>();
                layout.erase("name");
                layout.erase("target_weights_pct");
                cs.spec = spec_from(layout, "capacity student " + cs.name);
                c.capacity_students.push_back(std::move(cs));
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

DistillConfig DistillConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(is, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (j.is_object() && j.contains("kdreg_manifest")) j = j.at("config");
    return from_json(j);
}

void DistillConfig::set(const std::string& key, const std::string& value) {
    json j = to_json();
    if (!j.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    json v;
    try {
        v = json::parse(value);
    } catch (const json::parse_error&) {
        v = value;
    }
    j[key] = v;
    *this = from_json(j);
}

bool DistillConfig::same_dataset(const DistillConfig& o) const {
    static const char* keys[] = {"dataset_path",       "data_seed",          "train_sequences",  "val_sequences",
                                 "test_sequences",     "sequence_length",    "feature_dim",      "embed_linear_gain", "embed_frequency",      "noise_base",
                                 "noise_motion_gain",  "noise_burst_prob",   "noise_burst_scale", "noise_burst_length"};
    const json a = to_json(), b = o.to_json();
    for (const char* k : keys) {
        if (a.at(k) != b.at(k)) return false;
    }
    return true;
}

}  // namespace kdreg
