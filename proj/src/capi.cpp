#include "kdreg/kdreg.h"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "kdreg/config.hpp"
#include "kdreg/data.hpp"
#include "kdreg/error.hpp"
#include "kdreg/model.hpp"
#include "kdreg/pipeline.hpp"

struct kdreg_config {
    kdreg::DistillConfig value;
};

struct kdreg_dataset {
    kdreg::data::SequenceDataset value;
};

struct kdreg_model {
    kdreg::Model value;
};

struct kdreg_cache {
    kdreg::data::TeacherCache value;
};

namespace {

thread_local std::string last_error;

kdreg_status fail(kdreg_status code, const std::string& message) {
    last_error = message;
    return code;
}

template <class F>
kdreg_status guarded(F&& body) {
    try {
        last_error.clear();
        body();
        return KDREG_OK;
    } catch (const kdreg::ConfigError& e) {
        return fail(KDREG_CONFIG_ERROR, e.what());
    } catch (const nlohmann::json::exception& e) {
        return fail(KDREG_CONFIG_ERROR, e.what());
    } catch (const kdreg::DataError& e) {
        return fail(KDREG_DATA_ERROR, e.what());
    } catch (const kdreg::ShapeError& e) {
        return fail(KDREG_DATA_ERROR, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(KDREG_DATA_ERROR, e.what());
    } catch (const kdreg::DivergenceError& e) {
        return fail(KDREG_DIVERGENCE, e.what());
    } catch (const std::exception& e) {
        return fail(KDREG_ERROR, e.what());
    } catch (...) {
        return fail(KDREG_ERROR, "unknown error");
    }
}

void require(const void* p, const char* what) {
    if (!p) throw std::invalid_argument(std::string(what) + " is null");
}

char* copy_string(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

kdreg::data::Split to_split(kdreg_split s) {
    switch (s) {
        case KDREG_SPLIT_TRAIN: return kdreg::data::Split::Train;
        case KDREG_SPLIT_VAL: return kdreg::data::Split::Val;
        case KDREG_SPLIT_TEST: return kdreg::data::Split::Test;
    }
    throw std::invalid_argument("unknown split");
}

void store(const kdreg::pipeline::Metrics& m, kdreg_metrics* out) {
    out->rpe_t = m.rpe_t;
    out->rpe_r = m.rpe_r;
    out->ate = m.ate;
    out->frames = m.frames;
}

std::filesystem::path out_dir_of(const kdreg_config* cfg, const char* out_dir) {
    return out_dir ? std::filesystem::path(out_dir) : std::filesystem::path(cfg->value.out_dir);
}

}  // namespace

extern "C" {

const char* kdreg_version(void) { return "1.0.0"; }

const char* kdreg_last_error(void) { return last_error.c_str(); }

void kdreg_string_free(char* s) { delete[] s; }

kdreg_status kdreg_config_default(kdreg_config** out) {
    return guarded([&] {
        require(out, "out");
        *out = new kdreg_config{kdreg::DistillConfig{}};
    });
}

kdreg_status kdreg_config_load(const char* path, kdreg_config** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new kdreg_config{kdreg::DistillConfig::load(path)};
    });
}

kdreg_status kdreg_config_from_json(const char* json, kdreg_config** out) {
    return guarded([&] {
        require(json, "json");
        require(out, "out");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(json);
        } catch (const nlohmann::json::parse_error& e) {
            throw kdreg::ConfigError(e.what());
        }
        *out = new kdreg_config{kdreg::DistillConfig::from_json(j)};
    });
}

kdreg_status kdreg_config_set(kdreg_config* cfg, const char* key, const char* value) {
    return guarded([&] {
        require(cfg, "config");
        require(key, "key");
        require(value, "value");
        cfg->value.set(key, value);
    });
}

kdreg_status kdreg_config_get(const kdreg_config* cfg, const char* key, char** out_json) {
    return guarded([&] {
        require(cfg, "config");
        require(key, "key");
        require(out_json, "out");
        const auto j = cfg->value.to_json();
        if (!j.contains(key)) throw kdreg::ConfigError(std::string("unknown config key '") + key + "'");
        *out_json = copy_string(j.at(key).dump());
    });
}

kdreg_status kdreg_config_to_json(const kdreg_config* cfg, char** out) {
    return guarded([&] {
        require(cfg, "config");
        require(out, "out");
        *out = copy_string(cfg->value.to_json().dump(2));
    });
}

kdreg_status kdreg_config_write_manifest(const kdreg_config* cfg, const char* command, const char* out_dir) {
    return guarded([&] {
        require(cfg, "config");
        require(command, "command");
        const auto dir = out_dir_of(cfg, out_dir);
        std::filesystem::create_directories(dir);
        std::vector<std::string> outputs;
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            if (e.path().filename() != "manifest.json") outputs.push_back(e.path().filename().string());
        }
        std::sort(outputs.begin(), outputs.end());
        kdreg::pipeline::write_manifest(cfg->value, command, dir, outputs);
    });
}

void kdreg_config_free(kdreg_config* cfg) { delete cfg; }

kdreg_status kdreg_dataset_from_config(const kdreg_config* cfg, kdreg_dataset** out) {
    return guarded([&] {
        require(cfg, "config");
        require(out, "out");
        *out = new kdreg_dataset{kdreg::pipeline::load_or_generate(cfg->value)};
    });
}

kdreg_status kdreg_dataset_load(const char* path, kdreg_dataset** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new kdreg_dataset{kdreg::data::SequenceDataset::load(path)};
    });
}

kdreg_status kdreg_dataset_save(const kdreg_dataset* ds, const char* path) {
    return guarded([&] {
        require(ds, "dataset");
        require(path, "path");
        ds->value.save(path);
    });
}

size_t kdreg_dataset_num_samples(const kdreg_dataset* ds, kdreg_split split) {
    if (!ds) return 0;
    try {
        return ds->value.count(to_split(split));
    } catch (...) {
        return 0;
    }
}

size_t kdreg_dataset_feature_dim(const kdreg_dataset* ds) { return ds ? ds->value.feature_dim : 0; }

void kdreg_dataset_free(kdreg_dataset* ds) { delete ds; }

kdreg_status kdreg_train_teacher(const kdreg_config* cfg, const kdreg_dataset* ds, uint64_t seed,
                                 const char* log_path, kdreg_model** out) {
    return guarded([&] {
        require(cfg, "config");
        require(ds, "dataset");
        require(out, "out");
        cfg->value.validate();
        std::vector<kdreg::pipeline::EpochLog> log;
        auto model = kdreg::pipeline::train_teacher(cfg->value, ds->value, seed, log_path ? &log : nullptr);
        if (log_path) kdreg::pipeline::write_epoch_log(log, log_path);
        *out = new kdreg_model{std::move(model)};
    });
}

kdreg_status kdreg_model_load(const char* path, kdreg_model** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new kdreg_model{kdreg::Model::load(path)};
    });
}

kdreg_status kdreg_model_save(const kdreg_model* model, const char* path) {
    return guarded([&] {
        require(model, "model");
        require(path, "path");
        model->value.save(path);
    });
}

size_t kdreg_model_parameter_count(const kdreg_model* model) { return model ? model->value.parameter_count() : 0; }

double kdreg_distillation_rate(const kdreg_model* teacher, const kdreg_model* student) {
    if (!teacher || !student) return 0.0;
    return kdreg::distillation_rate(teacher->value, student->value);
}

kdreg_status kdreg_model_predict(const kdreg_model* model, const double* features, size_t n, size_t dim,
                                 double* poses_out) {
    return guarded([&] {
        require(model, "model");
        require(features, "features");
        require(poses_out, "poses_out");
        if (n == 0) throw kdreg::DataError("predict: no samples");
        kdreg::ad::Tensor x = kdreg::ad::Tensor::matrix(n, dim, std::vector<double>(features, features + n * dim));
        const auto p = model->value.predict(x);
        std::memcpy(poses_out, p.pose.values().data(), n * kdreg::kPoseDim * sizeof(double));
    });
}

void kdreg_model_free(kdreg_model* model) { delete model; }

kdreg_status kdreg_cache_build(const kdreg_model* teacher, const kdreg_dataset* ds, kdreg_cache** out) {
    return guarded([&] {
        require(teacher, "teacher");
        require(ds, "dataset");
        require(out, "out");
        *out = new kdreg_cache{kdreg::data::build_teacher_cache(teacher->value, ds->value)};
    });
}

kdreg_status kdreg_cache_load(const char* path, kdreg_cache** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new kdreg_cache{kdreg::data::TeacherCache::load(path)};
    });
}

kdreg_status kdreg_cache_save(const kdreg_cache* cache, const char* path) {
    return guarded([&] {
        require(cache, "cache");
        require(path, "path");
        cache->value.save(path);
    });
}

size_t kdreg_cache_size(const kdreg_cache* cache) { return cache ? cache->value.size() : 0; }

kdreg_status kdreg_cache_eta(const kdreg_cache* cache, double* eta_t, double* eta_r) {
    return guarded([&] {
        require(cache, "cache");
        require(eta_t, "eta_t");
        require(eta_r, "eta_r");
        *eta_t = cache->value.eta_t;
        *eta_r = cache->value.eta_r;
    });
}

kdreg_status kdreg_cache_phi(const kdreg_cache* cache, uint64_t sample_id, double* phi_t, double* phi_r) {
    return guarded([&] {
        require(cache, "cache");
        require(phi_t, "phi_t");
        require(phi_r, "phi_r");
        const std::size_t row = cache->value.row(sample_id);
        *phi_t = cache->value.phi_t[row];
        *phi_r = cache->value.phi_r[row];
    });
}

kdreg_status kdreg_cache_export_histogram(const kdreg_cache* cache, const char* path, size_t bins) {
    return guarded([&] {
        require(cache, "cache");
        require(path, "path");
        kdreg::data::export_error_distribution(cache->value, path, bins);
    });
}

void kdreg_cache_free(kdreg_cache* cache) { delete cache; }

kdreg_status kdreg_evaluate_model(const kdreg_model* model, const kdreg_dataset* ds, kdreg_split split, int align,
                                  const char* out_dir, kdreg_metrics* out) {
    return guarded([&] {
        require(model, "model");
        require(ds, "dataset");
        require(out, "out");
        const auto ev = kdreg::pipeline::evaluate(model->value, ds->value, to_split(split), align != 0);
        if (out_dir) kdreg::pipeline::write_evaluation(ev, out_dir);
        store(ev.pooled, out);
    });
}

kdreg_status kdreg_evaluate_pose_files(const char* predicted_path, const char* truth_path, int align,
                                       kdreg_metrics* out) {
    return guarded([&] {
        require(predicted_path, "predicted_path");
        require(truth_path, "truth_path");
        require(out, "out");
        const auto m = kdreg::pipeline::evaluate_trajectories(kdreg::data::load_kitti_poses(predicted_path),
                                                              kdreg::data::load_kitti_poses(truth_path), align != 0);
        store(m, out);
    });
}

kdreg_status kdreg_run_distill(const kdreg_config* cfg, const char* out_dir) {
    return guarded([&] {
        require(cfg, "config");
        kdreg::pipeline::run_distill(cfg->value, out_dir_of(cfg, out_dir));
    });
}

kdreg_status kdreg_run_ablation(const kdreg_config* cfg, const char* out_dir) {
    return guarded([&] {
        require(cfg, "config");
        kdreg::pipeline::run_ablation(kdreg::pipeline::expand_ablation(cfg->value), out_dir_of(cfg, out_dir));
    });
}

kdreg_status kdreg_run_ablation_configs(const kdreg_config* const* configs, size_t count, const char* out_dir) {
    return guarded([&] {
        require(configs, "configs");
        if (count == 0) throw kdreg::ConfigError("ablation needs at least one config");
        std::vector<kdreg::DistillConfig> rows;
        for (size_t i = 0; i < count; ++i) {
            require(configs[i], "config");
            rows.push_back(configs[i]->value);
        }
        kdreg::pipeline::run_ablation(rows, out_dir_of(configs[0], out_dir));
    });
}

kdreg_status kdreg_run_capacity(const kdreg_config* cfg, int train, const char* out_dir) {
    return guarded([&] {
        require(cfg, "config");
        kdreg::pipeline::run_capacity(cfg->value, train != 0, out_dir_of(cfg, out_dir));
    });
}

}  // extern "C"
