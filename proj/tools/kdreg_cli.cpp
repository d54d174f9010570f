// Command-line front end. Links only the C interface.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kdreg/kdreg.h"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Failure {
    kdreg_status status;
};

void check(kdreg_status s) {
    if (s != KDREG_OK) throw Failure{s};
}

template <class T, void (*Free)(T*)>
struct Handle {
    T* p = nullptr;
    Handle() = default;
    Handle(const Handle&) = delete;
    Handle& operator=(const Handle&) = delete;
    Handle(Handle&& o) noexcept : p(o.p) { o.p = nullptr; }
    ~Handle() { Free(p); }
    T** out() { return &p; }
    T* get() const { return p; }
};

using Config = Handle<kdreg_config, kdreg_config_free>;
using Dataset = Handle<kdreg_dataset, kdreg_dataset_free>;
using Model = Handle<kdreg_model, kdreg_model_free>;
using Cache = Handle<kdreg_cache, kdreg_cache_free>;

std::string take(char* s) {
    std::string out(s);
    kdreg_string_free(s);
    return out;
}

json get(const Config& cfg, const std::string& key) {
    char* text = nullptr;
    check(kdreg_config_get(cfg.get(), key.c_str(), &text));
    return json::parse(take(text));
}

std::string flag_name(std::string key) {
    for (char& c : key) {
        if (c == '_') c = '-';
    }
    return "--" + key;
}

// Options shared by every subcommand.
struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::vector<std::string> sets;
    std::map<std::string, std::string> fields;  // mirrored config keys, JSON text
};

void add_common(CLI::App* app, Common& c, const std::vector<std::string>& keys) {
    app->add_option("--config", c.config_path, "JSON config file or run manifest");
    app->add_option("--seed", c.seed, "run a single seed");
    app->add_option("--out-dir", c.out_dir, "output directory");
    app->add_option("--set", c.sets, "key=value override (value is JSON)");
    for (const auto& key : keys) {
        if (key == "out_dir") continue;
        app->add_option_function<std::string>(
               flag_name(key), [&c, key](const std::string& v) { c.fields[key] = v; }, "config field " + key)
            ->group("Config fields");
    }
}

Config resolve(const Common& c) {
    Config cfg;
    if (c.config_path.empty()) {
        check(kdreg_config_default(cfg.out()));
    } else {
        check(kdreg_config_load(c.config_path.c_str(), cfg.out()));
    }
    for (const auto& [key, value] : c.fields) check(kdreg_config_set(cfg.get(), key.c_str(), value.c_str()));
    for (const auto& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            std::cerr << "error: --set expects key=value, got '" << s << "'\n";
            throw Failure{KDREG_CONFIG_ERROR};
        }
        check(kdreg_config_set(cfg.get(), s.substr(0, eq).c_str(), s.substr(eq + 1).c_str()));
    }
    if (c.seed) check(kdreg_config_set(cfg.get(), "seeds", ("[" + std::to_string(*c.seed) + "]").c_str()));
    if (!c.out_dir.empty()) check(kdreg_config_set(cfg.get(), "out_dir", json(c.out_dir).dump().c_str()));
    return cfg;
}

fs::path out_dir(const Config& cfg) {
    const fs::path dir = get(cfg, "out_dir").get<std::string>();
    fs::create_directories(dir);
    return dir;
}

std::uint64_t first_seed(const Config& cfg) { return get(cfg, "seeds").at(0).get<std::uint64_t>(); }

Dataset dataset(const Config& cfg) {
    Dataset ds;
    check(kdreg_dataset_from_config(cfg.get(), ds.out()));
    return ds;
}

Model teacher_checkpoint(const Config& cfg) {
    const std::string path = get(cfg, "teacher_path").get<std::string>();
    if (path.empty()) {
        std::cerr << "error: no teacher checkpoint (set --teacher-path)\n";
        throw Failure{KDREG_CONFIG_ERROR};
    }
    Model m;
    check(kdreg_model_load(path.c_str(), m.out()));
    return m;
}

void manifest(const Config& cfg, const char* command) {
    check(kdreg_config_write_manifest(cfg.get(), command, nullptr));
}

void print(const kdreg_metrics& m) {
    std::printf("rpe_t %.6g\nrpe_r %.6g\nate %.6g\nframes %zu\n", m.rpe_t, m.rpe_r, m.ate, m.frames);
}

kdreg_split parse_split(const std::string& s) {
    if (s == "train") return KDREG_SPLIT_TRAIN;
    if (s == "val") return KDREG_SPLIT_VAL;
    if (s == "test") return KDREG_SPLIT_TEST;
    std::cerr << "error: unknown split '" << s << "'\n";
    throw Failure{KDREG_CONFIG_ERROR};
}

int to_exit(kdreg_status s) {
    switch (s) {
        case KDREG_OK: return 0;
        case KDREG_CONFIG_ERROR: return 2;
        case KDREG_DATA_ERROR: return 3;
        case KDREG_DIVERGENCE: return 4;
        case KDREG_ERROR: return 1;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> keys;
    {
        Config defaults;
        char* text = nullptr;
        if (kdreg_config_default(defaults.out()) != KDREG_OK ||
            kdreg_config_to_json(defaults.get(), &text) != KDREG_OK) {
            std::cerr << "error: " << kdreg_last_error() << "\n";
            return 1;
        }
        const json all = json::parse(take(text));
        for (const auto& [k, v] : all.items()) keys.push_back(k);
    }

    CLI::App app{"Knowledge distillation for pose regression networks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kdreg_version()));

    Common common;
    std::string eval_model, eval_pred, eval_gt, eval_split = "test";
    std::size_t bins = 20;
    std::vector<std::string> row_configs;
    bool capacity_train = false;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
    auto* teach = app.add_subcommand("train-teacher", "train a teacher on ground truth");
    auto* cache = app.add_subcommand("build-cache", "run the teacher over the dataset and store errors and weights");
    cache->add_option("--bins", bins, "histogram bins")->check(CLI::PositiveNumber);
    auto* distill = app.add_subcommand("distill", "two-stage distillation for every seed");
    auto* evaluate = app.add_subcommand("evaluate", "RPE and ATE of a checkpoint or a pose file");
    evaluate->add_option("--model", eval_model, "checkpoint to evaluate on the dataset");
    evaluate->add_option("--pred", eval_pred, "KITTI pose file with predictions");
    evaluate->add_option("--gt", eval_gt, "KITTI pose file with ground truth");
    evaluate->add_option("--split", eval_split, "dataset split for --model")->check(CLI::IsMember({"train", "val", "test"}));
    auto* ablate = app.add_subcommand("ablate", "stage-1 mode by loss variant comparison");
    ablate->add_option("--row-config", row_configs, "one config per row instead of ablation_rows");
    auto* capacity = app.add_subcommand("capacity", "parameter, size and timing ladder");
    capacity->add_flag("--train", capacity_train, "train the teacher and each student and report ATE");
    for (auto* sub : {gen, teach, cache, distill, evaluate, ablate, capacity}) add_common(sub, common, keys);

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        Config cfg = resolve(common);
        const fs::path dir = out_dir(cfg);

        if (gen->parsed()) {
            Dataset ds = dataset(cfg);
            check(kdreg_dataset_save(ds.get(), (dir / "dataset.txt").string().c_str()));
            std::printf("train %zu val %zu test %zu samples\n", kdreg_dataset_num_samples(ds.get(), KDREG_SPLIT_TRAIN),
                        kdreg_dataset_num_samples(ds.get(), KDREG_SPLIT_VAL),
                        kdreg_dataset_num_samples(ds.get(), KDREG_SPLIT_TEST));
            manifest(cfg, "gen-data");
        } else if (teach->parsed()) {
            Dataset ds = dataset(cfg);
            Model teacher;
            check(kdreg_train_teacher(cfg.get(), ds.get(), first_seed(cfg), (dir / "teacher_log.csv").string().c_str(),
                                      teacher.out()));
            check(kdreg_model_save(teacher.get(), (dir / "teacher.bin").string().c_str()));
            kdreg_metrics m{};
            check(kdreg_evaluate_model(teacher.get(), ds.get(), KDREG_SPLIT_VAL, get(cfg, "ate_align").get<bool>(),
                                       nullptr, &m));
            std::printf("params %zu\n", kdreg_model_parameter_count(teacher.get()));
            print(m);
            manifest(cfg, "train-teacher");
        } else if (cache->parsed()) {
            Dataset ds = dataset(cfg);
            Model teacher = teacher_checkpoint(cfg);
            Cache c;
            check(kdreg_cache_build(teacher.get(), ds.get(), c.out()));
            check(kdreg_cache_save(c.get(), (dir / "teacher_cache.bin").string().c_str()));
            check(kdreg_cache_export_histogram(c.get(), (dir / "teacher_errors.csv").string().c_str(), bins));
            double eta_t = 0.0, eta_r = 0.0;
            check(kdreg_cache_eta(c.get(), &eta_t, &eta_r));
            std::printf("samples %zu\neta_t %.6g\neta_r %.6g\n", kdreg_cache_size(c.get()), eta_t, eta_r);
            manifest(cfg, "build-cache");
        } else if (distill->parsed()) {
            check(kdreg_run_distill(cfg.get(), nullptr));
            std::printf("report %s\n", (dir / "report.csv").string().c_str());
        } else if (evaluate->parsed()) {
            const bool align = get(cfg, "ate_align").get<bool>();
            kdreg_metrics m{};
            if (!eval_pred.empty()) {
                if (eval_gt.empty()) {
                    std::cerr << "error: --pred needs --gt\n";
                    return 2;
                }
                check(kdreg_evaluate_pose_files(eval_pred.c_str(), eval_gt.c_str(), align, &m));
                std::ofstream out(dir / "metrics.csv");
                out << "sequence,rpe_t,rpe_r,ate,frames\n";
                char line[256];
                std::snprintf(line, sizeof line, "%s,%.17g,%.17g,%.17g,%zu\n", fs::path(eval_pred).stem().c_str(),
                              m.rpe_t, m.rpe_r, m.ate, m.frames);
                out << line;
            } else if (!eval_model.empty()) {
                Dataset ds = dataset(cfg);
                Model model;
                check(kdreg_model_load(eval_model.c_str(), model.out()));
                check(kdreg_evaluate_model(model.get(), ds.get(), parse_split(eval_split), align, dir.string().c_str(),
                                           &m));
            } else {
                std::cerr << "error: evaluate needs --model or --pred/--gt\n";
                return 2;
            }
            print(m);
            manifest(cfg, "evaluate");
        } else if (ablate->parsed()) {
            if (row_configs.empty()) {
                check(kdreg_run_ablation(cfg.get(), nullptr));
            } else {
                std::vector<Config> rows;
                std::vector<const kdreg_config*> ptrs;
                for (const auto& path : row_configs) {
                    Config row;
                    check(kdreg_config_load(path.c_str(), row.out()));
                    check(kdreg_config_set(row.get(), "out_dir", json(dir.string()).dump().c_str()));
                    ptrs.push_back(row.get());
                    rows.push_back(std::move(row));
                }
                check(kdreg_run_ablation_configs(ptrs.data(), ptrs.size(), dir.string().c_str()));
            }
            std::ifstream in(dir / "ablation.csv");
            std::cout << in.rdbuf();
        } else if (capacity->parsed()) {
            check(kdreg_run_capacity(cfg.get(), capacity_train ? 1 : 0, nullptr));
            std::ifstream in(dir / "capacity.csv");
            std::cout << in.rdbuf();
        }
    } catch (const Failure& f) {
        if (*kdreg_last_error()) std::cerr << "error: " << kdreg_last_error() << "\n";
        return to_exit(f.status);
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
