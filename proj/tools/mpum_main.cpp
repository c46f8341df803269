// Operator-facing command surface. Every subcommand is a thin binding to one
// module operation, writes only under --out, and leaves a manifest (effective
// parameters, their hash, a seed when one is in play) beside its outputs so a
// run can be replayed bit for bit.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
// failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "mpum/gradcheck.hpp"
#include "mpum/kernelviz.hpp"
#include "mpum/metrics.hpp"
#include "mpum/network.hpp"
#include "mpum/nifti.hpp"
#include "mpum/stats.hpp"
#include "mpum/train.hpp"
#include "mpum/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mpum;

namespace {

// Operator mistakes (bad flags, malformed config) exit 1 before any work.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };
LogLevel g_log = LogLevel::Info;

LogLevel log_level_from_env() {
    const char* raw = std::getenv("MPUM_LOG");
    if (!raw) return LogLevel::Info;
    const std::string v = raw;
    if (v == "error") return LogLevel::Error;
    if (v == "info") return LogLevel::Info;
    if (v == "debug") return LogLevel::Debug;
    throw UsageError("MPUM_LOG must be error, info, or debug; got '" + v + "'");
}

void log_info(const std::string& msg) {
    if (g_log >= LogLevel::Info) std::cerr << "[mpum] " << msg << "\n";
}

void log_debug(const std::string& msg) {
    if (g_log >= LogLevel::Debug) std::cerr << "[mpum] " << msg << "\n";
}

// ---------------------------------------------------------------------------
// run manifest

uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

constexpr const char* kToolVersion = "0.1.0";

// Written beside every subcommand's outputs. Deliberately timestamp-free:
// identical invocations must produce identical manifests.
void write_manifest(const fs::path& out_dir, const std::string& subcommand, const json& params,
                    const std::vector<std::string>& outputs) {
    json j;
    j["tool"] = "mpum";
    j["version"] = kToolVersion;
    j["subcommand"] = subcommand;
    j["params"] = params;
    j["config_hash"] = hex64(fnv1a64(params.dump()));
    j["outputs"] = outputs;
    std::ofstream os(out_dir / "manifest.json");
    if (!os) throw DataError("cannot write manifest in '" + out_dir.string() + "'");
    os << j.dump(2) << "\n";
}

fs::path make_out_dir(const std::string& out) {
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + out + "': " + ec.message());
    return dir;
}

// ---------------------------------------------------------------------------
// config file handling: strict schema, unknown keys rejected up front

json parse_json_file(const fs::path& path, const char* what) {
    std::ifstream is(path);
    if (!is) throw DataError(std::string(what) + ": cannot open '" + path.string() + "'");
    try {
        json j;
        is >> j;
        return j;
    } catch (const json::exception& e) {
        throw FormatError(std::string(what) + " '" + path.string() + "': " + e.what());
    }
}

void reject_unknown_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw UsageError("config: " + where + " must be a JSON object");
    for (const auto& item : obj.items())
        if (!allowed.count(item.key())) throw UsageError("config: unknown key '" + item.key() + "' in " + where);
}

int64_t config_int(const json& obj, const std::string& key, int64_t fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number_integer()) throw UsageError("config: '" + key + "' must be an integer");
    return obj[key].get<int64_t>();
}

double config_num(const json& obj, const std::string& key, double fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number()) throw UsageError("config: '" + key + "' must be a number");
    return obj[key].get<double>();
}

std::string config_str(const json& obj, const std::string& key, const std::string& fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_string()) throw UsageError("config: '" + key + "' must be a string");
    return obj[key].get<std::string>();
}

NetworkConfig network_from_config(const json& n) {
    reject_unknown_keys(n, "network", {"num_categories", "stages", "d_T", "d_m", "fog_hidden", "patch_size",
                                       "modalities", "strategy"});
    NetworkConfig cfg;
    cfg.num_categories = config_int(n, "num_categories", cfg.num_categories);
    cfg.d_T = config_int(n, "d_T", cfg.d_T);
    cfg.d_m = config_int(n, "d_m", cfg.d_m);
    cfg.fog_hidden = config_int(n, "fog_hidden", cfg.fog_hidden);
    cfg.patch_size = config_int(n, "patch_size", cfg.patch_size);
    cfg.strategy = config_str(n, "strategy", cfg.strategy);
    if (n.contains("stages")) {
        if (!n["stages"].is_array()) throw UsageError("config: 'stages' must be an array of integers");
        cfg.stages.clear();
        for (const auto& v : n["stages"]) {
            if (!v.is_number_integer()) throw UsageError("config: 'stages' must be an array of integers");
            cfg.stages.push_back(v.get<int64_t>());
        }
    }
    if (n.contains("modalities")) {
        if (!n["modalities"].is_array()) throw UsageError("config: 'modalities' must be an array of strings");
        cfg.modalities.clear();
        for (const auto& v : n["modalities"]) {
            if (!v.is_string()) throw UsageError("config: 'modalities' must be an array of strings");
            cfg.modalities.push_back(v.get<std::string>());
        }
    }
    return cfg;
}

TrainConfig train_from_config(const json& t) {
    reject_unknown_keys(t, "train", {"steps", "batch_size", "lr", "eval_every", "augment_prob", "seed"});
    TrainConfig tc;
    tc.steps = config_int(t, "steps", tc.steps);
    tc.batch_size = config_int(t, "batch_size", tc.batch_size);
    tc.lr = config_num(t, "lr", tc.lr);
    tc.eval_every = config_int(t, "eval_every", tc.eval_every);
    tc.augment_prob = config_num(t, "augment_prob", tc.augment_prob);
    if (t.contains("seed")) {
        if (!t["seed"].is_number_integer()) throw UsageError("config: 'seed' must be an integer");
        tc.seed = t["seed"].get<uint64_t>();
    }
    return tc;
}

json network_to_json(const NetworkConfig& cfg) {
    json n;
    n["num_categories"] = cfg.num_categories;
    n["stages"] = cfg.stages;
    n["d_T"] = cfg.d_T;
    n["d_m"] = cfg.d_m;
    n["fog_hidden"] = cfg.fog_hidden;
    n["patch_size"] = cfg.patch_size;
    n["modalities"] = cfg.modalities;
    n["strategy"] = cfg.strategy;
    return n;
}

json train_to_json(const TrainConfig& tc) {
    json t;
    t["steps"] = tc.steps;
    t["batch_size"] = tc.batch_size;
    t["lr"] = tc.lr;
    t["eval_every"] = tc.eval_every;
    t["augment_prob"] = tc.augment_prob;
    t["seed"] = tc.seed;
    return t;
}

// ---------------------------------------------------------------------------
// dataset directories: cases.json + NIfTI pairs, as `synth` writes them

Dataset load_dataset_dir(const fs::path& dir) {
    const fs::path manifest = dir / "cases.json";
    if (!fs::exists(manifest)) throw DataError("dataset: missing '" + manifest.string() + "'");
    json j = parse_json_file(manifest, "dataset manifest");
    if (!j.is_object() || !j.contains("cases") || !j["cases"].is_array())
        throw FormatError("dataset manifest '" + manifest.string() + "': expected {\"cases\": [...]}");

    Dataset data;
    for (const auto& c : j["cases"]) {
        if (!c.is_object() || !c.contains("id") || !c.contains("modality") || !c.contains("image") ||
            !c.contains("labels"))
            throw FormatError("dataset manifest: each case needs id, modality, image, labels");
        TrainingCase tc;
        tc.id = c["id"].get<std::string>();
        const std::string modality = c["modality"].get<std::string>();
        tc.image = read_image((dir / c["image"].get<std::string>()).string());
        tc.labels = read_labels((dir / c["labels"].get<std::string>()).string());
        if (tc.image.modality != modality)
            throw DataError("dataset: case '" + tc.id + "' is tagged " + modality + " but the file says " +
                            tc.image.modality);
        // native-unit inputs get the standard preparation on the way in
        const bool resample = tc.image.spacing_mm != std::array<double, 3>{2.0, 2.0, 2.0};
        if (resample) {
            tc.image = resample_isotropic(tc.image);
            tc.labels = resample_isotropic(tc.labels);
        }
        if (!tc.image.normalized) {
            tc.image = normalize_modality(tc.image);
            log_debug("preprocessed case " + tc.id + " (" + modality + ")");
        }
        data.cases.push_back(std::move(tc));
    }
    if (data.cases.empty()) throw DataError("dataset: '" + dir.string() + "' lists no cases");
    return data;
}

Volume load_prepared_image(const fs::path& path) {
    Volume vol = read_image(path.string());
    if (vol.spacing_mm != std::array<double, 3>{2.0, 2.0, 2.0}) vol = resample_isotropic(vol);
    if (!vol.normalized) vol = normalize_modality(vol);
    return vol;
}

std::vector<std::string> sorted_modalities(const Dataset& data) {
    std::set<std::string> seen;
    for (const auto& c : data.cases) seen.insert(c.image.modality);
    return {seen.begin(), seen.end()};
}

TrainedStrategy load_single_model_strategy(const std::string& dir, const char* who) {
    TrainedStrategy state = load_strategy(dir);
    if (state.models.size() != 1)
        throw DataError(std::string(who) + ": checkpoint holds " + std::to_string(state.models.size()) +
                        " models; a single-model (mixed or projection) checkpoint is required");
    return state;
}

// ---------------------------------------------------------------------------
// subcommands

struct SynthOpts {
    std::string out;
    uint64_t seed = 0;
    int64_t count = 4;
    int64_t size = 64;
    int64_t categories = 3;
    std::vector<std::string> modalities{"CT", "MR"};
};

int cmd_synth(const SynthOpts& o) {
    const fs::path out = make_out_dir(o.out);
    json cases = json::array();
    std::vector<std::string> outputs;
    for (int64_t k = 0; k < o.count; ++k) {
        Phantom ph = synth_phantom(splitmix64(o.seed ^ splitmix64(static_cast<uint64_t>(k))), o.modalities, o.size,
                                   o.categories);
        const std::string stem = "phantom_" + std::to_string(k);
        const std::string label_file = stem + "_labels.nii";
        write_labels(ph.labels, (out / label_file).string());
        outputs.push_back(label_file);
        for (const auto& m : o.modalities) {
            const std::string image_file = stem + "_" + m + ".nii";
            write_volume(ph.images.at(m), (out / image_file).string());
            outputs.push_back(image_file);
            cases.push_back({{"id", stem}, {"modality", m}, {"image", image_file}, {"labels", label_file}});
        }
        log_debug("synthesized " + stem);
    }
    {
        std::ofstream os(out / "cases.json");
        os << json{{"cases", cases}}.dump(2) << "\n";
        if (!os) throw DataError("cannot write cases.json");
    }
    outputs.push_back("cases.json");

    json params{{"seed", o.seed},   {"count", o.count},           {"size", o.size},
                {"categories", o.categories}, {"modalities", o.modalities}};
    write_manifest(out, "synth", params, outputs);
    log_info("wrote " + std::to_string(o.count) + " phantom subjects to " + out.string());
    return 0;
}

struct PreprocessOpts {
    std::string in, out;
    double target_mm = 2.0;
};

int cmd_preprocess(const PreprocessOpts& o) {
    const fs::path out = make_out_dir(o.out);
    Volume vol = read_image(o.in);
    if (vol.normalized) throw DataError("preprocess: '" + o.in + "' is already normalized");
    vol = resample_isotropic(vol, o.target_mm);
    vol = normalize_modality(vol);
    const std::string name = fs::path(o.in).stem().string() + "_preproc.nii";
    write_volume(vol, (out / name).string());
    json params{{"in", o.in}, {"target_mm", o.target_mm}};
    write_manifest(out, "preprocess", params, {name});
    log_info("wrote " + name);
    return 0;
}

struct TrainOpts {
    std::string config, data, holdout, out, strategy;
    uint64_t seed = 0;
    int64_t steps = 0, patch_size = 0, threads = 1;
    bool has_seed = false, has_steps = false, has_patch = false, has_strategy = false;
};

int cmd_train(const TrainOpts& o) {
    json cfg_json = o.config.empty() ? json::object() : parse_json_file(o.config, "config");
    reject_unknown_keys(cfg_json, "config", {"network", "train", "data", "holdout"});
    NetworkConfig ncfg = network_from_config(cfg_json.value("network", json::object()));
    TrainConfig tc = train_from_config(cfg_json.value("train", json::object()));

    // flags override the config file
    if (o.has_seed) tc.seed = o.seed;
    if (o.has_steps) tc.steps = o.steps;
    if (o.has_patch) ncfg.patch_size = o.patch_size;
    if (o.has_strategy) ncfg.strategy = o.strategy;
    std::string data_dir = !o.data.empty() ? o.data : config_str(cfg_json, "data", "");
    std::string holdout_dir = !o.holdout.empty() ? o.holdout : config_str(cfg_json, "holdout", "");
    if (data_dir.empty()) throw UsageError("train: no training data (--data or config \"data\")");

    const fs::path out = make_out_dir(o.out);
    Dataset data = load_dataset_dir(data_dir);
    Dataset holdout;
    if (!holdout_dir.empty()) holdout = load_dataset_dir(holdout_dir);
    if (ncfg.modalities.empty()) {
        ncfg.modalities = sorted_modalities(data);
        log_info("modalities not configured; using " + std::to_string(ncfg.modalities.size()) +
                 " found in the data");
    }

    log_info("training " + ncfg.strategy + " strategy, " + std::to_string(tc.steps) + " steps on " +
             std::to_string(data.cases.size()) + " cases");
    TrainedStrategy state = train(ncfg, data, holdout, tc);
    if (g_log >= LogLevel::Debug)
        for (const auto& row : state.history) log_debug("step " + std::to_string(row.step) + " loss " +
                                                        std::to_string(row.loss));

    save_strategy((out / "checkpoint").string(), state);
    write_history_csv(state.history, (out / "history.csv").string());

    json params{{"network", network_to_json(ncfg)}, {"train", train_to_json(tc)},
                {"data", data_dir},                 {"holdout", holdout_dir},
                {"seed", tc.seed},                  {"threads", o.threads}};
    write_manifest(out, "train", params, {"checkpoint", "history.csv"});
    log_info("final loss " + std::to_string(state.history.empty() ? 0.0 : state.history.back().loss));
    return 0;
}

struct EvalOpts {
    std::string model, data, out;
    double tolerance_mm = 2.0;
    int64_t threads = 1;
};

int cmd_eval(const EvalOpts& o) {
    const fs::path out = make_out_dir(o.out);
    TrainedStrategy state = load_strategy(o.model);
    Dataset data = load_dataset_dir(o.data);
    EvalReport report = evaluate(state, data, o.tolerance_mm);
    write_eval_csv(report, (out / "eval.csv").string());

    double mean_dice = 0;
    for (const auto& row : report.aggregate) mean_dice += row.dice;
    if (!report.aggregate.empty()) mean_dice /= static_cast<double>(report.aggregate.size());
    log_info("eval: " + std::to_string(report.per_case.size()) + " case rows, mean aggregate Dice " +
             std::to_string(mean_dice));

    json params{{"model", o.model}, {"data", o.data}, {"tolerance_mm", o.tolerance_mm}, {"threads", o.threads}};
    write_manifest(out, "eval", params, {"eval.csv"});
    return 0;
}

struct FinetuneOpts {
    std::string model, data, holdout, out, latents;
    std::vector<std::string> add;
    int64_t steps = 300;
    double lr = 1e-3;
    uint64_t seed = 0;
};

int cmd_finetune(const FinetuneOpts& o) {
    const fs::path out = make_out_dir(o.out);
    TrainedStrategy base = load_single_model_strategy(o.model, "finetune");

    std::map<std::string, std::vector<float>> provided;
    if (!o.latents.empty()) {
        json j = parse_json_file(o.latents, "latents");
        if (!j.is_object()) throw FormatError("latents: expected {\"category\": [numbers...]}");
        for (const auto& item : j.items()) {
            if (!item.value().is_array()) throw FormatError("latents: entry '" + item.key() + "' is not an array");
            std::vector<float> row;
            for (const auto& v : item.value()) {
                if (!v.is_number()) throw FormatError("latents: entry '" + item.key() + "' holds a non-number");
                row.push_back(v.get<float>());
            }
            provided[item.key()] = std::move(row);
        }
    }

    Dataset data = load_dataset_dir(o.data);
    Dataset holdout;
    if (!o.holdout.empty()) holdout = load_dataset_dir(o.holdout);

    TrainConfig tc;
    tc.steps = o.steps;
    tc.lr = o.lr;
    tc.seed = o.seed;
    log_info("finetuning with " + std::to_string(o.add.size()) + " new categories, " + std::to_string(tc.steps) +
             " steps");
    TrainedStrategy state = finetune(std::move(base.models[0]), o.add, provided, data, holdout, tc);

    save_strategy((out / "checkpoint").string(), state);
    write_history_csv(state.history, (out / "history.csv").string());
    json params{{"model", o.model},   {"data", o.data}, {"holdout", o.holdout}, {"add", o.add},
                {"latents", o.latents}, {"steps", o.steps}, {"lr", o.lr},       {"seed", o.seed}};
    write_manifest(out, "finetune", params, {"checkpoint", "history.csv"});
    return 0;
}

struct PredictOpts {
    std::string model, in, out, modality;
    int64_t threads = 1;
};

int cmd_predict(const PredictOpts& o) {
    const fs::path out = make_out_dir(o.out);
    TrainedStrategy state = load_strategy(o.model);
    Volume vol = load_prepared_image(o.in);
    const std::string modality = o.modality.empty() ? vol.modality : o.modality;
    Model<float>& model = model_for_modality(state, modality);
    log_info("predicting " + o.in + " as " + modality);
    LabelVolume seg = predict_volume(model, vol, modality);
    const std::string name = fs::path(o.in).stem().string() + "_seg.nii";
    write_labels(seg, (out / name).string());
    json params{{"model", o.model}, {"in", o.in}, {"modality", modality}, {"threads", o.threads}};
    write_manifest(out, "predict", params, {name});
    log_info("wrote " + name);
    return 0;
}

struct SaliencyOpts {
    std::string model, in, out, category, modality;
    int64_t stage = 0;
};

int cmd_saliency(const SaliencyOpts& o) {
    const fs::path out = make_out_dir(o.out);
    TrainedStrategy state = load_strategy(o.model);
    Volume vol = load_prepared_image(o.in);
    const std::string modality = o.modality.empty() ? vol.modality : o.modality;
    Model<float>& model = model_for_modality(state, modality);

    const auto& names = model.latents.category_names;
    const auto it = std::find(names.begin(), names.end(), o.category);
    if (it == names.end()) {
        std::string known;
        for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
        throw DataError("saliency: unknown category '" + o.category + "' (model has: " + known + ")");
    }
    const int64_t category = it - names.begin();

    // deterministic probe: the grid patch whose corner sits closest to the
    // volume center
    const int64_t P = model.cfg.patch_size;
    auto patches = extract_grid_patches(vol, P, std::max<int64_t>(P / 2, 1));
    size_t best = 0;
    double best_d2 = std::numeric_limits<double>::max();
    for (size_t i = 0; i < patches.size(); ++i) {
        double d2 = 0;
        for (int a = 0; a < 3; ++a) {
            const double c = static_cast<double>(patches[i].corner[static_cast<size_t>(a)]) + P / 2.0 -
                             static_cast<double>(vol.shape[static_cast<size_t>(a)]) / 2.0;
            d2 += c * c;
        }
        if (d2 < best_d2) {
            best_d2 = d2;
            best = i;
        }
    }

    Volume map = extract_saliency(model, patches[best], modality, o.stage, category);
    const std::string name = fs::path(o.in).stem().string() + "_saliency_s" + std::to_string(o.stage) + "_" +
                             o.category + ".nii";
    write_volume(map, (out / name).string());
    json params{{"model", o.model},       {"in", o.in},       {"stage", o.stage},
                {"category", o.category}, {"modality", modality}};
    write_manifest(out, "saliency", params, {name});
    log_info("wrote " + name);
    return 0;
}

struct AnalyzeOpts {
    std::string control, patient, roi_classes, out;
    double alpha = 0.001;
    std::vector<std::string> exclude, classes;
};

int cmd_analyze(const AnalyzeOpts& o) {
    const fs::path out = make_out_dir(o.out);
    const auto roi_class = load_roi_class_json(o.roi_classes);
    RoiSeries control = load_cohort_csv(o.control, "control", roi_class, o.exclude);
    RoiSeries patient = load_cohort_csv(o.patient, "patient", roi_class, o.exclude);
    const std::set<std::string> filter(o.classes.begin(), o.classes.end());

    PairwiseReport report = pairwise_analysis(control, patient, o.alpha, filter);
    write_pairwise_csv(report, (out / "pairs.csv").string());
    write_pairwise_json(report, (out / "pairs.json").string());
    log_info("analyze: " + std::to_string(report.rows.size()) + " pairs, " +
             std::to_string(report.significant_count) + " significant at alpha " + std::to_string(o.alpha) + ", " +
             std::to_string(report.skipped.size()) + " skipped");

    json params{{"control", o.control}, {"patient", o.patient}, {"roi_classes", o.roi_classes},
                {"alpha", o.alpha},     {"exclude", o.exclude}, {"classes", o.classes}};
    write_manifest(out, "analyze", params, {"pairs.csv", "pairs.json"});
    return 0;
}

struct OrganTestOpts {
    std::string control, patient, roi_classes, roi, out;
};

int cmd_organ_test(const OrganTestOpts& o) {
    const fs::path out = make_out_dir(o.out);
    const auto roi_class = load_roi_class_json(o.roi_classes);
    RoiSeries control = load_cohort_csv(o.control, "control", roi_class, {});
    RoiSeries patient = load_cohort_csv(o.patient, "patient", roi_class, {});
    WelchResult r = single_organ_test(control, patient, o.roi);

    json result{{"roi", o.roi},
                {"n_control", control.subject_ids.size()},
                {"n_patient", patient.subject_ids.size()},
                {"statistic", r.statistic},
                {"df", r.df},
                {"p_value", r.p_value}};
    {
        std::ofstream os(out / "organ_test.json");
        os << result.dump(2) << "\n";
        if (!os) throw DataError("cannot write organ_test.json");
    }
    log_info(o.roi + ": t=" + std::to_string(r.statistic) + " df=" + std::to_string(r.df) + " p=" +
             std::to_string(r.p_value));
    json params{{"control", o.control}, {"patient", o.patient}, {"roi_classes", o.roi_classes}, {"roi", o.roi}};
    write_manifest(out, "organ-test", params, {"organ_test.json"});
    return 0;
}

struct VizOpts {
    std::string model, out;
    std::vector<int64_t> stages;
    double perplexity = 30.0;
    int64_t iterations = 1000;
    uint64_t seed = 0;
};

int cmd_viz_kernels(const VizOpts& o) {
    const fs::path out = make_out_dir(o.out);
    TrainedStrategy state = load_single_model_strategy(o.model, "viz-kernels");
    Model<float>& model = state.models[0];

    std::vector<int64_t> stages = o.stages;
    if (stages.empty())
        for (size_t s = 0; s < model.cfg.stages.size(); ++s) stages.push_back(static_cast<int64_t>(s));

    auto sets = flatten_kernels(model, model.cfg.modalities, stages);
    std::vector<std::string> outputs;
    json notes = json::array();
    for (const auto& set : sets) {
        const std::string base = "stage" + std::to_string(set.stage);
        auto pca = pca2d(set.points);
        write_embedding_csv((out / (base + "_pca.csv")).string(), set.tags, pca, "pca");
        outputs.push_back(base + "_pca.csv");

        if (set.points.size() >= 5) {
            TsneResult tsne = tsne2d(set.points, o.perplexity, o.iterations, o.seed);
            write_embedding_csv((out / (base + "_tsne.csv")).string(), set.tags, tsne.coords, "tsne");
            write_kl_trace_csv((out / (base + "_kl.csv")).string(), tsne.kl_trace);
            outputs.push_back(base + "_tsne.csv");
            outputs.push_back(base + "_kl.csv");
            log_info(base + ": t-SNE KL " + std::to_string(tsne.kl_trace.front()) + " -> " +
                     std::to_string(tsne.kl_trace.back()));
        } else {
            notes.push_back(base + ": t-SNE skipped, only " + std::to_string(set.points.size()) + " points");
            log_info(base + ": too few points for t-SNE, wrote PCA only");
        }
    }

    json params{{"model", o.model},           {"stages", stages}, {"perplexity", o.perplexity},
                {"iterations", o.iterations}, {"seed", o.seed},   {"notes", notes}};
    write_manifest(out, "viz-kernels", params, outputs);
    return 0;
}

struct VolumeReportOpts {
    std::string lesion, atlas, out, name = "lesion";
};

int cmd_volume_report(const VolumeReportOpts& o) {
    const fs::path out = make_out_dir(o.out);
    LabelVolume lesion = read_labels(o.lesion);
    LabelVolume atlas = read_labels(o.atlas);
    OverlapReport report = overlap_report(lesion, atlas, o.name);
    write_overlap_csv(report, (out / "overlap.csv").string());
    write_overlap_json(report, (out / "overlap.json").string());
    log_info("volume-report: " + std::to_string(report.rows.size()) + " regions touched");
    json params{{"lesion", o.lesion}, {"atlas", o.atlas}, {"name", o.name}};
    write_manifest(out, "volume-report", params, {"overlap.csv", "overlap.json"});
    return 0;
}

struct SelftestOpts {
    std::string out;  // optional; enables the file round-trip check
};

// Quick invariant battery over the numerical core. Exits 0 on a healthy
// build, 3 when any check drifts.
int cmd_selftest(const SelftestOpts& o) {
    int failures = 0;
    auto report = [&](const std::string& name, bool ok, const std::string& detail) {
        std::cout << (ok ? "ok   " : "FAIL ") << name << (detail.empty() ? "" : ": " + detail) << "\n";
        if (!ok) ++failures;
    };

    {
        Rng rng(3);
        Tensor<double> x = Tensor<double>::randn({2, 4}, rng, 1.0, true);
        Tensor<double> w = Tensor<double>::randn({4, 3}, rng, 0.5, true);
        auto f = [&](Graph<double>& g) {
            return sum_all(g, pointwise(g, matmul(g, x, w), Unary::LeakyRelu, 0.01));
        };
        auto r = grad_check<double>(f, {x, w});
        report("autodiff chain", r.max_rel_err <= 1e-4, "max rel err " + std::to_string(r.max_rel_err));
    }
    {
        Rng rng(4);
        Tensor<double> img = Tensor<double>::randn({1, 2, 4, 4, 4}, rng, 1.0, true);
        Tensor<double> k = Tensor<double>::randn({3, 2, 3, 3, 3}, rng, 0.3, true);
        auto f = [&](Graph<double>& g) { return sum_all(g, conv3d(g, img, k, 1, 1)); };
        auto r = grad_check<double>(f, {img, k});
        report("conv3d gradients", r.max_rel_err <= 1e-4, "max rel err " + std::to_string(r.max_rel_err));
    }
    {
        Rng rng(5);
        const int64_t d = 6;
        Mat p(d, d);
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < d; ++j) p.at(i, j) = (i == j ? 1.0 : 0.0) + 0.1 * rng.normal();
        std::vector<double> t(d);
        for (auto& v : t) v = rng.normal();
        std::vector<double> m(d, 0.0);
        for (int64_t j = 0; j < d; ++j)
            for (int64_t i = 0; i < d; ++i) m[static_cast<size_t>(j)] += t[static_cast<size_t>(i)] * p.at(i, j);
        auto back = reconstruct_latent(m, p, 0.0);
        double err = 0;
        for (int64_t i = 0; i < d; ++i) err = std::max(err, std::abs(back[static_cast<size_t>(i)] - t[static_cast<size_t>(i)]));
        report("projection round trip", err <= 1e-9, "max err " + std::to_string(err));
    }
    {
        const double e1 = std::abs(normal_cdf(1.959963984540054) - 0.975);
        const double e2 = std::abs(normal_cdf(0.0) - 0.5);
        const double e3 = std::abs(normal_cdf(-2.326347874040841) - 0.01);
        const bool ok = e1 <= 1e-7 && e2 <= 1e-7 && e3 <= 1e-7;
        report("normal cdf", ok, "max err " + std::to_string(std::max({e1, e2, e3})));
    }
    {
        FisherResult r = fisher_compare(0.9, 33, 0.3, 55);
        const bool ok = std::abs(r.z_score - 5.07134320567858) <= 1e-6 &&
                        std::abs(r.p_value - 3.95017646277e-7) <= 3.95017646277e-7 * 1e-4;
        report("fisher comparison", ok, "z " + std::to_string(r.z_score));
    }
    {
        MaskPair pair;
        pair.shape = {4, 4, 1};
        pair.pred.assign(16, 0);
        pair.ref.assign(16, 0);
        for (int i = 0; i < 8; ++i) pair.pred[static_cast<size_t>(i)] = 1;   // left half
        for (int i = 4; i < 12; ++i) pair.ref[static_cast<size_t>(i)] = 1;  // middle band
        const double d = dice(pair);
        report("dice closed form", std::abs(d - 0.5) <= 1e-15, "got " + std::to_string(d));
    }
    if (!o.out.empty()) {
        const fs::path out = make_out_dir(o.out);
        Rng rng(6);
        Volume vol;
        vol.shape = {5, 4, 3};
        vol.spacing_mm = {2.0, 2.0, 2.0};
        vol.modality = "MR";
        vol.data.resize(static_cast<size_t>(vol.numel()));
        for (auto& v : vol.data) v = static_cast<float>(rng.normal());
        write_volume(vol, (out / "selftest_probe.nii").string());
        Volume back = read_image((out / "selftest_probe.nii").string());
        const bool ok = back.shape == vol.shape && back.data == vol.data && back.modality == vol.modality;
        report("nifti round trip", ok, "");
        write_manifest(out, "selftest", json{{"checks", "full"}}, {"selftest_probe.nii"});
    }

    if (failures == 0) {
        log_info("selftest healthy");
        return 0;
    }
    std::cerr << failures << " selftest check(s) failed\n";
    return 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic-kernel multi-modality segmentation toolkit"};
    app.require_subcommand(1);

    SynthOpts synth_o;
    auto* synth = app.add_subcommand("synth", "generate a phantom NIfTI dataset");
    synth->add_option("--out", synth_o.out, "output directory")->required();
    synth->add_option("--seed", synth_o.seed, "rng seed");
    synth->add_option("--count", synth_o.count, "subjects")->check(CLI::PositiveNumber);
    synth->add_option("--size", synth_o.size, "cubic volume edge")->check(CLI::PositiveNumber);
    synth->add_option("--categories", synth_o.categories, "foreground categories")->check(CLI::PositiveNumber);
    synth->add_option("--modalities", synth_o.modalities, "modalities to render")->delimiter(',');

    PreprocessOpts pre_o;
    auto* pre = app.add_subcommand("preprocess", "resample to isotropic grid and normalize");
    pre->add_option("--in", pre_o.in, "input NIfTI image")->required()->check(CLI::ExistingFile);
    pre->add_option("--out", pre_o.out, "output directory")->required();
    pre->add_option("--target-mm", pre_o.target_mm, "isotropic spacing")->check(CLI::PositiveNumber);

    TrainOpts train_o;
    auto* tr = app.add_subcommand("train", "train a segmentation strategy");
    tr->add_option("--config", train_o.config, "JSON run config")->check(CLI::ExistingFile);
    tr->add_option("--data", train_o.data, "training dataset directory");
    tr->add_option("--holdout", train_o.holdout, "holdout dataset directory");
    tr->add_option("--out", train_o.out, "output directory")->required();
    tr->add_option("--seed", train_o.seed, "rng seed");
    tr->add_option("--steps", train_o.steps, "training steps")->check(CLI::PositiveNumber);
    tr->add_option("--patch-size", train_o.patch_size, "cubic patch edge")->check(CLI::PositiveNumber);
    tr->add_option("--strategy", train_o.strategy, "mixed | specific | projection")
        ->check(CLI::IsMember({"mixed", "specific", "projection"}));
    tr->add_option("--threads", train_o.threads, "worker cap")->check(CLI::PositiveNumber);

    EvalOpts eval_o;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--model", eval_o.model, "strategy checkpoint directory")->required();
    ev->add_option("--data", eval_o.data, "dataset directory")->required();
    ev->add_option("--out", eval_o.out, "output directory")->required();
    ev->add_option("--tolerance-mm", eval_o.tolerance_mm, "surface Dice tolerance")->check(CLI::PositiveNumber);
    ev->add_option("--threads", eval_o.threads, "worker cap")->check(CLI::PositiveNumber);

    FinetuneOpts ft_o;
    auto* ft = app.add_subcommand("finetune", "grow a model with new categories");
    ft->add_option("--model", ft_o.model, "strategy checkpoint directory")->required();
    ft->add_option("--data", ft_o.data, "dataset directory")->required();
    ft->add_option("--holdout", ft_o.holdout, "holdout dataset directory");
    ft->add_option("--out", ft_o.out, "output directory")->required();
    ft->add_option("--add-category", ft_o.add, "new category name (repeatable)")->required();
    ft->add_option("--latents", ft_o.latents, "JSON file of provided latent rows")->check(CLI::ExistingFile);
    ft->add_option("--steps", ft_o.steps, "training steps")->check(CLI::NonNegativeNumber);
    ft->add_option("--lr", ft_o.lr, "learning rate")->check(CLI::PositiveNumber);
    ft->add_option("--seed", ft_o.seed, "rng seed");

    PredictOpts pred_o;
    auto* pd = app.add_subcommand("predict", "segment a volume");
    pd->add_option("--model", pred_o.model, "strategy checkpoint directory")->required();
    pd->add_option("--in", pred_o.in, "input NIfTI image")->required()->check(CLI::ExistingFile);
    pd->add_option("--out", pred_o.out, "output directory")->required();
    pd->add_option("--modality", pred_o.modality, "override the image's modality tag");
    pd->add_option("--threads", pred_o.threads, "worker cap")->check(CLI::PositiveNumber);

    SaliencyOpts sal_o;
    auto* sal = app.add_subcommand("saliency", "extract a per-category saliency map");
    sal->add_option("--model", sal_o.model, "strategy checkpoint directory")->required();
    sal->add_option("--in", sal_o.in, "input NIfTI image")->required()->check(CLI::ExistingFile);
    sal->add_option("--out", sal_o.out, "output directory")->required();
    sal->add_option("--stage", sal_o.stage, "encoder stage index")->required()->check(CLI::NonNegativeNumber);
    sal->add_option("--category", sal_o.category, "category name")->required();
    sal->add_option("--modality", sal_o.modality, "override the image's modality tag");

    AnalyzeOpts an_o;
    auto* an = app.add_subcommand("analyze", "pairwise metabolic correlation comparison");
    an->add_option("--control", an_o.control, "control cohort CSV")->required()->check(CLI::ExistingFile);
    an->add_option("--patient", an_o.patient, "patient cohort CSV")->required()->check(CLI::ExistingFile);
    an->add_option("--roi-classes", an_o.roi_classes, "ROI class JSON")->required()->check(CLI::ExistingFile);
    an->add_option("--out", an_o.out, "output directory")->required();
    an->add_option("--alpha", an_o.alpha, "significance level")->check(CLI::PositiveNumber);
    an->add_option("--exclude", an_o.exclude, "ROI to exclude (repeatable)");
    an->add_option("--classes", an_o.classes, "pair-class filter")->delimiter(',')
        ->check(CLI::IsMember({"brain-brain", "brain-body", "body-body"}));

    OrganTestOpts og_o;
    auto* og = app.add_subcommand("organ-test", "Welch test on one ROI across cohorts");
    og->add_option("--control", og_o.control, "control cohort CSV")->required()->check(CLI::ExistingFile);
    og->add_option("--patient", og_o.patient, "patient cohort CSV")->required()->check(CLI::ExistingFile);
    og->add_option("--roi-classes", og_o.roi_classes, "ROI class JSON")->required()->check(CLI::ExistingFile);
    og->add_option("--roi", og_o.roi, "ROI name")->required();
    og->add_option("--out", og_o.out, "output directory")->required();

    VizOpts viz_o;
    auto* viz = app.add_subcommand("viz-kernels", "project controller kernels to 2D");
    viz->add_option("--model", viz_o.model, "strategy checkpoint directory")->required();
    viz->add_option("--out", viz_o.out, "output directory")->required();
    viz->add_option("--stages", viz_o.stages, "stage indices (default: all)")->delimiter(',');
    viz->add_option("--perplexity", viz_o.perplexity, "t-SNE perplexity")->check(CLI::PositiveNumber);
    viz->add_option("--iterations", viz_o.iterations, "t-SNE iterations")->check(CLI::PositiveNumber);
    viz->add_option("--seed", viz_o.seed, "t-SNE init seed");

    VolumeReportOpts vr_o;
    auto* vr = app.add_subcommand("volume-report", "lesion/atlas overlap volumes");
    vr->add_option("--lesion", vr_o.lesion, "lesion label NIfTI")->required()->check(CLI::ExistingFile);
    vr->add_option("--atlas", vr_o.atlas, "atlas label NIfTI")->required()->check(CLI::ExistingFile);
    vr->add_option("--out", vr_o.out, "output directory")->required();
    vr->add_option("--name", vr_o.name, "lesion name in the report");

    SelftestOpts st_o;
    auto* st = app.add_subcommand("selftest", "run the numerical invariant battery");
    st->add_option("--out", st_o.out, "enable the file round-trip check in this directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);  // prints help or the error message
        return rc == 0 ? 0 : 1;
    }

    try {
        g_log = log_level_from_env();
        if (synth->parsed()) return cmd_synth(synth_o);
        if (pre->parsed()) return cmd_preprocess(pre_o);
        if (tr->parsed()) {
            train_o.has_seed = tr->count("--seed") > 0;
            train_o.has_steps = tr->count("--steps") > 0;
            train_o.has_patch = tr->count("--patch-size") > 0;
            train_o.has_strategy = tr->count("--strategy") > 0;
            return cmd_train(train_o);
        }
        if (ev->parsed()) return cmd_eval(eval_o);
        if (ft->parsed()) return cmd_finetune(ft_o);
        if (pd->parsed()) return cmd_predict(pred_o);
        if (sal->parsed()) return cmd_saliency(sal_o);
        if (an->parsed()) return cmd_analyze(an_o);
        if (og->parsed()) return cmd_organ_test(og_o);
        if (viz->parsed()) return cmd_viz_kernels(viz_o);
        if (vr->parsed()) return cmd_volume_report(vr_o);
        if (st->parsed()) return cmd_selftest(st_o);
        std::cerr << "no subcommand\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
