#include "mpum/train.hpp"

#include "mpum/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace mpum {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

uint64_t model_stream_seed(uint64_t seed, size_t model_index) {
    return splitmix64(seed ^ splitmix64(0x6d6f64656cULL + model_index));
}

void AdamState::apply(Model<float>& model) {
    model.for_each_parameter([&](const std::string& name, Tensor<float>& p) {
        if (!p.requires_grad() || !p.has_grad()) return;
        std::vector<float>& w = p.values();
        const std::vector<float>& g = p.grad();
        AdamParamState& slot = slots[name];
        if (slot.m.empty()) {
            slot.m.assign(w.size(), 0.0f);
            slot.v.assign(w.size(), 0.0f);
        }
        if (slot.m.size() != w.size())
            throw ShapeError("AdamState: slot '" + name + "' no longer matches the parameter shape");
        slot.t++;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(slot.t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(slot.t));
        for (size_t i = 0; i < w.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = beta1 * static_cast<double>(slot.m[i]) + (1.0 - beta1) * gi;
            const double vi = beta2 * static_cast<double>(slot.v[i]) + (1.0 - beta2) * gi * gi;
            slot.m[i] = static_cast<float>(mi);
            slot.v[i] = static_cast<float>(vi);
            w[i] -= static_cast<float>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
        }
    });
}

namespace {

void validate_dataset(const Dataset& data, int64_t num_categories, const char* where) {
    for (const auto& c : data.cases) {
        c.image.validate();
        c.labels.validate();
        if (!c.image.normalized) throw DataError(std::string(where) + ": case '" + c.id + "' is not normalized");
        if (c.image.shape != c.labels.shape)
            throw DataError(std::string(where) + ": case '" + c.id + "' image and labels disagree in shape");
        for (int32_t l : c.labels.labels)
            if (l < 0 || l > num_categories)
                throw DataError(std::string(where) + ": case '" + c.id + "' has label " + std::to_string(l) +
                                " outside [0," + std::to_string(num_categories) + "]");
    }
}

std::vector<size_t> case_pool(const Dataset& data, const NetworkConfig& cfg) {
    std::vector<size_t> pool;
    for (size_t i = 0; i < data.cases.size(); ++i) {
        const std::string& m = data.cases[i].image.modality;
        if (std::find(cfg.modalities.begin(), cfg.modalities.end(), m) != cfg.modalities.end()) pool.push_back(i);
    }
    return pool;
}

std::vector<int32_t> predict_patch_labels(Model<float>& model, const PatchSample& p) {
    const int64_t P = model.cfg.patch_size;
    Graph<float> g;
    NoGradGuard<float> ng(g);
    Tensor<float> x = Tensor<float>::from({1, 1, P, P, P}, std::vector<float>(p.image.begin(), p.image.end()));
    Tensor<float> logits = forward(g, model, x, p.modality).logits;
    const int64_t K = logits.dim(1), N = P * P * P;
    std::vector<int32_t> out(static_cast<size_t>(N));
    const float* lp = logits.data();
    for (int64_t i = 0; i < N; ++i) {
        int32_t best = 0;
        float best_v = lp[i];
        for (int64_t k = 1; k < K; ++k)
            if (lp[k * N + i] > best_v) {
                best_v = lp[k * N + i];
                best = static_cast<int32_t>(k);
            }
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

double train_step(Model<float>& model, AdamState& opt, const Dataset& data, const std::vector<size_t>& pool,
                  const TrainConfig& tc, uint64_t stream_seed, int64_t step) {
    Rng rng = Rng::for_stream(stream_seed, static_cast<uint64_t>(step));
    model.for_each_parameter([](const std::string&, Tensor<float>& t) { t.clear_grad(); });

    const int64_t P = model.cfg.patch_size;
    Graph<float> g;
    Tensor<float> total;
    for (int64_t b = 0; b < tc.batch_size; ++b) {
        const TrainingCase& c = data.cases[pool[rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1)]];
        PatchSample p = sample_training_patch(c.image, c.labels, P, rng, c.id);
        if (rng.uniform() < tc.augment_prob) augment_gaussian(p.image, {P, P, P}, rng);
        if (rng.uniform() < tc.augment_prob) augment_contrast(p.image, rng);

        Tensor<float> x =
            Tensor<float>::from({1, 1, P, P, P}, std::vector<float>(p.image.begin(), p.image.end()));
        Tensor<float> l = compute_loss(g, forward(g, model, x, p.modality).logits, p.labels);
        total = (b == 0) ? l : add(g, total, l);
    }
    Tensor<float> loss = pointwise(g, total, Unary::Scale, 1.0f / static_cast<float>(tc.batch_size));
    const double lv = static_cast<double>(loss.scalar());
    if (!std::isfinite(lv))
        throw NumericError("train: non-finite loss at step " + std::to_string(step + 1));
    g.backward(loss);
    opt.lr = tc.lr;
    opt.apply(model);
    return lv;
}

// Pooled foreground Dice on non-overlapping holdout patches, keyed
// "<modality>" (mean over categories) and "<modality>/<category>".
std::map<std::string, double> holdout_dice(TrainedStrategy& state, const Dataset& holdout) {
    std::map<std::string, std::vector<std::array<int64_t, 3>>> counts;  // modality -> per-cat {inter, pred, ref}
    for (const auto& c : holdout.cases) {
        Model<float>& model = model_for_modality(state, c.image.modality);
        const int64_t C = model.cfg.num_categories;
        auto& acc = counts[c.image.modality];
        if (acc.empty()) acc.assign(static_cast<size_t>(C), {0, 0, 0});
        auto patches = extract_grid_patches(c.image, model.cfg.patch_size, model.cfg.patch_size, &c.labels, c.id);
        for (const auto& p : patches) {
            std::vector<int32_t> pred = predict_patch_labels(model, p);
            for (size_t i = 0; i < pred.size(); ++i)
                for (int32_t cat = 1; cat <= C; ++cat) {
                    auto& a = acc[static_cast<size_t>(cat - 1)];
                    a[0] += (pred[i] == cat && p.labels[i] == cat);
                    a[1] += (pred[i] == cat);
                    a[2] += (p.labels[i] == cat);
                }
        }
    }
    std::map<std::string, double> out;
    for (auto& [modality, acc] : counts) {
        Model<float>& model = model_for_modality(state, modality);
        double mean = 0;
        for (size_t c = 0; c < acc.size(); ++c) {
            const auto& a = acc[c];
            const double d = (a[1] + a[2]) > 0 ? 2.0 * static_cast<double>(a[0]) / static_cast<double>(a[1] + a[2])
                                               : 1.0;
            out[modality + "/" + model.latents.category_names[c]] = d;
            mean += d;
        }
        out[modality] = mean / static_cast<double>(acc.size());
    }
    return out;
}

}  // namespace

Model<float>& model_for_modality(TrainedStrategy& state, const std::string& modality) {
    if (state.models.empty()) throw DataError("model_for_modality: no trained models");
    if (state.strategy == "specific") {
        for (auto& m : state.models)
            if (m.cfg.modalities.size() == 1 && m.cfg.modalities[0] == modality) return m;
        throw DataError("model_for_modality: no model trained for '" + modality + "'");
    }
    return state.models[0];
}

void resume_training(TrainedStrategy& state, const Dataset& data, const Dataset& holdout, const TrainConfig& tc) {
    if (state.models.empty()) throw DataError("resume_training: no models to train");
    if (tc.steps < state.step)
        throw DataError("resume_training: target " + std::to_string(tc.steps) + " steps is before step " +
                        std::to_string(state.step));
    if (tc.batch_size < 1) throw DataError("resume_training: batch size must be >= 1");

    std::vector<std::vector<size_t>> pools;
    for (auto& model : state.models) {
        validate_dataset(data, model.cfg.num_categories, "train");
        for (const auto& m : model.cfg.modalities)
            if (!data.has_modality(m)) throw DataError("train: dataset has no cases for modality '" + m + "'");
        pools.push_back(case_pool(data, model.cfg));
    }
    if (!holdout.cases.empty()) validate_dataset(holdout, state.models[0].cfg.num_categories, "holdout");

    for (int64_t step = state.step; step < tc.steps; ++step) {
        double loss_sum = 0;
        for (size_t i = 0; i < state.models.size(); ++i)
            loss_sum +=
                train_step(state.models[i], state.optimizers[i], data, pools[i], tc, model_stream_seed(state.seed, i),
                           step);
        HistoryRow row;
        row.step = step + 1;
        row.loss = loss_sum / static_cast<double>(state.models.size());
        const bool cadence = tc.eval_every > 0 && ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps);
        if (cadence && !holdout.cases.empty()) row.holdout_dice = holdout_dice(state, holdout);
        state.history.push_back(std::move(row));
    }
    state.step = tc.steps;
}

TrainedStrategy train(const NetworkConfig& cfg, const Dataset& data, const Dataset& holdout, const TrainConfig& tc) {
    // the one-modality rule for "specific" applies to each trained model,
    // not to the request; validate a single-modality probe instead
    NetworkConfig probe = cfg;
    if (cfg.strategy == "specific") {
        if (cfg.modalities.empty()) throw DataError("train: no modalities requested");
        probe.modalities = {cfg.modalities[0]};
    }
    probe.validate();
    TrainedStrategy state;
    state.strategy = cfg.strategy;
    state.seed = tc.seed;
    const size_t n_models = cfg.strategy == "specific" ? cfg.modalities.size() : 1;
    for (size_t i = 0; i < n_models; ++i) {
        NetworkConfig ci = cfg;
        if (cfg.strategy == "specific") ci.modalities = {cfg.modalities[i]};
        state.models.push_back(build_network<float>(ci, model_stream_seed(tc.seed, i)));
        state.optimizers.emplace_back();
        state.optimizers.back().lr = tc.lr;
    }
    resume_training(state, data, holdout, tc);
    return state;
}

EvalReport evaluate(TrainedStrategy& state, const Dataset& data, double tolerance_mm) {
    EvalReport report;
    std::map<std::pair<std::string, std::string>, std::pair<std::array<double, 2>, int64_t>> agg;
    for (const auto& c : data.cases) {
        Model<float>& model = model_for_modality(state, c.image.modality);
        validate_dataset(Dataset{{c}}, model.cfg.num_categories, "evaluate");
        LabelVolume pred = predict_volume(model, c.image, c.image.modality);
        const size_t n = c.labels.labels.size();
        for (int64_t cat = 1; cat <= model.cfg.num_categories; ++cat) {
            MaskPair pair;
            pair.shape = c.labels.shape;
            pair.spacing_mm = c.labels.spacing_mm;
            pair.pred.resize(n);
            pair.ref.resize(n);
            for (size_t i = 0; i < n; ++i) {
                pair.pred[i] = pred.labels[i] == cat;
                pair.ref[i] = c.labels.labels[i] == cat;
            }
            EvalRow row;
            row.case_id = c.id;
            row.modality = c.image.modality;
            row.category = model.latents.category_names[static_cast<size_t>(cat - 1)];
            row.dice = dice(pair);
            row.surface_dice = surface_dice(pair, tolerance_mm);
            auto& slot = agg[{row.modality, row.category}];
            slot.first[0] += row.dice;
            slot.first[1] += row.surface_dice;
            slot.second++;
            report.per_case.push_back(std::move(row));
        }
    }
    for (const auto& [key, slot] : agg) {
        EvalRow row;
        row.case_id = "mean";
        row.modality = key.first;
        row.category = key.second;
        row.dice = slot.first[0] / static_cast<double>(slot.second);
        row.surface_dice = slot.first[1] / static_cast<double>(slot.second);
        report.aggregate.push_back(std::move(row));
    }
    return report;
}

void write_eval_csv(const EvalReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("write_eval_csv: cannot open '" + path + "'");
    os << "case,modality,category,dice,surface_dice\n";
    auto emit = [&](const EvalRow& r) {
        os << r.case_id << ',' << r.modality << ',' << r.category << ',' << r.dice << ',' << r.surface_dice << '\n';
    };
    for (const auto& r : report.per_case) emit(r);
    for (const auto& r : report.aggregate) emit(r);
    if (!os) throw DataError("write_eval_csv: failed writing '" + path + "'");
}

void write_history_csv(const std::vector<HistoryRow>& history, const std::string& path) {
    std::set<std::string> keys;
    for (const auto& row : history)
        for (const auto& [k, v] : row.holdout_dice) keys.insert(k);
    std::ofstream os(path);
    if (!os) throw DataError("write_history_csv: cannot open '" + path + "'");
    os << "step,loss";
    for (const auto& k : keys) os << ",dice " << k;
    os << '\n';
    for (const auto& row : history) {
        os << row.step << ',' << row.loss;
        for (const auto& k : keys) {
            auto it = row.holdout_dice.find(k);
            os << ',';
            if (it != row.holdout_dice.end()) os << it->second;
        }
        os << '\n';
    }
    if (!os) throw DataError("write_history_csv: failed writing '" + path + "'");
}

void add_categories(Model<float>& model, const std::vector<std::string>& new_names,
                    const std::map<std::string, std::vector<float>>& provided_latents, uint64_t seed) {
    if (new_names.empty()) throw DataError("add_categories: no names given");
    std::set<std::string> seen(model.latents.category_names.begin(), model.latents.category_names.end());
    for (const auto& n : new_names)
        if (!seen.insert(n).second) throw DataError("add_categories: category '" + n + "' already exists");

    Rng rng(seed);
    const int64_t d_T = model.cfg.d_T;
    const int64_t C_old = model.cfg.num_categories;
    const int64_t k = static_cast<int64_t>(new_names.size());

    // latent rows: provided vector or a fresh random row, drawn in list order
    std::vector<float> lat = model.latents.latents.values();
    lat.reserve(static_cast<size_t>((C_old + k) * d_T));
    for (const auto& name : new_names) {
        auto it = provided_latents.find(name);
        if (it != provided_latents.end()) {
            if (static_cast<int64_t>(it->second.size()) != d_T)
                throw ShapeError("add_categories: latent for '" + name + "' has length " +
                                 std::to_string(it->second.size()) + ", expected " + std::to_string(d_T));
            lat.insert(lat.end(), it->second.begin(), it->second.end());
        } else {
            // same scale as build_network: unit-norm rows keep the new
            // controller channel audible from the first finetuning step
            const float row_stddev = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d_T)));
            for (int64_t i = 0; i < d_T; ++i) lat.push_back(static_cast<float>(rng.normal()) * row_stddev);
        }
    }
    model.latents.latents = Tensor<float>::from({C_old + k, d_T}, std::move(lat), true);
    for (const auto& n : new_names) model.latents.category_names.push_back(n);

    // fusion convs gain zero input columns: the new controller channels sit
    // at the end of the concat, so old activations are reproduced exactly
    for (auto& blk : model.encoder) {
        const int64_t H = blk.fuse_w.dim(0), in_old = blk.fuse_w.dim(1);
        std::vector<float> w(static_cast<size_t>(H * (in_old + k)), 0.0f);
        for (int64_t o = 0; o < H; ++o)
            std::copy_n(blk.fuse_w.values().begin() + o * in_old, in_old, w.begin() + o * (in_old + k));
        blk.fuse_w = Tensor<float>::from({H, in_old + k, 1, 1, 1}, std::move(w), true);
    }

    // tail gains logit rows; old rows are reused bit for bit
    const int64_t H0 = model.tail.w.dim(1);
    std::vector<float> tw = model.tail.w.values();
    const float stddev = static_cast<float>(std::sqrt(2.0 / static_cast<double>(H0)));
    for (int64_t i = 0; i < k * H0; ++i) tw.push_back(static_cast<float>(rng.normal()) * stddev);
    model.tail.w = Tensor<float>::from({C_old + 1 + k, H0, 1, 1, 1}, std::move(tw), true);
    std::vector<float> tb = model.tail.b.values();
    tb.resize(static_cast<size_t>(C_old + 1 + k), 0.0f);
    model.tail.b = Tensor<float>::from({C_old + 1 + k}, std::move(tb), true);

    model.cfg.num_categories = C_old + k;
}

TrainedStrategy finetune(Model<float>&& model, const std::vector<std::string>& new_names,
                         const std::map<std::string, std::vector<float>>& provided_latents, const Dataset& data,
                         const Dataset& holdout, const TrainConfig& tc) {
    add_categories(model, new_names, provided_latents, tc.seed);
    TrainedStrategy state;
    state.strategy = model.cfg.strategy;
    state.seed = tc.seed;
    state.models.push_back(std::move(model));
    state.optimizers.emplace_back();
    state.optimizers.back().lr = tc.lr;
    resume_training(state, data, holdout, tc);
    return state;
}

namespace {

constexpr int kCheckpointVersion = 1;

std::string blob_name(const std::string& tensor_name) {
    std::string s;
    for (char c : tensor_name) s += (c == '/') ? std::string("__") : std::string(1, c);
    return s + ".bin";
}

void write_blob(const fs::path& path, const std::vector<float>& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open '" + path.string() + "' for writing");
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!os) throw DataError("checkpoint: failed writing '" + path.string() + "'");
}

std::vector<float> read_blob(const fs::path& path, size_t expected_bytes) {
    std::error_code ec;
    const auto actual = fs::file_size(path, ec);
    if (ec) throw DataError("checkpoint: missing blob '" + path.string() + "'");
    if (actual != expected_bytes)
        throw FormatError("checkpoint: blob '" + path.string() + "' has " + std::to_string(actual) +
                          " bytes, manifest says " + std::to_string(expected_bytes));
    std::ifstream is(path, std::ios::binary);
    std::vector<float> v(expected_bytes / sizeof(float));
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(expected_bytes));
    if (!is) throw FormatError("checkpoint: truncated read from '" + path.string() + "'");
    return v;
}

json config_json(const NetworkConfig& cfg) {
    return json{{"num_categories", cfg.num_categories}, {"stages", cfg.stages},
                {"d_T", cfg.d_T},                       {"d_m", cfg.d_m},
                {"fog_hidden", cfg.fog_hidden},         {"patch_size", cfg.patch_size},
                {"modalities", cfg.modalities},         {"strategy", cfg.strategy}};
}

NetworkConfig config_from_json(const json& j) {
    NetworkConfig cfg;
    try {
        cfg.num_categories = j.at("num_categories").get<int64_t>();
        cfg.stages = j.at("stages").get<std::vector<int64_t>>();
        cfg.d_T = j.at("d_T").get<int64_t>();
        cfg.d_m = j.at("d_m").get<int64_t>();
        cfg.fog_hidden = j.at("fog_hidden").get<int64_t>();
        cfg.patch_size = j.at("patch_size").get<int64_t>();
        cfg.modalities = j.at("modalities").get<std::vector<std::string>>();
        cfg.strategy = j.at("strategy").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad config in manifest: ") + e.what());
    }
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& dir, Model<float>& model, const AdamState* optimizer, int64_t step,
                     uint64_t seed) {
    fs::create_directories(fs::path(dir) / "params");
    json manifest;
    manifest["format"] = "mpum-checkpoint";
    manifest["version"] = kCheckpointVersion;
    manifest["step"] = step;
    manifest["seed"] = seed;
    manifest["config"] = config_json(model.cfg);
    manifest["category_names"] = model.latents.category_names;

    json tensors = json::array();
    model.for_each_parameter([&](const std::string& name, Tensor<float>& t) {
        const std::string file = "params/" + blob_name(name);
        write_blob(fs::path(dir) / file, t.values());
        tensors.push_back(json{{"name", name},
                               {"shape", t.shape()},
                               {"file", file},
                               {"bytes", t.values().size() * sizeof(float)}});
    });
    manifest["tensors"] = std::move(tensors);

    if (optimizer) {
        fs::create_directories(fs::path(dir) / "adam_m");
        fs::create_directories(fs::path(dir) / "adam_v");
        json opt;
        opt["lr"] = optimizer->lr;
        opt["beta1"] = optimizer->beta1;
        opt["beta2"] = optimizer->beta2;
        opt["eps"] = optimizer->eps;
        json slots = json::array();
        for (const auto& [name, slot] : optimizer->slots) {
            const std::string mfile = "adam_m/" + blob_name(name);
            const std::string vfile = "adam_v/" + blob_name(name);
            write_blob(fs::path(dir) / mfile, slot.m);
            write_blob(fs::path(dir) / vfile, slot.v);
            slots.push_back(json{{"name", name},
                                 {"t", slot.t},
                                 {"m_file", mfile},
                                 {"v_file", vfile},
                                 {"bytes", slot.m.size() * sizeof(float)}});
        }
        opt["slots"] = std::move(slots);
        manifest["optimizer"] = std::move(opt);
    } else {
        manifest["optimizer"] = nullptr;
    }

    std::ofstream os(fs::path(dir) / "manifest.json");
    if (!os) throw DataError("checkpoint: cannot write manifest in '" + dir + "'");
    os << manifest.dump(2) << '\n';
    if (!os) throw DataError("checkpoint: failed writing manifest in '" + dir + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw DataError("checkpoint: no manifest in '" + dir + "'");
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    try {
        if (manifest.at("format").get<std::string>() != "mpum-checkpoint")
            throw FormatError("checkpoint: '" + dir + "' is not a model checkpoint");
        if (manifest.at("version").get<int>() != kCheckpointVersion)
            throw FormatError("checkpoint: unsupported version " + manifest.at("version").dump());

        LoadedCheckpoint out;
        out.step = manifest.at("step").get<int64_t>();
        out.seed = manifest.at("seed").get<uint64_t>();
        const NetworkConfig cfg = config_from_json(manifest.at("config"));
        out.model = build_network<float>(cfg, 0);
        auto names = manifest.at("category_names").get<std::vector<std::string>>();
        if (static_cast<int64_t>(names.size()) != cfg.num_categories)
            throw FormatError("checkpoint: category name count does not match the config");
        out.model.latents.category_names = std::move(names);

        std::map<std::string, Tensor<float>*> by_name;
        out.model.for_each_parameter([&](const std::string& name, Tensor<float>& t) { by_name[name] = &t; });

        size_t seen = 0;
        for (const auto& entry : manifest.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            auto it = by_name.find(name);
            if (it == by_name.end()) throw FormatError("checkpoint: unknown tensor '" + name + "'");
            Tensor<float>& t = *it->second;
            if (entry.at("shape").get<Shape>() != t.shape())
                throw FormatError("checkpoint: tensor '" + name + "' shape mismatch");
            const size_t bytes = entry.at("bytes").get<size_t>();
            if (bytes != t.values().size() * sizeof(float))
                throw FormatError("checkpoint: tensor '" + name + "' byte count mismatch");
            t.values() = read_blob(fs::path(dir) / entry.at("file").get<std::string>(), bytes);
            seen++;
        }
        if (seen != by_name.size())
            throw FormatError("checkpoint: manifest lists " + std::to_string(seen) + " tensors, model has " +
                              std::to_string(by_name.size()));

        if (!manifest.at("optimizer").is_null()) {
            const json& opt = manifest.at("optimizer");
            AdamState adam;
            adam.lr = opt.at("lr").get<double>();
            adam.beta1 = opt.at("beta1").get<double>();
            adam.beta2 = opt.at("beta2").get<double>();
            adam.eps = opt.at("eps").get<double>();
            for (const auto& entry : opt.at("slots")) {
                AdamParamState slot;
                slot.t = entry.at("t").get<int64_t>();
                const size_t bytes = entry.at("bytes").get<size_t>();
                slot.m = read_blob(fs::path(dir) / entry.at("m_file").get<std::string>(), bytes);
                slot.v = read_blob(fs::path(dir) / entry.at("v_file").get<std::string>(), bytes);
                adam.slots.emplace(entry.at("name").get<std::string>(), std::move(slot));
            }
            out.optimizer = std::move(adam);
        }
        return out;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
}

void save_strategy(const std::string& dir, TrainedStrategy& state) {
    fs::create_directories(dir);
    json meta;
    meta["format"] = "mpum-strategy";
    meta["version"] = kCheckpointVersion;
    meta["strategy"] = state.strategy;
    meta["step"] = state.step;
    meta["seed"] = state.seed;
    meta["models"] = state.models.size();
    std::ofstream os(fs::path(dir) / "strategy.json");
    if (!os) throw DataError("checkpoint: cannot write strategy manifest in '" + dir + "'");
    os << meta.dump(2) << '\n';
    for (size_t i = 0; i < state.models.size(); ++i)
        save_checkpoint((fs::path(dir) / ("model_" + std::to_string(i))).string(), state.models[i],
                        i < state.optimizers.size() ? &state.optimizers[i] : nullptr, state.step, state.seed);
}

TrainedStrategy load_strategy(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "strategy.json");
    if (!is) throw DataError("checkpoint: no strategy manifest in '" + dir + "'");
    json meta;
    try {
        is >> meta;
        if (meta.at("format").get<std::string>() != "mpum-strategy")
            throw FormatError("checkpoint: '" + dir + "' is not a strategy checkpoint");
        if (meta.at("version").get<int>() != kCheckpointVersion)
            throw FormatError("checkpoint: unsupported version " + meta.at("version").dump());
        TrainedStrategy state;
        state.strategy = meta.at("strategy").get<std::string>();
        state.step = meta.at("step").get<int64_t>();
        state.seed = meta.at("seed").get<uint64_t>();
        const size_t n = meta.at("models").get<size_t>();
        for (size_t i = 0; i < n; ++i) {
            LoadedCheckpoint lc = load_checkpoint((fs::path(dir) / ("model_" + std::to_string(i))).string());
            state.models.push_back(std::move(lc.model));
            if (lc.optimizer)
                state.optimizers.push_back(std::move(*lc.optimizer));
            else
                state.optimizers.emplace_back();
        }
        return state;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed strategy manifest: ") + e.what());
    }
}

Dataset make_phantom_dataset(uint64_t seed, int64_t count, const std::vector<std::string>& modalities, int64_t size,
                             int64_t num_categories) {
    Dataset d;
    for (int64_t k = 0; k < count; ++k) {
        const uint64_t subject_seed = splitmix64(seed ^ splitmix64(0x7068616e746f6dULL + static_cast<uint64_t>(k)));
        Phantom ph = synth_phantom(subject_seed, modalities, size, num_categories);
        for (auto& [modality, vol] : ph.images) {
            TrainingCase c;
            c.image = normalize_modality(vol);
            c.labels = ph.labels;
            c.id = "phantom_" + std::to_string(k);
            d.cases.push_back(std::move(c));
        }
    }
    return d;
}

}  // namespace mpum
