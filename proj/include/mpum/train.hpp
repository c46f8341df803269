#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpum/network.hpp"
#include "mpum/volume.hpp"

namespace mpum {

struct TrainingCase {
    Volume image;       // resampled + normalized; image.modality is the routing tag
    LabelVolume labels;
    std::string id;
};

struct Dataset {
    std::vector<TrainingCase> cases;

    bool has_modality(const std::string& m) const {
        for (const auto& c : cases)
            if (c.image.modality == m) return true;
        return false;
    }
};

struct TrainConfig {
    int64_t steps = 300;
    int64_t batch_size = 2;
    double lr = 1e-3;
    int64_t eval_every = 50;    // held-out Dice cadence; 0 disables
    double augment_prob = 0.0;  // per patch, per augmentation; opt-in
    uint64_t seed = 0;
};

// Adam with per-tensor slots keyed by parameter name. Tensors that received
// no gradient in a step are left untouched, moments included.
struct AdamParamState {
    std::vector<float> m, v;
    int64_t t = 0;
};

struct AdamState {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::map<std::string, AdamParamState> slots;

    void apply(Model<float>& model);
};

struct HistoryRow {
    int64_t step = 0;  // 1-based step just completed
    double loss = 0;
    std::map<std::string, double> holdout_dice;  // modality -> mean foreground Dice; empty off-cadence
};

struct TrainedStrategy {
    std::string strategy;
    std::vector<Model<float>> models;     // mixed/projection: one; specific: one per modality
    std::vector<AdamState> optimizers;    // parallel to models
    std::vector<HistoryRow> history;
    int64_t step = 0;                     // steps completed per model
    uint64_t seed = 0;
};

// Per-model RNG stream root; model_index is the position in cfg.modalities
// for the specific strategy and 0 otherwise.
uint64_t model_stream_seed(uint64_t seed, size_t model_index);

TrainedStrategy train(const NetworkConfig& cfg, const Dataset& data, const Dataset& holdout,
                      const TrainConfig& tc);

// Continues an existing run up to tc.steps total steps; a resumed run is
// bitwise identical to an uninterrupted one with the same seed.
void resume_training(TrainedStrategy& state, const Dataset& data, const Dataset& holdout, const TrainConfig& tc);

// Routes a modality tag to the model that handles it.
Model<float>& model_for_modality(TrainedStrategy& state, const std::string& modality);

struct EvalRow {
    std::string case_id;
    std::string modality;
    std::string category;
    double dice = 0;
    double surface_dice = 0;
};

struct EvalReport {
    std::vector<EvalRow> per_case;
    std::vector<EvalRow> aggregate;  // one row per modality x category, case_id "mean"
};

EvalReport evaluate(TrainedStrategy& state, const Dataset& data, double tolerance_mm = 2.0);
void write_eval_csv(const EvalReport& report, const std::string& path);
void write_history_csv(const std::vector<HistoryRow>& history, const std::string& path);

// Grows the category set in place: latent rows (provided row or random),
// controller fusion inputs (zeros), tail logits (random). With zero fusion
// weights the new channels contribute nothing, so pre-existing logits are
// preserved exactly until the first optimizer step.
void add_categories(Model<float>& model, const std::vector<std::string>& new_names,
                    const std::map<std::string, std::vector<float>>& provided_latents, uint64_t seed);

// add_categories + fresh optimizer + continued training on the union data.
TrainedStrategy finetune(Model<float>&& model, const std::vector<std::string>& new_names,
                         const std::map<std::string, std::vector<float>>& provided_latents, const Dataset& data,
                         const Dataset& holdout, const TrainConfig& tc);

struct LoadedCheckpoint {
    Model<float> model;
    std::optional<AdamState> optimizer;
    int64_t step = 0;
    uint64_t seed = 0;
};

void save_checkpoint(const std::string& dir, Model<float>& model, const AdamState* optimizer, int64_t step,
                     uint64_t seed);
LoadedCheckpoint load_checkpoint(const std::string& dir);

void save_strategy(const std::string& dir, TrainedStrategy& state);
TrainedStrategy load_strategy(const std::string& dir);

// Synthetic multi-modality cohort: `count` phantom subjects, each rendered
// in every listed modality, resampled and normalized, ids phantom_<k>.
Dataset make_phantom_dataset(uint64_t seed, int64_t count, const std::vector<std::string>& modalities,
                             int64_t size = 64, int64_t num_categories = 3);

}  // namespace mpum
