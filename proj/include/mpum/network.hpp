#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpum/projection.hpp"
#include "mpum/tensor.hpp"
#include "mpum/volume.hpp"

namespace mpum {

struct NetworkConfig {
    int64_t num_categories = 0;                 // C; logits get C+1 channels, background at 0
    std::vector<int64_t> stages = {16, 32, 64, 128};
    int64_t d_T = 64;
    int64_t d_m = 32;
    int64_t fog_hidden = 128;
    int64_t patch_size = 128;
    std::vector<std::string> modalities;
    std::string strategy = "projection";  // mixed | specific | projection

    void validate() const {
        if (num_categories < 1) throw DataError("NetworkConfig: need at least one category");
        if (stages.size() < 2) throw DataError("NetworkConfig: need at least two stages");
        for (int64_t h : stages)
            if (h < 1) throw DataError("NetworkConfig: stage channel counts must be >= 1");
        const int64_t divisor = int64_t(1) << (stages.size() - 1);
        if (patch_size < divisor || patch_size % divisor != 0)
            throw DataError("NetworkConfig: patch size " + std::to_string(patch_size) + " must be divisible by " +
                            std::to_string(divisor));
        if (d_T < 1 || d_m < 1 || fog_hidden < 1) throw DataError("NetworkConfig: dimensions must be >= 1");
        if (strategy != "mixed" && strategy != "specific" && strategy != "projection")
            throw DataError("NetworkConfig: unknown strategy '" + strategy + "'");
        if (modalities.empty()) throw DataError("NetworkConfig: need at least one modality");
        if (strategy == "specific" && modalities.size() != 1)
            throw DataError("NetworkConfig: the specific strategy takes exactly one modality");
    }
};

template <typename T>
struct ConvLayer {
    Tensor<T> w, b;
};

// Traditional branch parameters plus the 1x1x1 fusion that folds the
// controller output back to H_s channels. The controller branch itself has
// no per-block parameters: its kernels arrive from the FOG every forward.
template <typename T>
struct DualBranchBlock {
    Tensor<T> trad_w, trad_b;  // [H_s, H_s, 3,3,3], [H_s]
    Tensor<T> fuse_w, fuse_b;  // [H_s, H_s+C, 1,1,1], [H_s]
};

template <typename T>
struct SaliencyRecord {
    std::map<int64_t, Tensor<T>> stages;  // stage -> [C, D, H, W], batch item 0
};

template <typename T>
struct Model {
    NetworkConfig cfg;
    LatentTable<T> latents;
    ProjectionSet<T> projections;
    FeatureOperatorGenerator<T> fog;
    ConvLayer<T> head;                       // 3^3, 1 -> H_1
    std::vector<DualBranchBlock<T>> encoder;  // one per stage
    std::vector<ConvLayer<T>> down;          // stride-2 3^3, H_s -> H_{s+1}
    std::vector<ConvLayer<T>> decoder;       // 3^3, (H_s + H_{s+1}) -> H_s
    ConvLayer<T> tail;                       // 1^3, H_1 -> C+1

    // Visits every learnable tensor with a stable name; the order defines
    // the optimizer slot and checkpoint layout.
    template <typename F>
    void for_each_parameter(F&& fn) {
        fn("latents", latents.latents);
        for (auto& [key, p] : projections.modality) fn("proj/" + key, p);
        for (auto& [key, p] : projections.external) fn("proj_ext/" + key, p);
        for (size_t s = 0; s < fog.stages.size(); ++s) {
            const std::string base = "fog/s" + std::to_string(s) + "/";
            fn(base + "w1", fog.stages[s].w1);
            fn(base + "b1", fog.stages[s].b1);
            fn(base + "w2", fog.stages[s].w2);
            fn(base + "b2", fog.stages[s].b2);
        }
        fn("head/w", head.w);
        fn("head/b", head.b);
        for (size_t s = 0; s < encoder.size(); ++s) {
            const std::string base = "enc" + std::to_string(s) + "/";
            fn(base + "trad/w", encoder[s].trad_w);
            fn(base + "trad/b", encoder[s].trad_b);
            fn(base + "fuse/w", encoder[s].fuse_w);
            fn(base + "fuse/b", encoder[s].fuse_b);
        }
        for (size_t s = 0; s < down.size(); ++s) {
            fn("down" + std::to_string(s) + "/w", down[s].w);
            fn("down" + std::to_string(s) + "/b", down[s].b);
        }
        for (size_t s = 0; s < decoder.size(); ++s) {
            fn("dec" + std::to_string(s) + "/w", decoder[s].w);
            fn("dec" + std::to_string(s) + "/b", decoder[s].b);
        }
        fn("tail/w", tail.w);
        fn("tail/b", tail.b);
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for_each_parameter([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }
};

namespace detail {

template <typename T>
ConvLayer<T> init_conv(int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng) {
    ConvLayer<T> layer;
    const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(in_ch * k * k * k)));
    layer.w = Tensor<T>::randn({out_ch, in_ch, k, k, k}, rng, stddev, true);
    layer.b = Tensor<T>::zeros({out_ch}, true);
    return layer;
}

}  // namespace detail

template <typename T>
Model<T> build_network(const NetworkConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<T> model;
    model.cfg = cfg;
    Rng rng(seed);

    std::vector<std::string> names;
    for (int64_t c = 1; c <= cfg.num_categories; ++c) names.push_back("category_" + std::to_string(c));
    // Unit-norm latent rows: with the 0.2-stddev projections and the FOG's
    // 1/sqrt(fan-in) layers this lands the generated kernels at the same
    // magnitude as the He-initialized traditional kernels, so the
    // modality-conditioned branch carries signal from the first step.
    const T latent_stddev = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_T)));
    model.latents = LatentTable<T>::random(names, cfg.d_T, rng, latent_stddev);

    if (cfg.strategy == "mixed") {
        model.projections.add_modality("SHARED", cfg.d_T, cfg.d_m, rng);
    } else {
        for (const auto& m : cfg.modalities) model.projections.add_modality(m, cfg.d_T, cfg.d_m, rng);
    }
    model.fog = FeatureOperatorGenerator<T>::init(cfg.d_m, cfg.fog_hidden, cfg.stages, rng);

    const size_t S = cfg.stages.size();
    model.head = detail::init_conv<T>(cfg.stages[0], 1, 3, rng);
    for (size_t s = 0; s < S; ++s) {
        DualBranchBlock<T> blk;
        const int64_t H = cfg.stages[s];
        ConvLayer<T> trad = detail::init_conv<T>(H, H, 3, rng);
        blk.trad_w = trad.w;
        blk.trad_b = trad.b;
        ConvLayer<T> fuse = detail::init_conv<T>(H, H + cfg.num_categories, 1, rng);
        blk.fuse_w = fuse.w;
        blk.fuse_b = fuse.b;
        model.encoder.push_back(std::move(blk));
        if (s + 1 < S) model.down.push_back(detail::init_conv<T>(cfg.stages[s + 1], H, 3, rng));
    }
    for (size_t s = 0; s + 1 < S; ++s)
        model.decoder.push_back(detail::init_conv<T>(cfg.stages[s], cfg.stages[s] + cfg.stages[s + 1], 3, rng));
    model.tail = detail::init_conv<T>(cfg.num_categories + 1, cfg.stages[0], 1, rng);
    return model;
}

// Maps a modality tag to the projection key the strategy dictates.
template <typename T>
std::string resolve_projection_key(const Model<T>& model, const std::string& modality) {
    if (model.cfg.strategy == "mixed") return "SHARED";
    if (model.cfg.strategy == "specific") {
        if (modality != model.cfg.modalities[0])
            throw DataError("forward: model is specific to '" + model.cfg.modalities[0] + "', got '" + modality +
                            "'");
        return modality;
    }
    if (!model.projections.modality.count(modality))
        throw DataError("forward: no projection for modality '" + modality + "'");
    return modality;
}

// One dual-branch step: traditional conv and controller conv side by side,
// channel concat, 1^3 fusion. Returns the fused activation; *ctrl_out (when
// non-null) receives the raw controller response.
template <typename T>
Tensor<T> dual_branch_forward(Graph<T>& g, Tensor<T> x, const DualBranchBlock<T>& blk, Tensor<T> ctrl_kernels,
                              Tensor<T>* ctrl_out) {
    Tensor<T> trad =
        pointwise(g, bias_add_channel(g, conv3d(g, x, blk.trad_w, 1, 1), blk.trad_b), Unary::LeakyRelu);
    Tensor<T> ctrl = conv3d(g, x, ctrl_kernels, 1, 1);
    if (ctrl_out) *ctrl_out = ctrl;
    Tensor<T> merged = concat_channels(g, trad, pointwise(g, ctrl, Unary::LeakyRelu));
    return pointwise(g, bias_add_channel(g, conv3d(g, merged, blk.fuse_w, 1, 0), blk.fuse_b), Unary::LeakyRelu);
}

template <typename T>
struct ForwardResult {
    Tensor<T> logits;  // [B, C+1, P, P, P]
    std::optional<SaliencyRecord<T>> saliency;
};

template <typename T>
ForwardResult<T> forward(Graph<T>& g, Model<T>& model, Tensor<T> patch, const std::string& modality,
                         bool capture_saliency = false) {
    const NetworkConfig& cfg = model.cfg;
    const int64_t P = cfg.patch_size;
    if (patch.rank() != 5 || patch.dim(1) != 1 || patch.dim(2) != P || patch.dim(3) != P || patch.dim(4) != P)
        throw ShapeError("forward: expected patch Bx1x" + std::to_string(P) + "^3, got " + shape_str(patch.shape()));
    const std::string key = resolve_projection_key(model, modality);
    const size_t S = cfg.stages.size();

    Tensor<T> mf = project_latent(g, model.latents, model.projections, key);

    ForwardResult<T> res;
    if (capture_saliency) res.saliency.emplace();

    Tensor<T> x =
        pointwise(g, bias_add_channel(g, conv3d(g, patch, model.head.w, 1, 1), model.head.b), Unary::LeakyRelu);

    std::vector<Tensor<T>> skips;
    for (size_t s = 0; s < S; ++s) {
        Tensor<T> kernels = generate_kernels(g, mf, model.fog, s);
        Tensor<T> ctrl;
        x = dual_branch_forward(g, x, model.encoder[s], kernels, capture_saliency ? &ctrl : nullptr);
        if (capture_saliency) {
            // batch item 0, detached copy
            const int64_t C = ctrl.dim(1), D = ctrl.dim(2), H = ctrl.dim(3), W = ctrl.dim(4);
            std::vector<T> vals(ctrl.values().begin(), ctrl.values().begin() + C * D * H * W);
            res.saliency->stages.emplace(static_cast<int64_t>(s),
                                         Tensor<T>::from({C, D, H, W}, std::move(vals)));
        }
        skips.push_back(x);
        if (s + 1 < S)
            x = pointwise(g, bias_add_channel(g, conv3d(g, x, model.down[s].w, 2, 1), model.down[s].b),
                          Unary::LeakyRelu);
    }

    for (size_t i = S - 1; i-- > 0;) {
        x = upsample_trilinear2(g, x);
        x = concat_channels(g, skips[i], x);
        x = pointwise(g, bias_add_channel(g, conv3d(g, x, model.decoder[i].w, 1, 1), model.decoder[i].b),
                      Unary::LeakyRelu);
    }

    res.logits = bias_add_channel(g, conv3d(g, x, model.tail.w, 1, 0), model.tail.b);
    return res;
}

// Soft Dice over foreground categories plus voxelwise cross-entropy,
// unweighted sum. Labels are flat B*P^3 category indices in [0, C].
template <typename T>
Tensor<T> compute_loss(Graph<T>& g, Tensor<T> logits, const std::vector<int32_t>& labels) {
    const int64_t K = logits.dim(1);  // C+1
    constexpr T kEps = T(1e-5);

    Tensor<T> ce = softmax_cross_entropy(g, logits, labels);

    // one-hot reference, constant
    Tensor<T> onehot = Tensor<T>::zeros(logits.shape());
    const int64_t B = logits.dim(0);
    int64_t inner = 1;
    for (size_t i = 2; i < logits.rank(); ++i) inner *= logits.dim(i);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < inner; ++i) {
            const int32_t lab = labels[static_cast<size_t>(b * inner + i)];
            onehot.values()[static_cast<size_t>((b * K + lab) * inner + i)] = T(1);
        }

    Tensor<T> p = softmax_channel(g, logits);
    Tensor<T> num_all = sum_per_channel(g, mul(g, p, onehot));           // [K]
    Tensor<T> den_all = add(g, sum_per_channel(g, p), sum_per_channel(g, onehot));
    Tensor<T> num = slice1d(g, num_all, 1, K);  // drop background
    Tensor<T> den = slice1d(g, den_all, 1, K);
    Tensor<T> dice_per_cat = div(g, pointwise(g, pointwise(g, num, Unary::Scale, T(2)), Unary::AddC, kEps),
                                 pointwise(g, den, Unary::AddC, kEps));
    Tensor<T> mean_dice = pointwise(g, sum_all(g, dice_per_cat), Unary::Scale, T(1) / static_cast<T>(K - 1));
    Tensor<T> dice_loss = pointwise(g, pointwise(g, mean_dice, Unary::Scale, T(-1)), Unary::AddC, T(1));

    return add(g, ce, dice_loss);
}

// Sliding-window inference: stride patch/2, uniform logit averaging over
// overlaps, argmax. The volume must already be resampled and normalized.
template <typename T>
LabelVolume predict_volume(Model<T>& model, const Volume& vol, const std::string& modality) {
    if (!vol.normalized) throw DataError("predict_volume: volume must be normalized first");
    vol.validate();
    resolve_projection_key(model, modality);
    const int64_t P = model.cfg.patch_size;
    const int64_t K = model.cfg.num_categories + 1;
    auto patches = extract_grid_patches(vol, P, std::max<int64_t>(P / 2, 1));

    const std::array<int64_t, 3> padded{std::max(vol.shape[0], P), std::max(vol.shape[1], P),
                                        std::max(vol.shape[2], P)};
    std::vector<double> acc(static_cast<size_t>(padded[0] * padded[1] * padded[2] * K), 0.0);
    std::vector<int32_t> count(static_cast<size_t>(padded[0] * padded[1] * padded[2]), 0);

    for (const auto& patch : patches) {
        Graph<T> g;
        NoGradGuard<T> ng(g);
        std::vector<T> vals(patch.image.begin(), patch.image.end());
        Tensor<T> x = Tensor<T>::from({1, 1, P, P, P}, std::move(vals));
        Tensor<T> logits = forward(g, model, x, modality).logits;
        const T* lp = logits.data();
        for (int64_t z = 0; z < P; ++z)
            for (int64_t y = 0; y < P; ++y)
                for (int64_t x2 = 0; x2 < P; ++x2) {
                    const int64_t gx = patch.corner[0] + x2, gy = patch.corner[1] + y, gz = patch.corner[2] + z;
                    const int64_t gidx = (gz * padded[1] + gy) * padded[0] + gx;
                    for (int64_t k = 0; k < K; ++k)
                        acc[static_cast<size_t>(gidx * K + k)] +=
                            static_cast<double>(lp[((k * P + z) * P + y) * P + x2]);
                    count[static_cast<size_t>(gidx)]++;
                }
    }

    LabelVolume out;
    out.shape = vol.shape;
    out.spacing_mm = vol.spacing_mm;
    out.category_table.push_back("background");
    for (const auto& name : model.latents.category_names) out.category_table.push_back(name);
    out.labels.resize(static_cast<size_t>(vol.numel()));
    for (int64_t z = 0; z < vol.shape[2]; ++z)
        for (int64_t y = 0; y < vol.shape[1]; ++y)
            for (int64_t x = 0; x < vol.shape[0]; ++x) {
                const int64_t gidx = (z * padded[1] + y) * padded[0] + x;
                const double n = static_cast<double>(count[static_cast<size_t>(gidx)]);
                int32_t best = 0;
                double best_v = acc[static_cast<size_t>(gidx * K)] / n;
                for (int64_t k = 1; k < K; ++k) {
                    const double v = acc[static_cast<size_t>(gidx * K + k)] / n;
                    if (v > best_v) {
                        best_v = v;
                        best = static_cast<int32_t>(k);
                    }
                }
                out.at(x, y, z) = best;
            }
    return out;
}

// Controller-branch response for one (stage, category), upsampled back to
// patch resolution and min-max normalized to [0,1]. Constant maps become
// all-zero.
template <typename T>
Volume extract_saliency(Model<T>& model, const PatchSample& patch, const std::string& modality, int64_t stage,
                        int64_t category) {
    const int64_t P = model.cfg.patch_size;
    if (static_cast<int64_t>(patch.image.size()) != P * P * P)
        throw ShapeError("extract_saliency: patch does not match the model patch size");
    if (stage < 0 || stage >= static_cast<int64_t>(model.cfg.stages.size()))
        throw DataError("extract_saliency: stage out of range");
    if (category < 0 || category >= model.cfg.num_categories)
        throw DataError("extract_saliency: category out of range");

    Graph<T> g;
    NoGradGuard<T> ng(g);
    std::vector<T> vals(patch.image.begin(), patch.image.end());
    Tensor<T> x = Tensor<T>::from({1, 1, P, P, P}, std::move(vals));
    ForwardResult<T> res = forward(g, model, x, modality, true);
    Tensor<T> rec = res.saliency->stages.at(stage);
    const int64_t D = rec.dim(1), H = rec.dim(2), W = rec.dim(3);

    // pull out the category channel and upsample 2^stage times
    std::vector<T> ch(rec.values().begin() + category * D * H * W,
                      rec.values().begin() + (category + 1) * D * H * W);
    Tensor<T> m = Tensor<T>::from({1, 1, D, H, W}, std::move(ch));
    for (int64_t s = 0; s < stage; ++s) m = upsample_trilinear2(g, m);
    if (m.dim(2) != P) throw ShapeError("extract_saliency: internal resolution mismatch");

    T lo = m.values()[0], hi = m.values()[0];
    for (T v : m.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Volume out;
    out.shape = {P, P, P};
    out.spacing_mm = {2.0, 2.0, 2.0};
    out.modality = (modality == "CT" || modality == "MR" || modality == "PET") ? modality : "CT";
    out.normalized = true;
    out.data.resize(static_cast<size_t>(P * P * P));
    const T range = hi - lo;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = range > T(1e-12) ? static_cast<float>((m.values()[i] - lo) / range) : 0.0f;
    return out;
}

}  // namespace mpum
