#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mpum/linalg.hpp"
#include "mpum/rng.hpp"
#include "mpum/tensor.hpp"

namespace mpum {

// One learnable latent row per category.
template <typename T>
struct LatentTable {
    Tensor<T> latents;  // [C, d_T]
    std::vector<std::string> category_names;

    int64_t num_categories() const { return latents.dim(0); }
    int64_t latent_dim() const { return latents.dim(1); }

    static LatentTable random(std::vector<std::string> names, int64_t d_T, Rng& rng, T stddev = T(0.02)) {
        if (names.empty()) throw DataError("LatentTable: need at least one category");
        if (d_T < 1) throw DataError("LatentTable: latent dimension must be >= 1");
        LatentTable t;
        t.latents = Tensor<T>::randn({static_cast<int64_t>(names.size()), d_T}, rng, stddev, true);
        t.category_names = std::move(names);
        return t;
    }

    int64_t index_of(const std::string& name) const {
        for (size_t i = 0; i < category_names.size(); ++i)
            if (category_names[i] == name) return static_cast<int64_t>(i);
        throw DataError("LatentTable: unknown category '" + name + "'");
    }
};

// Projection matrices keyed by modality id (CT/MR/PET/SHARED) and by
// external source id. All first extents equal the latent dimension.
template <typename T>
struct ProjectionSet {
    std::map<std::string, Tensor<T>> modality;  // [d_T, d_m]
    std::map<std::string, Tensor<T>> external;  // [d_T, d_i]

    Tensor<T>& require_modality(const std::string& id) {
        auto it = modality.find(id);
        if (it == modality.end()) throw DataError("ProjectionSet: unknown modality '" + id + "'");
        return it->second;
    }
    const Tensor<T>& require_modality(const std::string& id) const {
        return const_cast<ProjectionSet*>(this)->require_modality(id);
    }

    void add_modality(const std::string& id, int64_t d_T, int64_t d_m, Rng& rng, T stddev = T(0.2)) {
        if (modality.count(id)) throw DataError("ProjectionSet: duplicate modality '" + id + "'");
        modality.emplace(id, Tensor<T>::randn({d_T, d_m}, rng, stddev, true));
    }
};

template <typename T>
struct ExternalEmbeddingSet {
    std::string source_id;
    int64_t dim = 0;
    std::map<std::string, std::vector<T>> rows;  // category name -> vector of length dim
};

// M_m = T . P_m, one row per category.
template <typename T>
Tensor<T> project_latent(Graph<T>& g, const LatentTable<T>& table, const ProjectionSet<T>& proj,
                         const std::string& modality) {
    return matmul(g, table.latents, proj.require_modality(modality));
}

// Ridge least-squares inverse of the projection: the minimizer of
// |t.P - m|^2 + ridge*|t|^2, from the normal equations
// (P.P^T + ridge I) t^T = P.m^T. Always solved in double.
inline std::vector<double> reconstruct_latent(const std::vector<double>& m, const Mat& p, double ridge) {
    if (ridge < 0) throw DataError("reconstruct_latent: ridge must be >= 0");
    const int64_t d_T = p.rows, d_m = p.cols;
    if (static_cast<int64_t>(m.size()) != d_m)
        throw ShapeError("reconstruct_latent: feature length " + std::to_string(m.size()) +
                         " does not match projection columns " + std::to_string(d_m));
    Mat a(d_T, d_T);
    for (int64_t i = 0; i < d_T; ++i)
        for (int64_t j = i; j < d_T; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < d_m; ++k) acc += p.at(i, k) * p.at(j, k);
            a.at(i, j) = acc;
            a.at(j, i) = acc;
        }
    for (int64_t i = 0; i < d_T; ++i) a.at(i, i) += ridge;
    Mat b(d_T, 1);
    for (int64_t i = 0; i < d_T; ++i) {
        double acc = 0;
        for (int64_t k = 0; k < d_m; ++k) acc += p.at(i, k) * m[static_cast<size_t>(k)];
        b.at(i, 0) = acc;
    }
    Mat x = solve_linear(std::move(a), std::move(b));
    return x.v;
}

template <typename T>
Mat to_mat(const Tensor<T>& t) {
    if (t.rank() != 2) throw ShapeError("to_mat: expected rank-2 tensor");
    Mat m(t.dim(0), t.dim(1));
    for (size_t i = 0; i < t.values().size(); ++i) m.v[i] = static_cast<double>(t.values()[i]);
    return m;
}

// Anchors the latent table as the mean of per-source ridge reconstructions.
// Every set must cover every category at its declared dimension.
template <typename T>
LatentTable<T> aggregate_external(const std::vector<ExternalEmbeddingSet<T>>& sets, const ProjectionSet<T>& proj,
                                  const std::vector<std::string>& category_names, double ridge) {
    if (sets.empty()) throw DataError("aggregate_external: need at least one external set");
    if (category_names.empty()) throw DataError("aggregate_external: empty category list");

    int64_t d_T = -1;
    std::vector<Mat> pmats;
    for (const auto& set : sets) {
        auto it = proj.external.find(set.source_id);
        if (it == proj.external.end())
            throw DataError("aggregate_external: no projection for source '" + set.source_id + "'");
        Mat pm = to_mat(it->second);
        if (d_T < 0) d_T = pm.rows;
        if (pm.rows != d_T) throw ShapeError("aggregate_external: latent dimensions disagree across sources");
        if (pm.cols != set.dim)
            throw ShapeError("aggregate_external: projection for '" + set.source_id + "' has " +
                             std::to_string(pm.cols) + " columns, set dimension is " + std::to_string(set.dim));
        for (const auto& name : category_names) {
            auto row = set.rows.find(name);
            if (row == set.rows.end())
                throw DataError("aggregate_external: source '" + set.source_id + "' is missing category '" + name +
                                "'");
            if (static_cast<int64_t>(row->second.size()) != set.dim)
                throw ShapeError("aggregate_external: source '" + set.source_id + "' category '" + name +
                                 "' has wrong vector length");
        }
        pmats.push_back(std::move(pm));
    }

    const int64_t C = static_cast<int64_t>(category_names.size());
    LatentTable<T> out;
    out.category_names = category_names;
    out.latents = Tensor<T>::zeros({C, d_T}, true);
    for (int64_t c = 0; c < C; ++c) {
        std::vector<double> acc(static_cast<size_t>(d_T), 0.0);
        for (size_t s = 0; s < sets.size(); ++s) {
            const auto& vec = sets[s].rows.at(category_names[static_cast<size_t>(c)]);
            std::vector<double> m(vec.begin(), vec.end());
            std::vector<double> t = reconstruct_latent(m, pmats[s], ridge);
            for (int64_t i = 0; i < d_T; ++i) acc[static_cast<size_t>(i)] += t[static_cast<size_t>(i)];
        }
        for (int64_t i = 0; i < d_T; ++i)
            out.latents.values()[static_cast<size_t>(c * d_T + i)] =
                static_cast<T>(acc[static_cast<size_t>(i)] / static_cast<double>(sets.size()));
    }
    return out;
}

// Two affine layers with a leaky-relu between; emits H_s*27 kernel weights
// per category for one stage.
template <typename T>
struct FogStage {
    Tensor<T> w1, b1, w2, b2;
    int64_t channels = 0;  // H_s

    static FogStage init(int64_t d_m, int64_t hidden, int64_t channels, Rng& rng) {
        FogStage s;
        s.channels = channels;
        const T s1 = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_m)));
        const T s2 = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hidden)));
        s.w1 = Tensor<T>::randn({d_m, hidden}, rng, s1, true);
        s.b1 = Tensor<T>::zeros({hidden}, true);
        s.w2 = Tensor<T>::randn({hidden, channels * 27}, rng, s2, true);
        s.b2 = Tensor<T>::zeros({channels * 27}, true);
        return s;
    }
};

template <typename T>
struct FeatureOperatorGenerator {
    std::vector<FogStage<T>> stages;

    static FeatureOperatorGenerator init(int64_t d_m, int64_t hidden, const std::vector<int64_t>& stage_channels,
                                         Rng& rng) {
        FeatureOperatorGenerator fog;
        for (int64_t h : stage_channels) fog.stages.push_back(FogStage<T>::init(d_m, hidden, h, rng));
        return fog;
    }
};

// Reads {"source_id": str, "dim": int, "embeddings": {name: [float,...]}}.
// Strict: every vector must have length dim.
ExternalEmbeddingSet<double> load_external_embeddings(const std::string& path);

// modality_features [C, d_m] -> kernels [C, H_s, 3, 3, 3], differentiable
// through the features and the FOG parameters.
template <typename T>
Tensor<T> generate_kernels(Graph<T>& g, Tensor<T> modality_features, const FeatureOperatorGenerator<T>& fog,
                           size_t stage) {
    if (stage >= fog.stages.size())
        throw DataError("generate_kernels: stage " + std::to_string(stage) + " has no registered parameters");
    const FogStage<T>& s = fog.stages[stage];
    const int64_t C = modality_features.dim(0);
    Tensor<T> h = pointwise(g, add_rowvec(g, matmul(g, modality_features, s.w1), s.b1), Unary::LeakyRelu);
    Tensor<T> flat = add_rowvec(g, matmul(g, h, s.w2), s.b2);  // [C, H_s*27]
    return reshape(g, flat, {C, s.channels, 3, 3, 3});
}

}  // namespace mpum
