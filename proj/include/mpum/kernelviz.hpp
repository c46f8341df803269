#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mpum/network.hpp"

namespace mpum {

struct KernelPointTag {
    std::string modality;
    int64_t stage = 0;
    std::string category;
};

struct KernelPointSet {
    int64_t stage = 0;
    std::vector<std::vector<double>> points;  // n x (H_s * 27)
    std::vector<KernelPointTag> tags;
};

// One row per (modality, category) at each requested stage: the flattened
// controller kernel. Only projection models carry per-modality kernels.
std::vector<KernelPointSet> flatten_kernels(Model<float>& model, const std::vector<std::string>& modalities,
                                            const std::vector<int64_t>& stages);

// Classical PCA to 2D through the Gram matrix; coordinates are the top-2
// principal scores. Sign convention: the largest-magnitude loading of each
// axis is positive. Zero-variance directions give zero columns.
std::vector<std::array<double, 2>> pca2d(const std::vector<std::vector<double>>& points);

// Per-point conditional Gaussian affinities calibrated to the target
// perplexity by binary search on the entropy (tolerance 1e-5), plus the
// precisions found. Exposed for the calibration invariant.
struct ConditionalAffinities {
    std::vector<std::vector<double>> p;  // row-stochastic, zero diagonal
    std::vector<double> beta;            // 1 / (2 sigma_i^2)
    double used_perplexity = 0;          // after the (n-1)/3 reduction
};
ConditionalAffinities conditional_affinities(const std::vector<std::vector<double>>& points, double perplexity);

struct TsneResult {
    std::vector<std::array<double, 2>> coords;
    std::vector<double> kl_trace;  // KL(P||Q) per iteration, unexaggerated P
};

// Exact symmetric-SNE: early exaggeration x12 for 250 iterations, momentum
// 0.5 switching to 0.8 at iteration 250, adaptive gains, seeded N(0, 1e-4)
// init.
TsneResult tsne2d(const std::vector<std::vector<double>>& points, double perplexity = 30.0,
                  int64_t iterations = 1000, uint64_t seed = 0);

// Mean silhouette over all points; labels give the cluster ids.
double silhouette_score(const std::vector<std::array<double, 2>>& coords, const std::vector<int32_t>& labels);

void write_embedding_csv(const std::string& path, const std::vector<KernelPointTag>& tags,
                         const std::vector<std::array<double, 2>>& coords, const std::string& method);
void write_kl_trace_csv(const std::string& path, const std::vector<double>& trace);

}  // namespace mpum
