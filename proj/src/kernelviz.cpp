#include "mpum/kernelviz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "mpum/linalg.hpp"
#include "mpum/rng.hpp"

namespace mpum {

std::vector<KernelPointSet> flatten_kernels(Model<float>& model, const std::vector<std::string>& modalities,
                                            const std::vector<int64_t>& stages) {
    if (model.cfg.strategy != "projection")
        throw DataError("flatten_kernels: the " + model.cfg.strategy +
                        " strategy has no per-modality kernels to compare");
    if (modalities.empty() || stages.empty()) throw DataError("flatten_kernels: nothing requested");

    std::vector<KernelPointSet> out;
    for (int64_t stage : stages) {
        if (stage < 0 || stage >= static_cast<int64_t>(model.cfg.stages.size()))
            throw DataError("flatten_kernels: stage " + std::to_string(stage) + " out of range");
        KernelPointSet set;
        set.stage = stage;
        const int64_t row_len = model.cfg.stages[static_cast<size_t>(stage)] * 27;
        for (const auto& modality : modalities) {
            Graph<float> g;
            NoGradGuard<float> ng(g);
            Tensor<float> mf = project_latent(g, model.latents, model.projections, modality);
            Tensor<float> kernels = generate_kernels(g, mf, model.fog, static_cast<size_t>(stage));
            const float* kp = kernels.data();
            for (int64_t c = 0; c < model.cfg.num_categories; ++c) {
                std::vector<double> row(static_cast<size_t>(row_len));
                for (int64_t i = 0; i < row_len; ++i) row[static_cast<size_t>(i)] = kp[c * row_len + i];
                set.points.push_back(std::move(row));
                set.tags.push_back({modality, stage, model.latents.category_names[static_cast<size_t>(c)]});
            }
        }
        out.push_back(std::move(set));
    }
    return out;
}

std::vector<std::array<double, 2>> pca2d(const std::vector<std::vector<double>>& points) {
    const size_t n = points.size();
    if (n < 3) throw DataError("pca2d: need at least 3 points, got " + std::to_string(n));
    const size_t d = points[0].size();
    for (const auto& p : points)
        if (p.size() != d) throw ShapeError("pca2d: inconsistent point dimensions");

    std::vector<double> mean(d, 0.0);
    for (const auto& p : points)
        for (size_t j = 0; j < d; ++j) mean[j] += p[j];
    for (double& m : mean) m /= static_cast<double>(n);

    // Gram matrix of the centered points
    Mat gram(static_cast<int64_t>(n), static_cast<int64_t>(n));
    for (size_t i = 0; i < n; ++i)
        for (size_t k = i; k < n; ++k) {
            double acc = 0;
            for (size_t j = 0; j < d; ++j) acc += (points[i][j] - mean[j]) * (points[k][j] - mean[j]);
            gram.at(static_cast<int64_t>(i), static_cast<int64_t>(k)) = acc;
            gram.at(static_cast<int64_t>(k), static_cast<int64_t>(i)) = acc;
        }

    EigenResult eig = eigen_symmetric(gram);
    std::vector<std::array<double, 2>> coords(n, {0.0, 0.0});
    for (int axis = 0; axis < 2; ++axis) {
        const double lambda = eig.values[static_cast<size_t>(axis)];
        if (lambda <= 1e-12) continue;  // degenerate direction stays zero
        const double scale = std::sqrt(lambda);
        std::vector<double> score(n);
        for (size_t i = 0; i < n; ++i)
            score[i] = eig.vectors.at(static_cast<int64_t>(i), axis) * scale;

        // loading = X^T u / sqrt(lambda); orient its largest entry positive
        double best = 0;
        double best_abs = -1;
        for (size_t j = 0; j < d; ++j) {
            double load = 0;
            for (size_t i = 0; i < n; ++i)
                load += (points[i][j] - mean[j]) * eig.vectors.at(static_cast<int64_t>(i), axis);
            if (std::abs(load) > best_abs) {
                best_abs = std::abs(load);
                best = load;
            }
        }
        const double sign = best < 0 ? -1.0 : 1.0;
        for (size_t i = 0; i < n; ++i) coords[i][static_cast<size_t>(axis)] = sign * score[i];
    }
    return coords;
}

namespace {

std::vector<std::vector<double>> pairwise_sq_dist(const std::vector<std::vector<double>>& points) {
    const size_t n = points.size();
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double acc = 0;
            for (size_t k = 0; k < points[i].size(); ++k) {
                const double diff = points[i][k] - points[j][k];
                acc += diff * diff;
            }
            d[i][j] = d[j][i] = acc;
        }
    return d;
}

}  // namespace

ConditionalAffinities conditional_affinities(const std::vector<std::vector<double>>& points, double perplexity) {
    const size_t n = points.size();
    if (n < 5) throw DataError("tsne2d: need at least 5 points, got " + std::to_string(n));
    for (const auto& p : points)
        if (p.size() != points[0].size()) throw ShapeError("tsne2d: inconsistent point dimensions");
    if (perplexity <= 0) throw DataError("tsne2d: perplexity must be positive");

    ConditionalAffinities out;
    out.used_perplexity = std::min(perplexity, static_cast<double>(n - 1) / 3.0);
    if (out.used_perplexity < 1.0) throw DataError("tsne2d: perplexity infeasible even after reduction");
    const double target_h = std::log(out.used_perplexity);

    const auto dist = pairwise_sq_dist(points);
    out.p.assign(n, std::vector<double>(n, 0.0));
    out.beta.assign(n, 1.0);

    for (size_t i = 0; i < n; ++i) {
        double beta = 1.0, beta_lo = -std::numeric_limits<double>::infinity(),
               beta_hi = std::numeric_limits<double>::infinity();
        std::vector<double> row(n, 0.0);
        for (int iter = 0; iter < 200; ++iter) {
            double sum = 0;
            for (size_t j = 0; j < n; ++j) {
                row[j] = (j == i) ? 0.0 : std::exp(-beta * dist[i][j]);
                sum += row[j];
            }
            if (sum <= 0) {  // beta too large for an isolated point
                beta_hi = beta;
                beta = (std::isinf(beta_lo)) ? beta / 2 : (beta + beta_lo) / 2;
                continue;
            }
            double dsum = 0;
            for (size_t j = 0; j < n; ++j) dsum += row[j] * dist[i][j];
            const double h = std::log(sum) + beta * dsum / sum;
            const double diff = h - target_h;
            if (std::abs(diff) < 1e-5) break;
            if (diff > 0) {  // entropy too high: sharpen
                beta_lo = beta;
                beta = std::isinf(beta_hi) ? beta * 2 : (beta + beta_hi) / 2;
            } else {
                beta_hi = beta;
                beta = std::isinf(beta_lo) ? beta / 2 : (beta + beta_lo) / 2;
            }
        }
        double sum = 0;
        for (size_t j = 0; j < n; ++j) {
            row[j] = (j == i) ? 0.0 : std::exp(-beta * dist[i][j]);
            sum += row[j];
        }
        if (sum <= 0) throw NumericError("tsne2d: affinity calibration collapsed at point " + std::to_string(i));
        for (size_t j = 0; j < n; ++j) out.p[i][j] = row[j] / sum;
        out.beta[i] = beta;
    }
    return out;
}

TsneResult tsne2d(const std::vector<std::vector<double>>& points, double perplexity, int64_t iterations,
                  uint64_t seed) {
    if (iterations < 1) throw DataError("tsne2d: need at least one iteration");
    const size_t n = points.size();
    ConditionalAffinities cond = conditional_affinities(points, perplexity);

    // symmetrized joint distribution with the usual floor
    std::vector<std::vector<double>> p(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            p[i][j] = std::max((cond.p[i][j] + cond.p[j][i]) / (2.0 * static_cast<double>(n)), 1e-12);
    for (size_t i = 0; i < n; ++i) p[i][i] = 1e-12;

    Rng rng(seed);
    std::vector<std::array<double, 2>> y(n), inc(n, {0.0, 0.0}), gains(n, {1.0, 1.0});
    for (auto& yi : y) yi = {rng.normal() * 1e-2, rng.normal() * 1e-2};

    constexpr int64_t kExaggerationEnd = 250;
    constexpr double kExaggeration = 12.0;
    // n/exaggeration keeps the early-exaggeration phase stable at the tiny
    // point counts kernels produce; a flat 200 scatters them irrecoverably
    const double kEta = std::max(static_cast<double>(n) / kExaggeration, 2.0);

    TsneResult res;
    std::vector<std::vector<double>> num(n, std::vector<double>(n, 0.0));
    for (int64_t iter = 0; iter < iterations; ++iter) {
        // student-t kernel in the embedding
        double z = 0;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = i + 1; j < n; ++j) {
                const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
                const double v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i][j] = num[j][i] = v;
                z += 2.0 * v;
            }
        z = std::max(z, 1e-300);

        const double exaggeration = iter < kExaggerationEnd ? kExaggeration : 1.0;
        const double momentum = iter < kExaggerationEnd ? 0.5 : 0.8;

        double kl = 0;
        for (size_t i = 0; i < n; ++i) {
            double gx = 0, gy = 0;
            for (size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double q = std::max(num[i][j] / z, 1e-12);
                kl += p[i][j] * std::log(p[i][j] / q);
                const double coeff = 4.0 * (exaggeration * p[i][j] - q) * num[i][j];
                gx += coeff * (y[i][0] - y[j][0]);
                gy += coeff * (y[i][1] - y[j][1]);
            }
            // adaptive gains, then momentum step
            gains[i][0] = std::max(0.01, (gx > 0) == (inc[i][0] > 0) ? gains[i][0] * 0.8 : gains[i][0] + 0.2);
            gains[i][1] = std::max(0.01, (gy > 0) == (inc[i][1] > 0) ? gains[i][1] * 0.8 : gains[i][1] + 0.2);
            inc[i][0] = momentum * inc[i][0] - kEta * gains[i][0] * gx;
            inc[i][1] = momentum * inc[i][1] - kEta * gains[i][1] * gy;
        }
        res.kl_trace.push_back(kl);

        double mx = 0, my = 0;
        for (size_t i = 0; i < n; ++i) {
            y[i][0] += inc[i][0];
            y[i][1] += inc[i][1];
            mx += y[i][0];
            my += y[i][1];
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (auto& yi : y) {
            yi[0] -= mx;
            yi[1] -= my;
        }
    }
    res.coords = std::move(y);
    return res;
}

double silhouette_score(const std::vector<std::array<double, 2>>& coords, const std::vector<int32_t>& labels) {
    const size_t n = coords.size();
    if (labels.size() != n) throw ShapeError("silhouette_score: label count does not match points");
    if (n < 2) throw DataError("silhouette_score: need at least 2 points");
    std::map<int32_t, int64_t> sizes;
    for (int32_t l : labels) sizes[l]++;
    if (sizes.size() < 2) throw DataError("silhouette_score: need at least 2 clusters");

    auto dist = [&](size_t i, size_t j) {
        const double dx = coords[i][0] - coords[j][0], dy = coords[i][1] - coords[j][1];
        return std::sqrt(dx * dx + dy * dy);
    };

    double total = 0;
    for (size_t i = 0; i < n; ++i) {
        if (sizes[labels[i]] == 1) continue;  // singleton clusters score 0
        std::map<int32_t, double> sum;
        for (size_t j = 0; j < n; ++j)
            if (j != i) sum[labels[j]] += dist(i, j);
        const double a = sum[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (const auto& [label, s] : sum)
            if (label != labels[i]) b = std::min(b, s / static_cast<double>(sizes[label]));
        const double denom = std::max(a, b);
        if (denom > 0) total += (b - a) / denom;
    }
    return total / static_cast<double>(n);
}

void write_embedding_csv(const std::string& path, const std::vector<KernelPointTag>& tags,
                         const std::vector<std::array<double, 2>>& coords, const std::string& method) {
    if (tags.size() != coords.size()) throw ShapeError("write_embedding_csv: tag and coordinate counts differ");
    std::ofstream os(path);
    if (!os) throw DataError("write_embedding_csv: cannot open '" + path + "'");
    os << "modality,stage,category,x,y,method\n";
    os.precision(12);
    for (size_t i = 0; i < tags.size(); ++i)
        os << tags[i].modality << ',' << tags[i].stage << ',' << tags[i].category << ',' << coords[i][0] << ','
           << coords[i][1] << ',' << method << '\n';
    if (!os) throw DataError("write_embedding_csv: failed writing '" + path + "'");
}

void write_kl_trace_csv(const std::string& path, const std::vector<double>& trace) {
    std::ofstream os(path);
    if (!os) throw DataError("write_kl_trace_csv: cannot open '" + path + "'");
    os << "iteration,kl\n";
    os.precision(12);
    for (size_t i = 0; i < trace.size(); ++i) os << i << ',' << trace[i] << '\n';
    if (!os) throw DataError("write_kl_trace_csv: failed writing '" + path + "'");
}

}  // namespace mpum
