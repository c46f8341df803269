#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mpum/error.hpp"

namespace mpum {

// Row-major dense matrix of doubles, minimal surface for the solvers below.
struct Mat {
    int64_t rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), 0.0) {}

    double& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
    double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: inner extents disagree");
    Mat out(a.rows, b.cols);
    for (int64_t i = 0; i < a.rows; ++i)
        for (int64_t k = 0; k < a.cols; ++k) {
            const double av = a.at(i, k);
            for (int64_t j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(k, j);
        }
    return out;
}

inline Mat transpose(const Mat& a) {
    Mat out(a.cols, a.rows);
    for (int64_t i = 0; i < a.rows; ++i)
        for (int64_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

// Solves A X = B in place via Gaussian elimination with partial pivoting.
// A is n x n, B is n x k; returns X. Throws NumericError when a pivot
// underflows, which signals a singular system.
inline Mat solve_linear(Mat a, Mat b) {
    if (a.rows != a.cols) throw ShapeError("solve_linear: matrix must be square");
    if (a.rows != b.rows) throw ShapeError("solve_linear: right-hand side row count mismatch");
    const int64_t n = a.rows, k = b.cols;
    for (int64_t col = 0; col < n; ++col) {
        int64_t piv = col;
        double best = std::abs(a.at(col, col));
        for (int64_t r = col + 1; r < n; ++r) {
            const double m = std::abs(a.at(r, col));
            if (m > best) {
                best = m;
                piv = r;
            }
        }
        if (best < 1e-12) throw NumericError("solve_linear: singular system (pivot " + std::to_string(best) + ")");
        if (piv != col) {
            for (int64_t j = 0; j < n; ++j) std::swap(a.at(col, j), a.at(piv, j));
            for (int64_t j = 0; j < k; ++j) std::swap(b.at(col, j), b.at(piv, j));
        }
        const double inv = 1.0 / a.at(col, col);
        for (int64_t r = col + 1; r < n; ++r) {
            const double f = a.at(r, col) * inv;
            if (f == 0.0) continue;
            for (int64_t j = col; j < n; ++j) a.at(r, j) -= f * a.at(col, j);
            for (int64_t j = 0; j < k; ++j) b.at(r, j) -= f * b.at(col, j);
        }
    }
    for (int64_t col = n - 1; col >= 0; --col) {
        const double inv = 1.0 / a.at(col, col);
        for (int64_t j = 0; j < k; ++j) b.at(col, j) *= inv;
        for (int64_t r = 0; r < col; ++r) {
            const double f = a.at(r, col);
            if (f == 0.0) continue;
            for (int64_t j = 0; j < k; ++j) b.at(r, j) -= f * b.at(col, j);
        }
    }
    return b;
}

struct EigenResult {
    std::vector<double> values;  // descending
    Mat vectors;                 // column j is the eigenvector of values[j]
};

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Eigenpairs are
// returned sorted by descending eigenvalue.
inline EigenResult eigen_symmetric(Mat a, int max_sweeps = 100, double tol = 1e-12) {
    if (a.rows != a.cols) throw ShapeError("eigen_symmetric: matrix must be square");
    const int64_t n = a.rows;
    Mat v(n, n);
    for (int64_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
        if (off < tol * tol) break;
        for (int64_t p = 0; p < n - 1; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = a.at(p, p), aqq = a.at(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t i = 0; i < n; ++i) {
                    const double aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (int64_t j = 0; j < n; ++j) {
                    const double apj = a.at(p, j), aqj = a.at(q, j);
                    a.at(p, j) = c * apj - s * aqj;
                    a.at(q, j) = s * apj + c * aqj;
                }
                for (int64_t i = 0; i < n; ++i) {
                    const double vip = v.at(i, p), viq = v.at(i, q);
                    v.at(i, p) = c * vip - s * viq;
                    v.at(i, q) = s * vip + c * viq;
                }
            }
    }

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) { return a.at(x, x) > a.at(y, y); });

    EigenResult res;
    res.values.resize(static_cast<size_t>(n));
    res.vectors = Mat(n, n);
    for (int64_t j = 0; j < n; ++j) {
        const int64_t src = order[static_cast<size_t>(j)];
        res.values[static_cast<size_t>(j)] = a.at(src, src);
        for (int64_t i = 0; i < n; ++i) res.vectors.at(i, j) = v.at(i, src);
    }
    return res;
}

}  // namespace mpum
