#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

namespace mpum {

constexpr double kEdtInf = std::numeric_limits<double>::infinity();

namespace detail {

// 1-D squared-distance transform via the lower envelope of parabolas.
// f holds squared distances so far (kEdtInf where no feature); out gets
// min_q ((i-q)*spacing)^2 + f[q]. Exact for representable spacings.
inline void edt1d_sq(const std::vector<double>& f, double spacing, std::vector<double>& out,
                     std::vector<int64_t>& v, std::vector<double>& z) {
    const int64_t n = static_cast<int64_t>(f.size());
    out.assign(static_cast<size_t>(n), kEdtInf);
    v.assign(static_cast<size_t>(n), 0);
    z.assign(static_cast<size_t>(n + 1), 0.0);
    const double s2 = spacing * spacing;

    auto intersect = [&](int64_t p, int64_t q) {
        // abscissa (voxel units) where the parabolas rooted at p and q cross
        return ((f[static_cast<size_t>(q)] - f[static_cast<size_t>(p)]) / s2 +
                static_cast<double>(q * q - p * p)) /
               (2.0 * static_cast<double>(q - p));
    };

    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (f[static_cast<size_t>(q)] == kEdtInf) continue;
        while (k >= 0 && intersect(v[static_cast<size_t>(k)], q) <= z[static_cast<size_t>(k)]) --k;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kEdtInf;
        } else {
            const double x = intersect(v[static_cast<size_t>(k)], q);
            ++k;
            v[static_cast<size_t>(k)] = q;
            z[static_cast<size_t>(k)] = x;
        }
        z[static_cast<size_t>(k + 1)] = kEdtInf;
    }
    if (k < 0) return;  // no features on this line

    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        while (z[static_cast<size_t>(j + 1)] < static_cast<double>(q)) ++j;
        const double d = static_cast<double>(q - v[static_cast<size_t>(j)]) * spacing;
        out[static_cast<size_t>(q)] = d * d + f[static_cast<size_t>(v[static_cast<size_t>(j)])];
    }
}

}  // namespace detail

// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
// set voxel, with anisotropic spacing. Voxels with no feature anywhere get
// kEdtInf. Layout: x fastest, index (z*ny + y)*nx + x.
inline std::vector<double> edt_squared(const std::vector<uint8_t>& set, const std::array<int64_t, 3>& shape,
                                       const std::array<double, 3>& spacing) {
    const int64_t nx = shape[0], ny = shape[1], nz = shape[2];
    std::vector<double> d(set.size());
    for (size_t i = 0; i < set.size(); ++i) d[i] = set[i] ? 0.0 : kEdtInf;

    std::vector<double> line, out;
    std::vector<int64_t> v;
    std::vector<double> z;

    // x axis
    line.resize(static_cast<size_t>(nx));
    for (int64_t zz = 0; zz < nz; ++zz)
        for (int64_t yy = 0; yy < ny; ++yy) {
            const int64_t base = (zz * ny + yy) * nx;
            for (int64_t x = 0; x < nx; ++x) line[static_cast<size_t>(x)] = d[static_cast<size_t>(base + x)];
            detail::edt1d_sq(line, spacing[0], out, v, z);
            for (int64_t x = 0; x < nx; ++x) d[static_cast<size_t>(base + x)] = out[static_cast<size_t>(x)];
        }
    // y axis
    line.resize(static_cast<size_t>(ny));
    for (int64_t zz = 0; zz < nz; ++zz)
        for (int64_t x = 0; x < nx; ++x) {
            for (int64_t yy = 0; yy < ny; ++yy)
                line[static_cast<size_t>(yy)] = d[static_cast<size_t>((zz * ny + yy) * nx + x)];
            detail::edt1d_sq(line, spacing[1], out, v, z);
            for (int64_t yy = 0; yy < ny; ++yy)
                d[static_cast<size_t>((zz * ny + yy) * nx + x)] = out[static_cast<size_t>(yy)];
        }
    // z axis
    line.resize(static_cast<size_t>(nz));
    for (int64_t yy = 0; yy < ny; ++yy)
        for (int64_t x = 0; x < nx; ++x) {
            for (int64_t zz = 0; zz < nz; ++zz)
                line[static_cast<size_t>(zz)] = d[static_cast<size_t>((zz * ny + yy) * nx + x)];
            detail::edt1d_sq(line, spacing[2], out, v, z);
            for (int64_t zz = 0; zz < nz; ++zz)
                d[static_cast<size_t>((zz * ny + yy) * nx + x)] = out[static_cast<size_t>(zz)];
        }
    return d;
}

}  // namespace mpum
