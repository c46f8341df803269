#include "mpum/metrics.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "mpum/edt.hpp"

namespace mpum {

void MaskPair::validate() const {
    const int64_t n = shape[0] * shape[1] * shape[2];
    if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1) throw ShapeError("MaskPair: empty extent");
    if (static_cast<int64_t>(pred.size()) != n || static_cast<int64_t>(ref.size()) != n)
        throw ShapeError("MaskPair: mask sizes do not match the shape");
    for (double s : spacing_mm)
        if (!(s > 0)) throw DataError("MaskPair: spacing must be strictly positive");
}

double dice(const MaskPair& pair) {
    pair.validate();
    int64_t a = 0, b = 0, inter = 0;
    for (size_t i = 0; i < pair.pred.size(); ++i) {
        const bool pa = pair.pred[i] != 0, pb = pair.ref[i] != 0;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    if (a == 0 && b == 0) return 1.0;
    if (a == 0 || b == 0) return 0.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::vector<uint8_t> boundary_voxels(const std::vector<uint8_t>& mask, const std::array<int64_t, 3>& shape) {
    const int64_t nx = shape[0], ny = shape[1], nz = shape[2];
    std::vector<uint8_t> out(mask.size(), 0);
    auto inside = [&](int64_t x, int64_t y, int64_t z) {
        if (x < 0 || x >= nx || y < 0 || y >= ny || z < 0 || z >= nz) return false;  // border is background
        return mask[static_cast<size_t>((z * ny + y) * nx + x)] != 0;
    };
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                if (!inside(x, y, z)) continue;
                const bool edge = !inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) ||
                                  !inside(x, y + 1, z) || !inside(x, y, z - 1) || !inside(x, y, z + 1);
                if (edge) out[static_cast<size_t>((z * ny + y) * nx + x)] = 1;
            }
    return out;
}

double surface_dice(const MaskPair& pair, double tolerance_mm) {
    pair.validate();
    if (tolerance_mm < 0) throw DataError("surface_dice: tolerance must be >= 0");
    bool a_empty = true, b_empty = true;
    for (size_t i = 0; i < pair.pred.size() && (a_empty || b_empty); ++i) {
        if (pair.pred[i]) a_empty = false;
        if (pair.ref[i]) b_empty = false;
    }
    if (a_empty && b_empty) return 1.0;
    if (a_empty || b_empty) return 0.0;

    const std::vector<uint8_t> ba = boundary_voxels(pair.pred, pair.shape);
    const std::vector<uint8_t> bb = boundary_voxels(pair.ref, pair.shape);
    const std::vector<double> da = edt_squared(ba, pair.shape, pair.spacing_mm);
    const std::vector<double> db = edt_squared(bb, pair.shape, pair.spacing_mm);

    const double tol2 = tolerance_mm * tolerance_mm;
    int64_t na = 0, nb = 0, hit_a = 0, hit_b = 0;
    for (size_t i = 0; i < ba.size(); ++i) {
        if (ba[i]) {
            ++na;
            if (db[i] <= tol2) ++hit_a;
        }
        if (bb[i]) {
            ++nb;
            if (da[i] <= tol2) ++hit_b;
        }
    }
    return static_cast<double>(hit_a + hit_b) / static_cast<double>(na + nb);
}

double region_volume(const LabelVolume& labels, int32_t region) {
    labels.validate();
    if (region < 0 || region >= static_cast<int32_t>(labels.category_table.size()))
        throw DataError("region_volume: region " + std::to_string(region) + " is not in the category table");
    int64_t count = 0;
    for (int32_t v : labels.labels) count += v == region;
    return static_cast<double>(count) * labels.spacing_mm[0] * labels.spacing_mm[1] * labels.spacing_mm[2];
}

OverlapReport overlap_report(const LabelVolume& lesion, const LabelVolume& atlas, const std::string& lesion_name) {
    lesion.validate();
    atlas.validate();
    if (lesion.shape != atlas.shape) throw ShapeError("overlap_report: grids have different extents");
    if (lesion.spacing_mm != atlas.spacing_mm) throw ShapeError("overlap_report: grids have different spacing");

    const double voxel_mm3 = atlas.spacing_mm[0] * atlas.spacing_mm[1] * atlas.spacing_mm[2];
    std::vector<int64_t> overlap(atlas.category_table.size(), 0);
    std::vector<int64_t> total(atlas.category_table.size(), 0);
    for (size_t i = 0; i < atlas.labels.size(); ++i) {
        const int32_t r = atlas.labels[i];
        total[static_cast<size_t>(r)]++;
        if (lesion.labels[i] != 0) overlap[static_cast<size_t>(r)]++;
    }

    OverlapReport report;
    report.lesion_name = lesion_name;
    for (size_t r = 1; r < atlas.category_table.size(); ++r)
        if (overlap[r] > 0)
            report.rows.push_back({atlas.category_table[r], static_cast<double>(overlap[r]) * voxel_mm3,
                                   static_cast<double>(total[r]) * voxel_mm3});
    std::stable_sort(report.rows.begin(), report.rows.end(),
                     [](const OverlapRow& a, const OverlapRow& b) { return a.overlap_mm3 > b.overlap_mm3; });
    return report;
}

void write_overlap_csv(const OverlapReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "region,overlap_mm3,region_total_mm3\n";
    for (const auto& row : report.rows)
        out << row.region << "," << row.overlap_mm3 << "," << row.region_total_mm3 << "\n";
}

void write_overlap_json(const OverlapReport& report, const std::string& path) {
    nlohmann::json j;
    j["lesion"] = report.lesion_name;
    j["rows"] = nlohmann::json::array();
    for (const auto& row : report.rows)
        j["rows"].push_back({{"region", row.region},
                             {"overlap_mm3", row.overlap_mm3},
                             {"region_total_mm3", row.region_total_mm3}});
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace mpum
