#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mpum/volume.hpp"

namespace mpum {

// Predicted/reference binary masks on one grid. Nonzero = inside.
struct MaskPair {
    std::vector<uint8_t> pred;
    std::vector<uint8_t> ref;
    std::array<int64_t, 3> shape{0, 0, 0};
    std::array<double, 3> spacing_mm{1, 1, 1};

    void validate() const;
};

// 2|A.B| / (|A|+|B|); both empty -> 1, exactly one empty -> 0.
double dice(const MaskPair& pair);

// Boundary voxels are mask voxels with a six-connected background neighbor
// (the volume border counts as background). Score counts boundary voxels of
// each mask within tolerance_mm of the other boundary, over the total
// boundary size. Both masks empty -> 1, exactly one empty -> 0.
double surface_dice(const MaskPair& pair, double tolerance_mm = 2.0);

// Boundary extraction, exposed for tests and saliency alignment checks.
std::vector<uint8_t> boundary_voxels(const std::vector<uint8_t>& mask, const std::array<int64_t, 3>& shape);

double region_volume(const LabelVolume& labels, int32_t region);

struct OverlapRow {
    std::string region;
    double overlap_mm3 = 0;
    double region_total_mm3 = 0;
};

struct OverlapReport {
    std::string lesion_name;
    std::vector<OverlapRow> rows;  // sorted by overlap descending
};

// One row per atlas region the lesion touches. Lesion voxels are nonzero
// values of `lesion`; grids must match exactly.
OverlapReport overlap_report(const LabelVolume& lesion, const LabelVolume& atlas,
                             const std::string& lesion_name = "lesion");

void write_overlap_csv(const OverlapReport& report, const std::string& path);
void write_overlap_json(const OverlapReport& report, const std::string& path);

}  // namespace mpum
