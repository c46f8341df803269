#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpum/error.hpp"
#include "mpum/rng.hpp"

namespace mpum {

struct PetMeta {
    double injected_dose_MBq = 0;
    double body_weight_kg = 0;
};

// Scalar grid with x fastest-varying: index = (z*ny + y)*nx + x.
struct Volume {
    std::array<int64_t, 3> shape{0, 0, 0};  // nx, ny, nz
    std::vector<float> data;
    std::array<double, 3> spacing_mm{1, 1, 1};
    std::string modality = "CT";  // CT | MR | PET
    std::optional<PetMeta> pet_meta;
    bool normalized = false;

    int64_t numel() const { return shape[0] * shape[1] * shape[2]; }
    float& at(int64_t x, int64_t y, int64_t z) {
        return data[static_cast<size_t>((z * shape[1] + y) * shape[0] + x)];
    }
    float at(int64_t x, int64_t y, int64_t z) const {
        return data[static_cast<size_t>((z * shape[1] + y) * shape[0] + x)];
    }
    void validate() const;
};

struct LabelVolume {
    std::array<int64_t, 3> shape{0, 0, 0};
    std::vector<int32_t> labels;
    std::array<double, 3> spacing_mm{1, 1, 1};
    std::vector<std::string> category_table;  // index 0 = background

    int64_t numel() const { return shape[0] * shape[1] * shape[2]; }
    int32_t& at(int64_t x, int64_t y, int64_t z) {
        return labels[static_cast<size_t>((z * shape[1] + y) * shape[0] + x)];
    }
    int32_t at(int64_t x, int64_t y, int64_t z) const {
        return labels[static_cast<size_t>((z * shape[1] + y) * shape[0] + x)];
    }
    void validate() const;
};

struct PatchSample {
    std::vector<float> image;    // P^3, x fastest
    std::vector<int32_t> labels;  // P^3, same layout
    int64_t size = 0;
    std::string modality;
    std::string source_id;
    std::array<int64_t, 3> corner{0, 0, 0};
};

// Resamples to an isotropic grid: images trilinear, labels nearest-neighbor,
// both with the half-pixel-center convention. New extents are
// round(old_extent * old_spacing / target_mm).
Volume resample_isotropic(const Volume& vol, double target_mm = 2.0);
LabelVolume resample_isotropic(const LabelVolume& vol, double target_mm = 2.0);

// CT: clamp [-1024, 3071] HU then map to [0,1]. MR: divide by 3000, clamp
// negatives to 0. PET: SUV = conc / (dose/weight), then divide by 20.
// A second call on the same volume errors.
Volume normalize_modality(const Volume& vol);

PatchSample sample_training_patch(const Volume& vol, const LabelVolume& labels, int64_t size, Rng& rng,
                                  const std::string& source_id = "");
std::vector<PatchSample> extract_grid_patches(const Volume& vol, int64_t size, int64_t stride,
                                              const LabelVolume* labels = nullptr,
                                              const std::string& source_id = "");

// Separable Gaussian blur, sigma ~ U[0.5,1.5] voxels truncated at 3 sigma,
// circular boundary so the patch mean is preserved.
void augment_gaussian(std::vector<float>& image, const std::array<int64_t, 3>& shape, Rng& rng);
// out = mean + f * (in - mean), f ~ U[0.5,1.5].
void augment_contrast(std::vector<float>& image, Rng& rng);

struct Phantom {
    std::map<std::string, Volume> images;  // modality-native units, not normalized
    LabelVolume labels;
};

// Seeded non-overlapping ellipsoids, one per category, on a textured
// background. Per-modality intensity maps conflict by design; the geometry
// is shared. Emitted volumes are in native units so normalize_modality
// recovers the designed levels.
Phantom synth_phantom(uint64_t seed, const std::vector<std::string>& modalities, int64_t size = 64,
                      int64_t num_categories = 3);

}  // namespace mpum
