#pragma once

#include <optional>
#include <string>

#include "mpum/volume.hpp"

namespace mpum {

// Exactly one of the two members is set, depending on what the file holds:
// float32 (or scaled integer) data reads as an image, unscaled integer data
// as labels.
struct ReadAnyResult {
    std::optional<Volume> image;
    std::optional<LabelVolume> labels;
};

// Minimal single-file NIfTI-1: 348-byte header, magic "n+1", dim[0]=3,
// datatype uint8/int16/float32, little-endian only. scl_slope/scl_inter are
// honored on read (slope 0 behaves as 1). Modality and PET metadata travel
// in the descrip field.
void write_volume(const Volume& vol, const std::string& path);
void write_labels(const LabelVolume& labels, const std::string& path);
ReadAnyResult read_any(const std::string& path);
Volume read_image(const std::string& path);
LabelVolume read_labels(const std::string& path);

// Raw little-endian float32 alongside a JSON sidecar:
// <base>.raw + <base>.json {shape, spacing_mm, modality, pet_meta?}.
void write_volume_raw(const Volume& vol, const std::string& basepath);
Volume read_volume_raw(const std::string& basepath);

}  // namespace mpum
