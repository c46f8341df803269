#include "mpum/volume.hpp"

#include <algorithm>
#include <cmath>

namespace mpum {

void Volume::validate() const {
    if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1) throw DataError("Volume: empty extent");
    if (static_cast<int64_t>(data.size()) != numel()) throw ShapeError("Volume: data size does not match shape");
    for (double s : spacing_mm)
        if (!(s > 0)) throw DataError("Volume: spacing must be strictly positive");
    for (float v : data)
        if (!std::isfinite(v)) throw NumericError("Volume: non-finite voxel");
    if (modality != "CT" && modality != "MR" && modality != "PET")
        throw DataError("Volume: unknown modality '" + modality + "'");
}

void LabelVolume::validate() const {
    if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1) throw DataError("LabelVolume: empty extent");
    if (static_cast<int64_t>(labels.size()) != numel())
        throw ShapeError("LabelVolume: label count does not match shape");
    for (double s : spacing_mm)
        if (!(s > 0)) throw DataError("LabelVolume: spacing must be strictly positive");
    const int32_t n = static_cast<int32_t>(category_table.size());
    for (int32_t v : labels)
        if (v < 0 || v >= n)
            throw DataError("LabelVolume: voxel value " + std::to_string(v) + " has no category table entry");
}

namespace {

std::array<int64_t, 3> resampled_shape(const std::array<int64_t, 3>& shape, const std::array<double, 3>& spacing,
                                       double target_mm) {
    if (!(target_mm > 0)) throw DataError("resample_isotropic: target spacing must be positive");
    std::array<int64_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
        out[a] = std::llround(static_cast<double>(shape[a]) * spacing[a] / target_mm);
        if (out[a] < 1)
            throw DataError("resample_isotropic: axis " + std::to_string(a) + " collapses to zero extent");
    }
    return out;
}

// Source voxel coordinate of output voxel center i under half-pixel-center
// resampling.
inline double src_coord(int64_t i, double target_mm, double old_spacing) {
    return (static_cast<double>(i) + 0.5) * target_mm / old_spacing - 0.5;
}

}  // namespace

Volume resample_isotropic(const Volume& vol, double target_mm) {
    vol.validate();
    const auto ns = resampled_shape(vol.shape, vol.spacing_mm, target_mm);
    Volume out;
    out.shape = ns;
    out.spacing_mm = {target_mm, target_mm, target_mm};
    out.modality = vol.modality;
    out.pet_meta = vol.pet_meta;
    out.normalized = vol.normalized;
    out.data.resize(static_cast<size_t>(out.numel()));

    const int64_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2];
    auto clamp = [](int64_t v, int64_t hi) { return std::min(std::max<int64_t>(v, 0), hi); };
    for (int64_t z = 0; z < ns[2]; ++z) {
        const double fz = src_coord(z, target_mm, vol.spacing_mm[2]);
        const int64_t z0 = clamp(static_cast<int64_t>(std::floor(fz)), nz - 1);
        const int64_t z1 = clamp(z0 + 1, nz - 1);
        const double wz = std::min(std::max(fz - std::floor(fz), 0.0), 1.0);
        for (int64_t y = 0; y < ns[1]; ++y) {
            const double fy = src_coord(y, target_mm, vol.spacing_mm[1]);
            const int64_t y0 = clamp(static_cast<int64_t>(std::floor(fy)), ny - 1);
            const int64_t y1 = clamp(y0 + 1, ny - 1);
            const double wy = std::min(std::max(fy - std::floor(fy), 0.0), 1.0);
            for (int64_t x = 0; x < ns[0]; ++x) {
                const double fx = src_coord(x, target_mm, vol.spacing_mm[0]);
                const int64_t x0 = clamp(static_cast<int64_t>(std::floor(fx)), nx - 1);
                const int64_t x1 = clamp(x0 + 1, nx - 1);
                const double wx = std::min(std::max(fx - std::floor(fx), 0.0), 1.0);
                const double c00 = vol.at(x0, y0, z0) * (1 - wx) + vol.at(x1, y0, z0) * wx;
                const double c10 = vol.at(x0, y1, z0) * (1 - wx) + vol.at(x1, y1, z0) * wx;
                const double c01 = vol.at(x0, y0, z1) * (1 - wx) + vol.at(x1, y0, z1) * wx;
                const double c11 = vol.at(x0, y1, z1) * (1 - wx) + vol.at(x1, y1, z1) * wx;
                out.at(x, y, z) =
                    static_cast<float>((c00 * (1 - wy) + c10 * wy) * (1 - wz) + (c01 * (1 - wy) + c11 * wy) * wz);
            }
        }
    }
    return out;
}

LabelVolume resample_isotropic(const LabelVolume& vol, double target_mm) {
    vol.validate();
    const auto ns = resampled_shape(vol.shape, vol.spacing_mm, target_mm);
    LabelVolume out;
    out.shape = ns;
    out.spacing_mm = {target_mm, target_mm, target_mm};
    out.category_table = vol.category_table;
    out.labels.resize(static_cast<size_t>(out.numel()));

    auto nearest = [](double f, int64_t hi) {
        return std::min(std::max<int64_t>(std::llround(f), 0), hi - 1);
    };
    for (int64_t z = 0; z < ns[2]; ++z) {
        const int64_t sz = nearest(src_coord(z, target_mm, vol.spacing_mm[2]), vol.shape[2]);
        for (int64_t y = 0; y < ns[1]; ++y) {
            const int64_t sy = nearest(src_coord(y, target_mm, vol.spacing_mm[1]), vol.shape[1]);
            for (int64_t x = 0; x < ns[0]; ++x) {
                const int64_t sx = nearest(src_coord(x, target_mm, vol.spacing_mm[0]), vol.shape[0]);
                out.at(x, y, z) = vol.at(sx, sy, sz);
            }
        }
    }
    return out;
}

Volume normalize_modality(const Volume& vol) {
    vol.validate();
    if (vol.normalized) throw DataError("normalize_modality: volume is already normalized");
    Volume out = vol;
    out.normalized = true;
    if (vol.modality == "CT") {
        for (auto& v : out.data) {
            const float c = std::min(std::max(v, -1024.0f), 3071.0f);
            v = (c + 1024.0f) / 4095.0f;
        }
    } else if (vol.modality == "MR") {
        for (auto& v : out.data) v = std::max(v, 0.0f) / 3000.0f;
    } else {  // PET
        if (!vol.pet_meta) throw DataError("normalize_modality: PET volume lacks dose/weight metadata");
        const double dose = vol.pet_meta->injected_dose_MBq;
        const double weight = vol.pet_meta->body_weight_kg;
        if (!(dose > 0) || !(weight > 0))
            throw DataError("normalize_modality: PET dose and body weight must be positive");
        const double denom = dose / weight;
        for (auto& v : out.data) v = static_cast<float>(static_cast<double>(v) / denom / 20.0);
    }
    return out;
}

namespace {

// Pads img/labels so every extent is at least P. Image pads with zeros,
// labels with background.
template <typename V>
void pad_to(std::vector<V>& buf, std::array<int64_t, 3>& shape, int64_t P) {
    std::array<int64_t, 3> ns{std::max(shape[0], P), std::max(shape[1], P), std::max(shape[2], P)};
    if (ns == shape) return;
    std::vector<V> out(static_cast<size_t>(ns[0] * ns[1] * ns[2]), V(0));
    for (int64_t z = 0; z < shape[2]; ++z)
        for (int64_t y = 0; y < shape[1]; ++y)
            std::copy(buf.begin() + (z * shape[1] + y) * shape[0],
                      buf.begin() + (z * shape[1] + y) * shape[0] + shape[0],
                      out.begin() + (z * ns[1] + y) * ns[0]);
    buf = std::move(out);
    shape = ns;
}

template <typename V>
void copy_patch(const std::vector<V>& src, const std::array<int64_t, 3>& shape, std::vector<V>& dst, int64_t P,
                const std::array<int64_t, 3>& corner) {
    dst.resize(static_cast<size_t>(P * P * P));
    for (int64_t z = 0; z < P; ++z)
        for (int64_t y = 0; y < P; ++y) {
            const auto s = src.begin() + ((corner[2] + z) * shape[1] + (corner[1] + y)) * shape[0] + corner[0];
            std::copy(s, s + P, dst.begin() + (z * P + y) * P);
        }
}

}  // namespace

PatchSample sample_training_patch(const Volume& vol, const LabelVolume& labels, int64_t size, Rng& rng,
                                  const std::string& source_id) {
    if (size < 1) throw DataError("sample_training_patch: patch size must be >= 1");
    if (vol.shape != labels.shape) throw ShapeError("sample_training_patch: image and label grids disagree");
    if (vol.numel() == 0) throw DataError("sample_training_patch: empty volume");

    std::vector<float> img = vol.data;
    std::vector<int32_t> lab = labels.labels;
    std::array<int64_t, 3> shape = vol.shape;
    pad_to(img, shape, size);
    std::array<int64_t, 3> lshape = labels.shape;
    pad_to(lab, lshape, size);

    std::array<int64_t, 3> corner{};
    const bool biased = rng.uniform() < 0.5;
    bool placed = false;
    if (biased) {
        // pick a random foreground voxel, then a random corner containing it
        std::vector<int64_t> fg;
        for (size_t i = 0; i < lab.size(); ++i)
            if (lab[i] != 0) fg.push_back(static_cast<int64_t>(i));
        if (!fg.empty()) {
            const int64_t idx = fg[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(fg.size()) - 1))];
            const std::array<int64_t, 3> v{idx % shape[0], (idx / shape[0]) % shape[1], idx / (shape[0] * shape[1])};
            for (int a = 0; a < 3; ++a) {
                const int64_t lo = std::max<int64_t>(0, v[a] - size + 1);
                const int64_t hi = std::min(shape[a] - size, v[a]);
                corner[a] = rng.uniform_int(lo, hi);
            }
            placed = true;
        }
    }
    if (!placed)
        for (int a = 0; a < 3; ++a) corner[a] = rng.uniform_int(0, shape[a] - size);

    PatchSample out;
    out.size = size;
    out.modality = vol.modality;
    out.source_id = source_id;
    out.corner = corner;
    copy_patch(img, shape, out.image, size, corner);
    copy_patch(lab, shape, out.labels, size, corner);
    return out;
}

std::vector<PatchSample> extract_grid_patches(const Volume& vol, int64_t size, int64_t stride,
                                              const LabelVolume* labels, const std::string& source_id) {
    if (size < 1 || stride < 1) throw DataError("extract_grid_patches: size and stride must be >= 1");
    if (vol.numel() == 0) throw DataError("extract_grid_patches: empty volume");
    if (labels && vol.shape != labels->shape)
        throw ShapeError("extract_grid_patches: image and label grids disagree");

    std::vector<float> img = vol.data;
    std::array<int64_t, 3> shape = vol.shape;
    pad_to(img, shape, size);
    std::vector<int32_t> lab;
    std::array<int64_t, 3> lshape = vol.shape;
    if (labels) {
        lab = labels->labels;
        pad_to(lab, lshape, size);
    }

    std::array<std::vector<int64_t>, 3> axis;
    for (int a = 0; a < 3; ++a) {
        for (int64_t c = 0;; c += stride) {
            if (c + size >= shape[a]) {
                axis[a].push_back(shape[a] - size);  // clamp the last patch inward
                break;
            }
            axis[a].push_back(c);
        }
    }

    std::vector<PatchSample> out;
    for (int64_t cz : axis[2])
        for (int64_t cy : axis[1])
            for (int64_t cx : axis[0]) {
                PatchSample p;
                p.size = size;
                p.modality = vol.modality;
                p.source_id = source_id;
                p.corner = {cx, cy, cz};
                copy_patch(img, shape, p.image, size, p.corner);
                if (labels) copy_patch(lab, shape, p.labels, size, p.corner);
                else p.labels.assign(static_cast<size_t>(size * size * size), 0);
                out.push_back(std::move(p));
            }
    return out;
}

namespace {

void blur_axis(std::vector<float>& img, const std::array<int64_t, 3>& shape, int axis,
               const std::vector<double>& kernel) {
    const int64_t radius = static_cast<int64_t>(kernel.size()) / 2;
    const int64_t nx = shape[0], ny = shape[1], nz = shape[2];
    const int64_t ext = shape[static_cast<size_t>(axis)];
    std::vector<float> line(static_cast<size_t>(ext));
    const int64_t stride = axis == 0 ? 1 : (axis == 1 ? nx : nx * ny);
    const int64_t n_outer = axis == 0 ? ny * nz : (axis == 1 ? nx * nz : nx * ny);
    for (int64_t o = 0; o < n_outer; ++o) {
        int64_t base;
        if (axis == 0) base = o * nx;
        else if (axis == 1) { const int64_t z = o / nx, x = o % nx; base = z * nx * ny + x; }
        else base = o;
        for (int64_t i = 0; i < ext; ++i) line[static_cast<size_t>(i)] = img[static_cast<size_t>(base + i * stride)];
        for (int64_t i = 0; i < ext; ++i) {
            double acc = 0;
            for (int64_t k = -radius; k <= radius; ++k) {
                int64_t j = (i + k) % ext;
                if (j < 0) j += ext;  // circular wrap keeps the kernel mass inside the patch
                acc += kernel[static_cast<size_t>(k + radius)] * line[static_cast<size_t>(j)];
            }
            img[static_cast<size_t>(base + i * stride)] = static_cast<float>(acc);
        }
    }
}

}  // namespace

void augment_gaussian(std::vector<float>& image, const std::array<int64_t, 3>& shape, Rng& rng) {
    if (static_cast<int64_t>(image.size()) != shape[0] * shape[1] * shape[2])
        throw ShapeError("augment_gaussian: buffer does not match shape");
    const double sigma = rng.uniform(0.5, 1.5);
    const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double sum = 0;
    for (int64_t k = -radius; k <= radius; ++k) {
        const double w = std::exp(-static_cast<double>(k * k) / (2.0 * sigma * sigma));
        kernel[static_cast<size_t>(k + radius)] = w;
        sum += w;
    }
    for (auto& w : kernel) w /= sum;
    for (int axis = 0; axis < 3; ++axis) blur_axis(image, shape, axis, kernel);
}

void augment_contrast(std::vector<float>& image, Rng& rng) {
    const double f = rng.uniform(0.5, 1.5);
    double mean = 0;
    for (float v : image) mean += v;
    mean /= static_cast<double>(image.size());
    for (auto& v : image) v = static_cast<float>(mean + f * (static_cast<double>(v) - mean));
}

namespace {

struct Ellipsoid {
    std::array<double, 3> center;
    std::array<double, 3> semi;
};

// Designed latent intensity levels in [0,1]. The palettes are different and
// partially conflicting: categories 1 and 2 swap their values between CT and
// MR (intensity 0.9 means category 1 in CT but category 2 in MR), and PET
// reuses 0.7 for category 1 where CT and MR put category 3. Later categories
// agree across modalities, and classes stay >= 0.2 apart within any one
// modality for the first four categories.
double latent_level(const std::string& modality, int64_t category) {
    static const std::vector<double> ct = {0.90, 0.50, 0.70, 0.30, 0.60, 0.40};
    static const std::vector<double> mr = {0.50, 0.90, 0.70, 0.30, 0.60, 0.40};
    static const std::vector<double> pet = {0.70, 0.90, 0.50, 0.30, 0.60, 0.40};
    const std::vector<double>* pal = &ct;
    if (modality == "MR") pal = &mr;
    else if (modality == "PET") pal = &pet;
    if (category == 0) return 0.10;
    return (*pal)[static_cast<size_t>((category - 1) % static_cast<int64_t>(pal->size()))];
}

float native_units(const std::string& modality, double latent) {
    if (modality == "CT") return static_cast<float>(-1024.0 + latent * 4095.0);
    if (modality == "MR") return static_cast<float>(latent * 3000.0);
    return static_cast<float>(latent * 100.0);  // PET kBq/mL; dose 370 / weight 74 maps back to latent
}

}  // namespace

Phantom synth_phantom(uint64_t seed, const std::vector<std::string>& modalities, int64_t size,
                      int64_t num_categories) {
    if (size < 16) throw DataError("synth_phantom: size must be >= 16");
    if (num_categories < 1) throw DataError("synth_phantom: need at least one category");
    if (modalities.empty()) throw DataError("synth_phantom: need at least one modality");

    Rng geo = Rng::for_stream(seed, 0);
    const double s = static_cast<double>(size);
    std::vector<Ellipsoid> shapes;
    for (int64_t c = 0; c < num_categories; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
            Ellipsoid e;
            for (int a = 0; a < 3; ++a) e.semi[a] = geo.uniform(0.11 * s, 0.18 * s);
            const double margin = *std::max_element(e.semi.begin(), e.semi.end()) + 1.0;
            for (int a = 0; a < 3; ++a) e.center[a] = geo.uniform(margin, s - margin);
            bool clash = false;
            for (const auto& other : shapes) {
                double dist = 0;
                for (int a = 0; a < 3; ++a) {
                    const double d = e.center[a] - other.center[a];
                    dist += d * d;
                }
                const double r1 = *std::max_element(e.semi.begin(), e.semi.end());
                const double r2 = *std::max_element(other.semi.begin(), other.semi.end());
                if (std::sqrt(dist) < r1 + r2 + 2.0) { clash = true; break; }
            }
            if (!clash) {
                shapes.push_back(e);
                placed = true;
            }
        }
        if (!placed)
            throw DataError("synth_phantom: could not place " + std::to_string(num_categories) +
                            " non-overlapping regions at size " + std::to_string(size));
    }

    Phantom out;
    out.labels.shape = {size, size, size};
    out.labels.spacing_mm = {2.0, 2.0, 2.0};
    out.labels.labels.assign(static_cast<size_t>(size * size * size), 0);
    out.labels.category_table.push_back("background");
    for (int64_t c = 1; c <= num_categories; ++c) out.labels.category_table.push_back("region_" + std::to_string(c));

    for (int64_t z = 0; z < size; ++z)
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) {
                const std::array<double, 3> p{static_cast<double>(x), static_cast<double>(y),
                                              static_cast<double>(z)};
                for (size_t c = 0; c < shapes.size(); ++c) {
                    double q = 0;
                    for (int a = 0; a < 3; ++a) {
                        const double d = (p[a] - shapes[c].center[a]) / shapes[c].semi[a];
                        q += d * d;
                    }
                    if (q <= 1.0) {
                        out.labels.at(x, y, z) = static_cast<int32_t>(c + 1);
                        break;
                    }
                }
            }

    for (size_t m = 0; m < modalities.size(); ++m) {
        const std::string& mod = modalities[m];
        if (mod != "CT" && mod != "MR" && mod != "PET")
            throw DataError("synth_phantom: unknown modality '" + mod + "'");
        Rng noise = Rng::for_stream(seed, 1 + static_cast<uint64_t>(m));
        Volume vol;
        vol.shape = {size, size, size};
        vol.spacing_mm = {2.0, 2.0, 2.0};
        vol.modality = mod;
        if (mod == "PET") vol.pet_meta = PetMeta{370.0, 74.0};
        vol.data.resize(static_cast<size_t>(size * size * size));
        for (int64_t z = 0; z < size; ++z)
            for (int64_t y = 0; y < size; ++y)
                for (int64_t x = 0; x < size; ++x) {
                    const int32_t lab = out.labels.at(x, y, z);
                    double latent = latent_level(mod, lab);
                    if (lab == 0) {
                        // gentle background texture so the field is not flat
                        latent += 0.03 * std::sin(0.35 * static_cast<double>(x)) *
                                  std::sin(0.27 * static_cast<double>(y) + 0.9) *
                                  std::sin(0.31 * static_cast<double>(z) + 1.7);
                    }
                    latent += noise.normal() * 0.015;
                    latent = std::min(std::max(latent, 0.0), 1.0);
                    vol.at(x, y, z) = native_units(mod, latent);
                }
        out.images.emplace(mod, std::move(vol));
    }
    return out;
}

}  // namespace mpum
