#include <doctest.h>

#include <cmath>
#include <set>

#include "mpum/volume.hpp"

using namespace mpum;

namespace {

Volume ramp_volume(std::array<int64_t, 3> shape, std::array<double, 3> spacing) {
    Volume v;
    v.shape = shape;
    v.spacing_mm = spacing;
    v.data.resize(static_cast<size_t>(v.numel()));
    for (int64_t z = 0; z < shape[2]; ++z)
        for (int64_t y = 0; y < shape[1]; ++y)
            for (int64_t x = 0; x < shape[0]; ++x) v.at(x, y, z) = static_cast<float>(x);
    return v;
}

}  // namespace

TEST_CASE("resample extent arithmetic") {
    Volume v = ramp_volume({64, 64, 64}, {1, 1, 1});
    Volume r = resample_isotropic(v, 2.0);
    CHECK(r.shape == std::array<int64_t, 3>{32, 32, 32});
    CHECK(r.spacing_mm == std::array<double, 3>{2, 2, 2});

    Volume tiny = ramp_volume({4, 4, 4}, {0.1, 1, 1});
    CHECK_THROWS_AS(resample_isotropic(tiny, 2.0), DataError);
}

TEST_CASE("resample of an already-isotropic volume is the identity") {
    Volume v = ramp_volume({16, 12, 10}, {2, 2, 2});
    Rng rng(8);
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(-5.0, 5.0));
    Volume r = resample_isotropic(v, 2.0);
    REQUIRE(r.shape == v.shape);
    for (size_t i = 0; i < v.data.size(); ++i) CHECK(r.data[i] == v.data[i]);
}

TEST_CASE("resampled linear ramp matches the analytic ramp in the interior") {
    Volume v = ramp_volume({64, 12, 12}, {1, 1, 1});
    Volume r = resample_isotropic(v, 2.0);
    REQUIRE(r.shape == std::array<int64_t, 3>{32, 6, 6});
    for (int64_t x = 1; x + 1 < r.shape[0]; ++x) {
        // output center x maps to source coordinate 2x + 0.5 in voxel units
        const double expect = 2.0 * static_cast<double>(x) + 0.5;
        CHECK(std::abs(r.at(x, 3, 3) - expect) <= 1e-6);
    }
}

TEST_CASE("label resample is nearest-neighbor and preserves the value set") {
    LabelVolume lv;
    lv.shape = {20, 20, 20};
    lv.spacing_mm = {1, 1, 1};
    lv.category_table = {"background", "a", "b"};
    lv.labels.assign(8000, 0);
    for (int64_t z = 4; z < 10; ++z)
        for (int64_t y = 4; y < 10; ++y)
            for (int64_t x = 4; x < 10; ++x) lv.at(x, y, z) = 1;
    lv.at(15, 15, 15) = 2;
    LabelVolume r = resample_isotropic(lv, 2.0);
    CHECK(r.shape == std::array<int64_t, 3>{10, 10, 10});
    std::set<int32_t> values(r.labels.begin(), r.labels.end());
    for (int32_t v : values) CHECK(v <= 2);
    CHECK(values.count(1) == 1);  // the big block survives
    // interior of the block maps to itself
    CHECK(r.at(3, 3, 3) == 1);
}

TEST_CASE("mask volume is approximately conserved by resampling") {
    // smooth ball at 1 mm, resampled to 2 mm: volume change within 5%
    LabelVolume lv;
    lv.shape = {64, 64, 64};
    lv.spacing_mm = {1, 1, 1};
    lv.category_table = {"background", "ball"};
    lv.labels.assign(static_cast<size_t>(lv.numel()), 0);
    int64_t count = 0;
    for (int64_t z = 0; z < 64; ++z)
        for (int64_t y = 0; y < 64; ++y)
            for (int64_t x = 0; x < 64; ++x) {
                const double d = std::pow(x - 31.5, 2) + std::pow(y - 31.5, 2) + std::pow(z - 31.5, 2);
                if (d <= 20.0 * 20.0) {
                    lv.at(x, y, z) = 1;
                    ++count;
                }
            }
    LabelVolume r = resample_isotropic(lv, 2.0);
    int64_t count2 = 0;
    for (int32_t v : r.labels) count2 += v == 1;
    const double vol1 = static_cast<double>(count) * 1.0;
    const double vol2 = static_cast<double>(count2) * 8.0;
    CHECK(std::abs(vol2 - vol1) / vol1 <= 0.05);
}

TEST_CASE("normalization endpoints per modality") {
    Volume ct;
    ct.shape = {2, 1, 1};
    ct.spacing_mm = {1, 1, 1};
    ct.modality = "CT";
    ct.data = {-1024.0f, 3071.0f};
    Volume n = normalize_modality(ct);
    CHECK(n.data[0] == doctest::Approx(0.0));
    CHECK(n.data[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(normalize_modality(n), DataError);  // idempotence guard

    Volume mr = ct;
    mr.modality = "MR";
    mr.data = {1500.0f, -10.0f};
    mr.normalized = false;
    Volume nm = normalize_modality(mr);
    CHECK(nm.data[0] == doctest::Approx(0.5));
    CHECK(nm.data[1] == doctest::Approx(0.0));  // negatives clamp to 0

    Volume pet = ct;
    pet.modality = "PET";
    pet.data = {10.0f, 0.0f};
    pet.normalized = false;
    CHECK_THROWS_AS(normalize_modality(pet), DataError);  // missing metadata
    pet.pet_meta = PetMeta{370.0, 74.0};
    Volume np = normalize_modality(pet);
    CHECK(np.data[0] == doctest::Approx(0.1));  // SUV 2.0 / 20
    pet.pet_meta = PetMeta{0.0, 74.0};
    CHECK_THROWS_AS(normalize_modality(pet), DataError);
}

TEST_CASE("training patch sampling stays in bounds and is reproducible") {
    Phantom ph = synth_phantom(42, {"CT"}, 48, 2);
    const Volume& vol = ph.images.at("CT");
    Rng rng(7);
    for (int i = 0; i < 20; ++i) {
        PatchSample p = sample_training_patch(vol, ph.labels, 16, rng, "ph");
        CHECK(p.image.size() == 16 * 16 * 16);
        CHECK(p.labels.size() == 16 * 16 * 16);
        for (int a = 0; a < 3; ++a) {
            CHECK(p.corner[a] >= 0);
            CHECK(p.corner[a] + 16 <= 48);
        }
        // patch content matches the volume at the corner
        CHECK(p.image[0] == vol.at(p.corner[0], p.corner[1], p.corner[2]));
    }
    Rng r1(99), r2(99);
    PatchSample a = sample_training_patch(vol, ph.labels, 16, r1);
    PatchSample b = sample_training_patch(vol, ph.labels, 16, r2);
    CHECK(a.corner == b.corner);

    // foreground bias: at least one of many samples contains foreground
    Rng r3(5);
    int with_fg = 0;
    for (int i = 0; i < 30; ++i) {
        PatchSample p = sample_training_patch(vol, ph.labels, 16, r3);
        for (int32_t l : p.labels)
            if (l != 0) {
                ++with_fg;
                break;
            }
    }
    CHECK(with_fg >= 10);
}

TEST_CASE("small volumes are zero-padded to the patch size") {
    Volume v = ramp_volume({8, 8, 8}, {2, 2, 2});
    LabelVolume lv;
    lv.shape = v.shape;
    lv.spacing_mm = v.spacing_mm;
    lv.category_table = {"background"};
    lv.labels.assign(static_cast<size_t>(v.numel()), 0);
    Rng rng(1);
    PatchSample p = sample_training_patch(v, lv, 16, rng);
    CHECK(p.image.size() == 16 * 16 * 16);
    CHECK(p.corner == std::array<int64_t, 3>{0, 0, 0});
    CHECK(p.image[15] == 0.0f);  // x=15 is padding
}

TEST_CASE("grid patches cover every voxel") {
    Volume v = ramp_volume({48, 48, 48}, {2, 2, 2});
    auto patches = extract_grid_patches(v, 32, 16);
    CHECK(patches.size() == 8);  // two corner positions per axis: 0 and 16
    std::vector<int> covered(48 * 48 * 48, 0);
    for (const auto& p : patches)
        for (int64_t z = 0; z < 32; ++z)
            for (int64_t y = 0; y < 32; ++y)
                for (int64_t x = 0; x < 32; ++x)
                    covered[static_cast<size_t>(((p.corner[2] + z) * 48 + p.corner[1] + y) * 48 + p.corner[0] + x)]++;
    for (int c : covered) CHECK(c >= 1);

    Volume one = ramp_volume({32, 32, 32}, {2, 2, 2});
    auto single = extract_grid_patches(one, 32, 16);
    CHECK(single.size() == 1);
    CHECK(single[0].corner == std::array<int64_t, 3>{0, 0, 0});
}

TEST_CASE("gaussian blur preserves the mean and constants") {
    Rng rng(11);
    std::array<int64_t, 3> shape{12, 10, 8};
    std::vector<float> img(static_cast<size_t>(12 * 10 * 8));
    for (auto& v : img) v = static_cast<float>(rng.uniform(0.0, 1.0));
    double mean0 = 0;
    for (float v : img) mean0 += v;
    mean0 /= static_cast<double>(img.size());

    std::vector<float> blurred = img;
    augment_gaussian(blurred, shape, rng);
    double mean1 = 0;
    for (float v : blurred) mean1 += v;
    mean1 /= static_cast<double>(blurred.size());
    CHECK(std::abs(mean1 - mean0) <= 1e-5);

    // blur genuinely smooths: variance decreases
    double var0 = 0, var1 = 0;
    for (float v : img) var0 += (v - mean0) * (v - mean0);
    for (float v : blurred) var1 += (v - mean1) * (v - mean1);
    CHECK(var1 < var0);

    std::vector<float> flat(300, 2.5f);
    augment_gaussian(flat, {10, 6, 5}, rng);
    for (float v : flat) CHECK(v == doctest::Approx(2.5).epsilon(1e-6));
}

TEST_CASE("contrast scaling is anchored at the mean") {
    std::vector<float> img = {0.0f, 1.0f, 2.0f, 3.0f};  // mean 1.5
    Rng rng(3);
    const double f = 0.5 + (1.5 - 0.5) * 0.0;  // placeholder, we recompute below
    (void)f;
    std::vector<float> out = img;
    augment_contrast(out, rng);
    // recover the applied factor from the first element and check the rest
    const double applied = (out[0] - 1.5) / (img[0] - 1.5);
    CHECK(applied >= 0.5);
    CHECK(applied <= 1.5);
    for (size_t i = 0; i < img.size(); ++i)
        CHECK(out[i] == doctest::Approx(1.5 + applied * (img[i] - 1.5)).epsilon(1e-6));

    std::vector<float> flat(64, 7.0f);
    augment_contrast(flat, rng);
    for (float v : flat) CHECK(v == doctest::Approx(7.0));
}

TEST_CASE("phantom determinism, coverage, and designed modality conflict") {
    Phantom a = synth_phantom(77, {"CT", "MR", "PET"}, 64, 3);
    Phantom b = synth_phantom(77, {"CT", "MR", "PET"}, 64, 3);
    CHECK(a.labels.labels == b.labels.labels);
    CHECK(a.images.at("CT").data == b.images.at("CT").data);
    CHECK(a.images.at("PET").pet_meta.has_value());

    // every category has at least 100 voxels
    std::vector<int64_t> hist(4, 0);
    for (int32_t v : a.labels.labels) hist[static_cast<size_t>(v)]++;
    for (int c = 1; c <= 3; ++c) CHECK(hist[static_cast<size_t>(c)] >= 100);

    // CT and MR disagree inside category 1 after normalization
    Volume nct = normalize_modality(a.images.at("CT"));
    Volume nmr = normalize_modality(a.images.at("MR"));
    double mct = 0, mmr = 0;
    int64_t n = 0;
    for (size_t i = 0; i < a.labels.labels.size(); ++i)
        if (a.labels.labels[i] == 1) {
            mct += nct.data[i];
            mmr += nmr.data[i];
            ++n;
        }
    CHECK(n > 0);
    CHECK(std::abs(mct / n - mmr / n) >= 0.3);

    // PET normalization recovers the designed latent level inside category 1
    Volume npet = normalize_modality(a.images.at("PET"));
    double mpet = 0;
    for (size_t i = 0; i < a.labels.labels.size(); ++i)
        if (a.labels.labels[i] == 1) mpet += npet.data[i];
    CHECK(mpet / n == doctest::Approx(0.70).epsilon(0.05));

    CHECK_THROWS_AS(synth_phantom(1, {"CT"}, 8, 1), DataError);
    CHECK_THROWS_AS(synth_phantom(1, {"XX"}, 64, 1), DataError);
    // too many regions to place without overlap in a small box
    CHECK_THROWS_AS(synth_phantom(1, {"CT"}, 16, 40), DataError);
}
