#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "mpum/nifti.hpp"
#include "mpum/rng.hpp"

using namespace mpum;

namespace {

Volume random_volume(uint64_t seed, std::array<int64_t, 3> shape = {8, 8, 8}) {
    Volume v;
    v.shape = shape;
    v.spacing_mm = {1.5, 2.0, 2.5};
    v.modality = "CT";
    v.data.resize(static_cast<size_t>(v.numel()));
    Rng rng(seed);
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(-1000.0, 2000.0));
    return v;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    std::vector<char> buf(static_cast<size_t>(in.tellg()));
    in.seekg(0);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    return buf;
}

void spit(const std::string& path, const std::vector<char>& buf) {
    std::ofstream out(path, std::ios::binary);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace

TEST_CASE("float32 volume round-trips bitwise") {
    const std::string path = "/tmp/mpum_rt.nii";
    Volume v = random_volume(5);
    v.modality = "PET";
    v.pet_meta = PetMeta{370.0, 74.0};
    write_volume(v, path);
    Volume r = read_image(path);
    CHECK(r.shape == v.shape);
    CHECK(r.spacing_mm[0] == doctest::Approx(1.5));
    CHECK(r.modality == "PET");
    REQUIRE(r.pet_meta.has_value());
    CHECK(r.pet_meta->injected_dose_MBq == doctest::Approx(370.0));
    CHECK(r.pet_meta->body_weight_kg == doctest::Approx(74.0));
    CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * sizeof(float)) == 0);
    std::remove(path.c_str());
}

TEST_CASE("label volume round-trips") {
    const std::string path = "/tmp/mpum_lab.nii";
    LabelVolume lv;
    lv.shape = {6, 5, 4};
    lv.spacing_mm = {2, 2, 2};
    lv.category_table = {"background", "a", "b", "c"};
    lv.labels.assign(120, 0);
    lv.labels[7] = 3;
    lv.labels[100] = 1;
    write_labels(lv, path);
    LabelVolume r = read_labels(path);
    CHECK(r.labels == lv.labels);
    CHECK(r.category_table.size() == 4);  // regenerated through max label

    // read_any dispatches to labels for unscaled int16
    auto any = read_any(path);
    CHECK(any.labels.has_value());
    CHECK_FALSE(any.image.has_value());
    CHECK_THROWS_AS(read_image(path), DataError);
    std::remove(path.c_str());
}

TEST_CASE("malformed headers raise distinct format errors") {
    const std::string path = "/tmp/mpum_bad.nii";
    Volume v = random_volume(6, {4, 4, 4});
    write_volume(v, path);
    std::vector<char> good = slurp(path);

    auto corrupt = [&](size_t offset, const void* bytes, size_t n) {
        std::vector<char> buf = good;
        std::memcpy(buf.data() + offset, bytes, n);
        spit(path, buf);
    };

    // bad magic at offset 344
    const char bad_magic[4] = {'x', 'y', 'z', '\0'};
    corrupt(344, bad_magic, 4);
    CHECK_THROWS_WITH_AS(read_image(path), doctest::Contains("magic"), FormatError);

    // unsupported datatype 8 (int32) at offset 70
    const int16_t dt = 8;
    corrupt(70, &dt, 2);
    CHECK_THROWS_WITH_AS(read_image(path), doctest::Contains("datatype"), FormatError);

    // big-endian flag: byte-swapped sizeof_hdr
    const int32_t swapped = 0x5C010000;
    corrupt(0, &swapped, 4);
    CHECK_THROWS_WITH_AS(read_image(path), doctest::Contains("big-endian"), FormatError);

    // truncated payload
    std::vector<char> shortbuf(good.begin(), good.begin() + 352 + 10);
    spit(path, shortbuf);
    CHECK_THROWS_WITH_AS(read_image(path), doctest::Contains("truncated"), FormatError);

    // 4-D file
    const int16_t four = 4;
    corrupt(40, &four, 2);
    CHECK_THROWS_AS(read_image(path), FormatError);

    CHECK_THROWS_AS(read_image("/tmp/mpum_missing.nii"), DataError);
    std::remove(path.c_str());
}

TEST_CASE("scl_slope and scl_inter are applied on read") {
    const std::string path = "/tmp/mpum_scl.nii";
    Volume v = random_volume(7, {2, 2, 2});
    v.data.assign(8, 3.0f);
    write_volume(v, path);
    std::vector<char> buf = slurp(path);
    const float slope = 2.0f, inter = 1.0f;
    std::memcpy(buf.data() + 112, &slope, 4);
    std::memcpy(buf.data() + 116, &inter, 4);
    spit(path, buf);
    Volume r = read_image(path);
    for (float x : r.data) CHECK(x == doctest::Approx(7.0));  // 3*2+1

    // slope 0 behaves as slope 1
    const float zero = 0.0f;
    std::memcpy(buf.data() + 112, &zero, 4);
    std::memcpy(buf.data() + 116, &zero, 4);
    spit(path, buf);
    Volume r2 = read_image(path);
    for (float x : r2.data) CHECK(x == doctest::Approx(3.0));

    // scaled int16 dispatches to image, not labels
    LabelVolume lv;
    lv.shape = {2, 2, 2};
    lv.spacing_mm = {1, 1, 1};
    lv.category_table = {"background", "x"};
    lv.labels.assign(8, 1);
    write_labels(lv, path);
    buf = slurp(path);
    std::memcpy(buf.data() + 112, &slope, 4);
    spit(path, buf);
    auto any = read_any(path);
    CHECK(any.image.has_value());
    CHECK(any.image->data[0] == doctest::Approx(2.0));
    CHECK_THROWS_AS(read_labels(path), DataError);
    std::remove(path.c_str());
}

TEST_CASE("raw plus JSON sidecar round-trips") {
    const std::string base = "/tmp/mpum_sidecar";
    Volume v = random_volume(9, {5, 6, 7});
    v.modality = "MR";
    write_volume_raw(v, base);
    Volume r = read_volume_raw(base);
    CHECK(r.shape == v.shape);
    CHECK(r.modality == "MR");
    CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * sizeof(float)) == 0);

    // payload size mismatch is a format error
    {
        std::ofstream raw(base + ".raw", std::ios::binary);
        raw.write("abc", 3);
    }
    CHECK_THROWS_AS(read_volume_raw(base), FormatError);
    std::remove((base + ".raw").c_str());
    std::remove((base + ".json").c_str());
}
