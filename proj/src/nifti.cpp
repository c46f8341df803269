#include "mpum/nifti.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mpum {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;     // 0: must be 348
    char data_type[10];     // 4
    char db_name[18];       // 14
    int32_t extents;        // 32
    int16_t session_error;  // 36
    char regular;           // 38
    char dim_info;          // 39
    int16_t dim[8];         // 40: dim[0]=rank, dim[1..3]=extents
    float intent_p1;        // 56
    float intent_p2;        // 60
    float intent_p3;        // 64
    int16_t intent_code;    // 68
    int16_t datatype;       // 70: 2=uint8 4=int16 16=float32
    int16_t bitpix;         // 72
    int16_t slice_start;    // 74
    float pixdim[8];        // 76: pixdim[1..3]=spacing mm
    float vox_offset;       // 108: byte offset of the data, >= 352
    float scl_slope;        // 112
    float scl_inter;        // 116
    int16_t slice_end;      // 120
    char slice_code;        // 122
    char xyzt_units;        // 123
    float cal_max;          // 124
    float cal_min;          // 128
    float slice_duration;   // 132
    float toffset;          // 136
    int32_t glmax;          // 140
    int32_t glmin;          // 144
    char descrip[80];       // 148
    char aux_file[24];      // 228
    int16_t qform_code;     // 252
    int16_t sform_code;     // 254
    float quatern_b;        // 256
    float quatern_c;        // 260
    float quatern_d;        // 264
    float qoffset_x;        // 268
    float qoffset_y;        // 272
    float qoffset_z;        // 276
    float srow_x[4];        // 280
    float srow_y[4];        // 296
    float srow_z[4];        // 312
    char intent_name[16];   // 328
    char magic[4];          // 344: "n+1\0"
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;

std::string format_descrip(const Volume& vol) {
    std::ostringstream s;
    s << "mpum:modality=" << vol.modality;
    if (vol.pet_meta)
        s << ";dose=" << vol.pet_meta->injected_dose_MBq << ";weight=" << vol.pet_meta->body_weight_kg;
    if (vol.normalized) s << ";norm=1";
    return s.str();
}

struct DescripInfo {
    std::optional<std::string> modality;
    std::optional<PetMeta> pet_meta;
    bool normalized = false;
    bool labels_tag = false;
};

DescripInfo parse_descrip(const char* raw) {
    DescripInfo info;
    std::string d(raw, strnlen(raw, 80));
    if (d.rfind("mpum:", 0) != 0) return info;
    d = d.substr(5);
    std::stringstream ss(d);
    std::string item;
    PetMeta meta;
    bool has_dose = false, has_weight = false;
    while (std::getline(ss, item, ';')) {
        const auto eq = item.find('=');
        if (item == "labels") {
            info.labels_tag = true;
            continue;
        }
        if (eq == std::string::npos) continue;
        const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
        if (key == "modality") info.modality = val;
        else if (key == "dose") { meta.injected_dose_MBq = std::stod(val); has_dose = true; }
        else if (key == "weight") { meta.body_weight_kg = std::stod(val); has_weight = true; }
        else if (key == "norm") info.normalized = val == "1";
    }
    if (has_dose && has_weight) info.pet_meta = meta;
    return info;
}

Nifti1Header blank_header(const std::array<int64_t, 3>& shape, const std::array<double, 3>& spacing,
                          int16_t datatype, int16_t bitpix, const std::string& descrip) {
    Nifti1Header h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.dim[0] = 3;
    for (int a = 0; a < 3; ++a) {
        if (shape[static_cast<size_t>(a)] > 32767) throw DataError("NIfTI-1 extent exceeds int16 range");
        h.dim[a + 1] = static_cast<int16_t>(shape[static_cast<size_t>(a)]);
    }
    for (int a = 4; a < 8; ++a) h.dim[a] = 1;
    h.datatype = datatype;
    h.bitpix = bitpix;
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(spacing[static_cast<size_t>(a)]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    std::snprintf(h.descrip, sizeof(h.descrip), "%s", descrip.c_str());
    h.magic[0] = 'n';
    h.magic[1] = '+';
    h.magic[2] = '1';
    h.magic[3] = '\0';
    return h;
}

void write_blob(const std::string& path, const Nifti1Header& h, const void* data, size_t bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char pad[4] = {0, 0, 0, 0};
    out.write(pad, 4);  // vox_offset 352 = 348 header + 4 pad
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!out) throw DataError("write failed: " + path);
}

struct RawFile {
    Nifti1Header header;
    std::vector<char> payload;
    DescripInfo descrip;
    std::array<int64_t, 3> shape;
    std::array<double, 3> spacing;
};

RawFile read_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open: " + path);
    const std::streamsize file_size = in.tellg();
    in.seekg(0);
    RawFile f;
    if (file_size < static_cast<std::streamsize>(sizeof(Nifti1Header)))
        throw FormatError(path + ": file shorter than a NIfTI-1 header");
    in.read(reinterpret_cast<char*>(&f.header), sizeof(Nifti1Header));

    const Nifti1Header& h = f.header;
    if (h.sizeof_hdr != 348) {
        int32_t swapped;
        const uint32_t raw = static_cast<uint32_t>(h.sizeof_hdr);
        const uint32_t s = ((raw & 0xFFu) << 24) | ((raw & 0xFF00u) << 8) | ((raw >> 8) & 0xFF00u) | (raw >> 24);
        std::memcpy(&swapped, &s, 4);
        if (swapped == 348) throw FormatError(path + ": big-endian NIfTI files are not supported");
        throw FormatError(path + ": sizeof_hdr is " + std::to_string(h.sizeof_hdr) + ", expected 348");
    }
    if (std::memcmp(h.magic, "n+1\0", 4) != 0) throw FormatError(path + ": bad magic, expected \"n+1\"");
    if (h.dim[0] != 3) throw FormatError(path + ": dim[0] is " + std::to_string(h.dim[0]) + ", only 3-D supported");
    for (int a = 1; a <= 3; ++a)
        if (h.dim[a] < 1) throw FormatError(path + ": dim[" + std::to_string(a) + "] must be >= 1");
    if (h.datatype != kDtUint8 && h.datatype != kDtInt16 && h.datatype != kDtFloat32)
        throw FormatError(path + ": unsupported datatype " + std::to_string(h.datatype) +
                          " (supported: 2=uint8, 4=int16, 16=float32)");
    const int expect_bitpix = h.datatype == kDtUint8 ? 8 : (h.datatype == kDtInt16 ? 16 : 32);
    if (h.bitpix != expect_bitpix)
        throw FormatError(path + ": bitpix " + std::to_string(h.bitpix) + " does not match datatype");
    for (int a = 1; a <= 3; ++a)
        if (!(h.pixdim[a] > 0)) throw FormatError(path + ": pixdim[" + std::to_string(a) + "] must be positive");
    if (h.vox_offset < 352.0f) throw FormatError(path + ": vox_offset must be >= 352");

    f.shape = {h.dim[1], h.dim[2], h.dim[3]};
    f.spacing = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};
    const int64_t n = f.shape[0] * f.shape[1] * f.shape[2];
    const int64_t payload_bytes = n * expect_bitpix / 8;
    const auto offset = static_cast<std::streamsize>(h.vox_offset);
    if (file_size < offset + payload_bytes)
        throw FormatError(path + ": truncated, need " + std::to_string(offset + payload_bytes) + " bytes, have " +
                          std::to_string(file_size));
    in.seekg(offset);
    f.payload.resize(static_cast<size_t>(payload_bytes));
    in.read(f.payload.data(), payload_bytes);
    if (!in) throw FormatError(path + ": read failed");
    f.descrip = parse_descrip(h.descrip);
    return f;
}

bool has_nontrivial_scaling(const Nifti1Header& h) {
    return (h.scl_slope != 0.0f && h.scl_slope != 1.0f) || h.scl_inter != 0.0f;
}

Volume image_from_raw(const RawFile& f) {
    Volume vol;
    vol.shape = f.shape;
    vol.spacing_mm = f.spacing;
    vol.modality = f.descrip.modality.value_or("CT");
    vol.pet_meta = f.descrip.pet_meta;
    vol.normalized = f.descrip.normalized;
    const int64_t n = vol.numel();
    vol.data.resize(static_cast<size_t>(n));
    const float slope = f.header.scl_slope == 0.0f ? 1.0f : f.header.scl_slope;
    const float inter = f.header.scl_inter;
    if (f.header.datatype == kDtFloat32) {
        const float* src = reinterpret_cast<const float*>(f.payload.data());
        for (int64_t i = 0; i < n; ++i) vol.data[static_cast<size_t>(i)] = src[i] * slope + inter;
    } else if (f.header.datatype == kDtInt16) {
        const int16_t* src = reinterpret_cast<const int16_t*>(f.payload.data());
        for (int64_t i = 0; i < n; ++i) vol.data[static_cast<size_t>(i)] = static_cast<float>(src[i]) * slope + inter;
    } else {
        const uint8_t* src = reinterpret_cast<const uint8_t*>(f.payload.data());
        for (int64_t i = 0; i < n; ++i) vol.data[static_cast<size_t>(i)] = static_cast<float>(src[i]) * slope + inter;
    }
    vol.validate();
    return vol;
}

LabelVolume labels_from_raw(const RawFile& f, const std::string& path) {
    LabelVolume lv;
    lv.shape = f.shape;
    lv.spacing_mm = f.spacing;
    const int64_t n = lv.numel();
    lv.labels.resize(static_cast<size_t>(n));
    int32_t max_label = 0;
    if (f.header.datatype == kDtInt16) {
        const int16_t* src = reinterpret_cast<const int16_t*>(f.payload.data());
        for (int64_t i = 0; i < n; ++i) {
            if (src[i] < 0) throw DataError(path + ": negative label value " + std::to_string(src[i]));
            lv.labels[static_cast<size_t>(i)] = src[i];
            max_label = std::max<int32_t>(max_label, src[i]);
        }
    } else {
        const uint8_t* src = reinterpret_cast<const uint8_t*>(f.payload.data());
        for (int64_t i = 0; i < n; ++i) {
            lv.labels[static_cast<size_t>(i)] = src[i];
            max_label = std::max<int32_t>(max_label, src[i]);
        }
    }
    lv.category_table.push_back("background");
    for (int32_t c = 1; c <= max_label; ++c) lv.category_table.push_back("category_" + std::to_string(c));
    lv.validate();
    return lv;
}

}  // namespace

void write_volume(const Volume& vol, const std::string& path) {
    vol.validate();
    Nifti1Header h = blank_header(vol.shape, vol.spacing_mm, kDtFloat32, 32, format_descrip(vol));
    write_blob(path, h, vol.data.data(), vol.data.size() * sizeof(float));
}

void write_labels(const LabelVolume& labels, const std::string& path) {
    labels.validate();
    std::vector<int16_t> buf(labels.labels.size());
    for (size_t i = 0; i < buf.size(); ++i) {
        if (labels.labels[i] > 32767) throw DataError("write_labels: label exceeds int16 range");
        buf[i] = static_cast<int16_t>(labels.labels[i]);
    }
    Nifti1Header h = blank_header(labels.shape, labels.spacing_mm, kDtInt16, 16, "mpum:labels");
    write_blob(path, h, buf.data(), buf.size() * sizeof(int16_t));
}

ReadAnyResult read_any(const std::string& path) {
    RawFile f = read_raw(path);
    ReadAnyResult res;
    const bool is_image = f.header.datatype == kDtFloat32 || has_nontrivial_scaling(f.header) ||
                          (f.descrip.modality.has_value() && !f.descrip.labels_tag);
    if (is_image) res.image = image_from_raw(f);
    else res.labels = labels_from_raw(f, path);
    return res;
}

Volume read_image(const std::string& path) {
    ReadAnyResult res = read_any(path);
    if (!res.image)
        throw DataError(path + ": holds unscaled integer label data, not an image");
    return std::move(*res.image);
}

LabelVolume read_labels(const std::string& path) {
    RawFile f = read_raw(path);
    if (f.header.datatype == kDtFloat32)
        throw DataError(path + ": float32 data cannot be read as labels");
    if (has_nontrivial_scaling(f.header))
        throw DataError(path + ": scaled integer data reads as an image, not labels");
    return labels_from_raw(f, path);
}

void write_volume_raw(const Volume& vol, const std::string& basepath) {
    vol.validate();
    {
        std::ofstream raw(basepath + ".raw", std::ios::binary);
        if (!raw) throw DataError("cannot open for writing: " + basepath + ".raw");
        raw.write(reinterpret_cast<const char*>(vol.data.data()),
                  static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
        if (!raw) throw DataError("write failed: " + basepath + ".raw");
    }
    nlohmann::json j;
    j["shape"] = vol.shape;
    j["spacing_mm"] = vol.spacing_mm;
    j["modality"] = vol.modality;
    j["normalized"] = vol.normalized;
    if (vol.pet_meta)
        j["pet_meta"] = {{"injected_dose_MBq", vol.pet_meta->injected_dose_MBq},
                         {"body_weight_kg", vol.pet_meta->body_weight_kg}};
    std::ofstream js(basepath + ".json");
    if (!js) throw DataError("cannot open for writing: " + basepath + ".json");
    js << j.dump(2) << "\n";
}

Volume read_volume_raw(const std::string& basepath) {
    std::ifstream js(basepath + ".json");
    if (!js) throw DataError("cannot open: " + basepath + ".json");
    nlohmann::json j;
    try {
        js >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(basepath + ".json: " + e.what());
    }
    Volume vol;
    try {
        auto shape = j.at("shape").get<std::vector<int64_t>>();
        auto spacing = j.at("spacing_mm").get<std::vector<double>>();
        if (shape.size() != 3 || spacing.size() != 3)
            throw FormatError(basepath + ".json: shape and spacing_mm must have 3 entries");
        std::copy(shape.begin(), shape.end(), vol.shape.begin());
        std::copy(spacing.begin(), spacing.end(), vol.spacing_mm.begin());
        vol.modality = j.at("modality").get<std::string>();
        vol.normalized = j.value("normalized", false);
        if (j.contains("pet_meta"))
            vol.pet_meta = PetMeta{j["pet_meta"].at("injected_dose_MBq").get<double>(),
                                   j["pet_meta"].at("body_weight_kg").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(basepath + ".json: " + e.what());
    }

    std::ifstream raw(basepath + ".raw", std::ios::binary | std::ios::ate);
    if (!raw) throw DataError("cannot open: " + basepath + ".raw");
    const std::streamsize bytes = raw.tellg();
    const int64_t expect = vol.numel() * static_cast<int64_t>(sizeof(float));
    if (bytes != expect)
        throw FormatError(basepath + ".raw: has " + std::to_string(bytes) + " bytes, sidecar implies " +
                          std::to_string(expect));
    raw.seekg(0);
    vol.data.resize(static_cast<size_t>(vol.numel()));
    raw.read(reinterpret_cast<char*>(vol.data.data()), bytes);
    if (!raw) throw FormatError(basepath + ".raw: read failed");
    vol.validate();
    return vol;
}

}  // namespace mpum
