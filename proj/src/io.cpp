#include "voxseg/io.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "voxseg/errors.hpp"

namespace voxseg {

namespace {

using nlohmann::json;

constexpr char kVoxMagic[8] = {'V', 'O', 'X', 'R', 'A', 'W', '0', '1'};

// Labels ride the same container as images; "kind" tells them apart.
struct RawVolume {
  Tensor data;
  std::array<double, 3> spacing;
  std::string id;
  std::string kind;
};

void write_vox_raw(const std::string& path, const Tensor& data,
                   const std::array<double, 3>& spacing, const std::string& id,
                   const std::string& kind) {
  if (!data.defined() || data.rank() != 3) {
    throw DimensionError("write_vox expects a rank-3 [D,H,W] tensor");
  }
  json meta;
  meta["dims"] = {data.dim(0), data.dim(1), data.dim(2)};
  meta["spacing"] = {spacing[0], spacing[1], spacing[2]};
  meta["dtype"] = "f32";
  meta["kind"] = kind;
  meta["id"] = id;
  const std::string meta_str = meta.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write(kVoxMagic, sizeof(kVoxMagic));
  const std::uint32_t len = static_cast<std::uint32_t>(meta_str.size());
  const unsigned char len_le[4] = {static_cast<unsigned char>(len & 0xff),
                                   static_cast<unsigned char>((len >> 8) & 0xff),
                                   static_cast<unsigned char>((len >> 16) & 0xff),
                                   static_cast<unsigned char>((len >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(len_le), 4);
  f.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  // host is little-endian (x86/ARM64); floats are written as-is
  f.write(reinterpret_cast<const char*>(data.data().data()),
          static_cast<std::streamsize>(data.numel() * sizeof(float)));
  if (!f) throw DataError("short write to " + path);
}

RawVolume load_vox_raw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);

  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, kVoxMagic, 8) != 0) {
    throw ParseError(path + ": bad magic, not a VOXRAW01 file");
  }
  unsigned char len_le[4];
  if (!f.read(reinterpret_cast<char*>(len_le), 4)) {
    throw ParseError(path + ": truncated metadata length");
  }
  const std::uint32_t len = static_cast<std::uint32_t>(len_le[0]) |
                            (static_cast<std::uint32_t>(len_le[1]) << 8) |
                            (static_cast<std::uint32_t>(len_le[2]) << 16) |
                            (static_cast<std::uint32_t>(len_le[3]) << 24);
  std::string meta_str(len, '\0');
  if (!f.read(meta_str.data(), len)) throw ParseError(path + ": truncated metadata");

  json meta;
  try {
    meta = json::parse(meta_str);
  } catch (const json::exception& e) {
    throw ParseError(path + ": metadata is not valid JSON: " + e.what());
  }
  if (!meta.contains("dims") || !meta["dims"].is_array() || meta["dims"].size() != 3) {
    throw ParseError(path + ": metadata lacks 3-element dims");
  }
  if (meta.value("dtype", "") != "f32") {
    throw ParseError(path + ": unsupported dtype '" + meta.value("dtype", "") + "'");
  }

  RawVolume rv;
  Shape dims{meta["dims"][0].get<std::int64_t>(), meta["dims"][1].get<std::int64_t>(),
             meta["dims"][2].get<std::int64_t>()};
  rv.data = Tensor(dims);
  rv.kind = meta.value("kind", "image");
  rv.id = meta.value("id", "");
  rv.spacing = {1.0, 1.0, 1.0};
  if (meta.contains("spacing")) {
    for (int i = 0; i < 3; ++i) rv.spacing[static_cast<std::size_t>(i)] = meta["spacing"][static_cast<std::size_t>(i)].get<double>();
  }
  if (!f.read(reinterpret_cast<char*>(rv.data.data().data()),
              static_cast<std::streamsize>(rv.data.numel() * sizeof(float)))) {
    throw ParseError(path + ": payload shorter than dims imply");
  }
  return rv;
}

void validate_labels(const Tensor& t, const std::string& path) {
  for (float v : t.data()) {
    if (v != 0.0f && v != 1.0f && v != 2.0f) {
      throw DataError(path + ": label value " + std::to_string(v) + " outside {0,1,2}");
    }
  }
}

// --- NIfTI-1 ---------------------------------------------------------------

std::int16_t le16(const unsigned char* p) {
  return static_cast<std::int16_t>(p[0] | (p[1] << 8));
}
std::int32_t le32(const unsigned char* p) {
  return static_cast<std::int32_t>(static_cast<std::uint32_t>(p[0]) |
                                   (static_cast<std::uint32_t>(p[1]) << 8) |
                                   (static_cast<std::uint32_t>(p[2]) << 16) |
                                   (static_cast<std::uint32_t>(p[3]) << 24));
}
float lef32(const unsigned char* p) {
  std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                    (static_cast<std::uint32_t>(p[2]) << 16) |
                    (static_cast<std::uint32_t>(p[3]) << 24);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}
double lef64(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int i = 7; i >= 0; --i) u = (u << 8) | p[i];
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}

std::vector<unsigned char> gz_read_all(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");  // transparently handles plain files
  if (!f) throw DataError("cannot open " + path);
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) {
    out.insert(out.end(), buf, buf + n);
  }
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw ParseError(path + ": gzip stream error");
  return out;
}

RawVolume load_nifti_raw(const std::string& path) {
  const std::vector<unsigned char> bytes = gz_read_all(path);
  if (bytes.size() < 352) throw ParseError(path + ": file shorter than a NIfTI-1 header");
  const unsigned char* h = bytes.data();

  if (le32(h + 0) != 348) {
    throw ParseError(path + ": sizeof_hdr != 348 (not little-endian NIfTI-1)");
  }
  if (std::memcmp(h + 344, "n+1", 3) != 0) {
    throw ParseError(path + ": magic is not 'n+1' (detached .hdr/.img pairs unsupported)");
  }

  const std::int16_t ndim = le16(h + 40);
  if (ndim < 3) throw ParseError(path + ": fewer than 3 dimensions");
  const std::int64_t nx = le16(h + 42), ny = le16(h + 44), nz = le16(h + 46);
  for (int d = 4; d <= ndim && d <= 7; ++d) {
    if (le16(h + 40 + 2 * d) > 1) {
      throw ParseError(path + ": only 3-D volumes are supported");
    }
  }
  if (nx < 1 || ny < 1 || nz < 1) throw ParseError(path + ": non-positive dimension");

  const std::int16_t datatype = le16(h + 70);
  const float vox_offset = lef32(h + 108);
  const double sx = lef32(h + 76 + 4), sy = lef32(h + 76 + 8), sz = lef32(h + 76 + 12);
  if (!(sx > 0.0) || !(sy > 0.0) || !(sz > 0.0)) {
    throw DataError(path + ": non-positive pixdim");
  }

  std::size_t elem = 0;
  switch (datatype) {
    case 2: elem = 1; break;    // uint8
    case 4: elem = 2; break;    // int16
    case 8: elem = 4; break;    // int32
    case 16: elem = 4; break;   // float32
    case 64: elem = 8; break;   // float64
    default:
      throw ParseError(path + ": unsupported NIfTI datatype " + std::to_string(datatype));
  }

  const std::size_t count = static_cast<std::size_t>(nx * ny * nz);
  const std::size_t offset = static_cast<std::size_t>(vox_offset);
  if (bytes.size() < offset + count * elem) {
    throw ParseError(path + ": payload shorter than dims imply");
  }
  const unsigned char* p = bytes.data() + offset;

  RawVolume rv;
  // NIfTI stores x fastest; our [D,H,W] layout has W fastest, so map
  // (nx,ny,nz) -> (W,H,D) and copy straight through.
  rv.data = Tensor(Shape{nz, ny, nx});
  rv.spacing = {sz, sy, sx};
  rv.id = std::filesystem::path(path).filename().string();
  rv.kind = "image";
  float* dst = rv.data.data().data();
  switch (datatype) {
    case 2:
      for (std::size_t i = 0; i < count; ++i) dst[i] = static_cast<float>(p[i]);
      break;
    case 4:
      for (std::size_t i = 0; i < count; ++i) dst[i] = static_cast<float>(le16(p + 2 * i));
      break;
    case 8:
      for (std::size_t i = 0; i < count; ++i) dst[i] = static_cast<float>(le32(p + 4 * i));
      break;
    case 16:
      for (std::size_t i = 0; i < count; ++i) dst[i] = lef32(p + 4 * i);
      break;
    case 64:
      for (std::size_t i = 0; i < count; ++i) dst[i] = static_cast<float>(lef64(p + 8 * i));
      break;
    default: break;  // unreachable
  }
  if (!rv.data.all_finite()) throw DataError(path + ": volume contains non-finite values");
  return rv;
}

bool has_suffix(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

}  // namespace

void write_vox(const std::string& path, const Volume& v) {
  write_vox_raw(path, v.data, v.spacing, v.id, "image");
}

void write_vox_labels(const std::string& path, const LabelMap& l) {
  write_vox_raw(path, l.labels, l.spacing, l.id, "label");
}

void write_nifti_labels(const std::string& path, const LabelMap& l) {
  if (l.labels.rank() != 3) throw DimensionError("write_nifti_labels expects a rank-3 volume");
  validate_labels(l.labels, path);
  const Shape& dims = l.labels.shape();  // [D,H,W]

  unsigned char h[352] = {0};
  const auto put16 = [&](std::size_t off, std::uint16_t v) {
    h[off] = static_cast<unsigned char>(v & 0xff);
    h[off + 1] = static_cast<unsigned char>(v >> 8);
  };
  const auto put32 = [&](std::size_t off, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) h[off + static_cast<std::size_t>(i)] =
        static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  };
  const auto putf32 = [&](std::size_t off, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put32(off, u);
  };

  put32(0, 348);  // sizeof_hdr
  // dim[]: NIfTI stores x fastest, our W axis
  put16(40, 3);
  put16(42, static_cast<std::uint16_t>(dims[2]));  // nx = W
  put16(44, static_cast<std::uint16_t>(dims[1]));  // ny = H
  put16(46, static_cast<std::uint16_t>(dims[0]));  // nz = D
  for (std::size_t d = 4; d <= 7; ++d) put16(40 + 2 * d, 1);
  put16(70, 2);  // datatype: uint8
  put16(72, 8);  // bitpix
  putf32(76, 1.0f);                                      // pixdim[0] (qfac)
  putf32(80, static_cast<float>(l.spacing[2]));          // pixdim[1] = W spacing
  putf32(84, static_cast<float>(l.spacing[1]));          // pixdim[2] = H spacing
  putf32(88, static_cast<float>(l.spacing[0]));          // pixdim[3] = D spacing
  putf32(108, 352.0f);                                   // vox_offset
  std::memcpy(h + 344, "n+1", 4);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(h), 352);
  std::vector<unsigned char> payload(static_cast<std::size_t>(l.labels.numel()));
  for (std::size_t i = 0; i < payload.size(); ++i) {
    payload[i] = static_cast<unsigned char>(l.labels.data()[i]);
  }
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!f) throw DataError("short write to " + path);
}

Volume load_volume_vox(const std::string& path) {
  RawVolume rv = load_vox_raw(path);
  if (!rv.data.all_finite()) throw DataError(path + ": volume contains non-finite values");
  return Volume{rv.data, rv.spacing, rv.id};
}

LabelMap load_labels_vox(const std::string& path) {
  RawVolume rv = load_vox_raw(path);
  validate_labels(rv.data, path);
  return LabelMap{rv.data, rv.spacing, rv.id};
}

Volume load_volume_nifti(const std::string& path) {
  RawVolume rv = load_nifti_raw(path);
  return Volume{rv.data, rv.spacing, rv.id};
}

LabelMap load_labels_nifti(const std::string& path) {
  RawVolume rv = load_nifti_raw(path);
  validate_labels(rv.data, path);
  return LabelMap{rv.data, rv.spacing, rv.id};
}

Volume load_volume(const std::string& path) {
  if (has_suffix(path, ".vox")) return load_volume_vox(path);
  if (has_suffix(path, ".nii") || has_suffix(path, ".nii.gz")) return load_volume_nifti(path);
  throw DataError(path + ": unknown volume extension (expected .vox, .nii or .nii.gz)");
}

LabelMap load_labels(const std::string& path) {
  if (has_suffix(path, ".vox")) return load_labels_vox(path);
  if (has_suffix(path, ".nii") || has_suffix(path, ".nii.gz")) return load_labels_nifti(path);
  throw DataError(path + ": unknown labels extension (expected .vox, .nii or .nii.gz)");
}

std::vector<CaseEntry> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path);
  json doc;
  try {
    f >> doc;
  } catch (const json::exception& e) {
    throw ParseError(path + ": manifest is not valid JSON: " + e.what());
  }
  if (!doc.contains("cases") || !doc["cases"].is_array()) {
    throw ParseError(path + ": manifest lacks a 'cases' array");
  }
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::vector<CaseEntry> out;
  for (const auto& c : doc["cases"]) {
    for (const char* key : {"id", "image", "labels"}) {
      if (!c.contains(key)) throw ParseError(path + ": case entry missing '" + key + "'");
    }
    CaseEntry e;
    e.id = c["id"].get<std::string>();
    const auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    e.image_path = resolve(c["image"].get<std::string>());
    e.labels_path = resolve(c["labels"].get<std::string>());
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<CaseEntry>& cases) {
  json doc;
  doc["cases"] = json::array();
  for (const CaseEntry& c : cases) {
    doc["cases"].push_back({{"id", c.id}, {"image", c.image_path}, {"labels", c.labels_path}});
  }
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f << doc.dump(2) << "\n";
}

}  // namespace voxseg
