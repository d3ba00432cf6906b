#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "voxseg/errors.hpp"
#include "voxseg/io.hpp"

using namespace voxseg;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  const fs::path dir = fs::temp_directory_path() / "voxseg-io-tests";
  fs::create_directories(dir);
  return dir;
}

std::string path_of(const std::string& name) { return (test_dir() / name).string(); }

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), {});
}

void put16(std::vector<unsigned char>& b, std::size_t off, std::int16_t v) {
  b[off] = static_cast<unsigned char>(v & 0xff);
  b[off + 1] = static_cast<unsigned char>((v >> 8) & 0xff);
}

void put32(std::vector<unsigned char>& b, std::size_t off, std::int32_t v) {
  for (int i = 0; i < 4; ++i) b[off + static_cast<std::size_t>(i)] =
      static_cast<unsigned char>((static_cast<std::uint32_t>(v) >> (8 * i)) & 0xff);
}

void putf32(std::vector<unsigned char>& b, std::size_t off, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  for (int i = 0; i < 4; ++i)
    b[off + static_cast<std::size_t>(i)] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
}

// Minimal little-endian single-file NIfTI-1: header + payload at offset 352.
std::vector<unsigned char> nifti_bytes(std::int16_t nx, std::int16_t ny, std::int16_t nz,
                                       std::int16_t datatype, float px, float py, float pz,
                                       const std::vector<unsigned char>& payload) {
  std::vector<unsigned char> b(352, 0);
  put32(b, 0, 348);          // sizeof_hdr
  put16(b, 40, 3);           // dim[0]
  put16(b, 42, nx);
  put16(b, 44, ny);
  put16(b, 46, nz);
  put16(b, 70, datatype);
  putf32(b, 80, px);         // pixdim[1..3]
  putf32(b, 84, py);
  putf32(b, 88, pz);
  putf32(b, 108, 352.0f);    // vox_offset
  b[344] = 'n'; b[345] = '+'; b[346] = '1'; b[347] = '\0';
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

std::vector<unsigned char> f32_payload(const std::vector<float>& vals) {
  std::vector<unsigned char> p(vals.size() * 4);
  for (std::size_t i = 0; i < vals.size(); ++i) putf32(p, 4 * i, vals[i]);
  return p;
}

void gzip_file(const std::string& src, const std::string& dst) {
  const std::vector<unsigned char> bytes = read_bytes(src);
  gzFile g = gzopen(dst.c_str(), "wb");
  REQUIRE(g != nullptr);
  REQUIRE(gzwrite(g, bytes.data(), static_cast<unsigned>(bytes.size())) ==
          static_cast<int>(bytes.size()));
  gzclose(g);
}

}  // namespace

TEST_CASE("vox round trip preserves data, spacing and id exactly") {
  std::vector<float> vals(64);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.37f * static_cast<float>(i) - 3.0f;
  Volume v{Tensor::from_data({4, 4, 4}, vals), {0.5, 2.0, 1.25}, "case-7"};

  const std::string path = path_of("roundtrip.vox");
  write_vox(path, v);
  const Volume r = load_volume_vox(path);

  CHECK(r.data.shape() == Shape{4, 4, 4});
  CHECK(r.id == "case-7");
  CHECK(r.spacing[0] == 0.5);
  CHECK(r.spacing[1] == 2.0);
  CHECK(r.spacing[2] == 1.25);
  for (std::size_t i = 0; i < vals.size(); ++i) CHECK(r.data.data()[i] == vals[i]);

  // extension dispatch reaches the same reader
  const Volume r2 = load_volume(path);
  CHECK(r2.data.data()[5] == vals[5]);
}

TEST_CASE("vox label round trip validates the value set") {
  LabelMap l{Tensor::from_data({2, 2, 2}, {0, 1, 2, 0, 1, 2, 2, 1}), {1, 1, 1}, "lab"};
  const std::string path = path_of("labels.vox");
  write_vox_labels(path, l);
  const LabelMap r = load_labels_vox(path);
  for (std::size_t i = 0; i < 8; ++i) CHECK(r.labels.data()[i] == l.labels.data()[i]);

  // a volume holding 3.0 is loadable as an image but not as labels
  Volume bad{Tensor::from_data({1, 1, 2}, {1.0f, 3.0f}), {1, 1, 1}, "bad"};
  const std::string bad_path = path_of("bad-labels.vox");
  write_vox(bad_path, bad);
  CHECK_NOTHROW((void)load_volume_vox(bad_path));
  CHECK_THROWS_AS((void)load_labels_vox(bad_path), DataError);
}

TEST_CASE("vox reader raises distinct parse errors") {
  // bad magic
  write_bytes(path_of("magic.vox"), {'N', 'O', 'P', 'E', '0', '0', '0', '1', 0, 0, 0, 0});
  CHECK_THROWS_AS((void)load_volume_vox(path_of("magic.vox")), ParseError);

  // truncated metadata length
  write_bytes(path_of("len.vox"), {'V', 'O', 'X', 'R', 'A', 'W', '0', '1', 9});
  CHECK_THROWS_AS((void)load_volume_vox(path_of("len.vox")), ParseError);

  // metadata shorter than its declared length
  write_bytes(path_of("meta.vox"),
              {'V', 'O', 'X', 'R', 'A', 'W', '0', '1', 100, 0, 0, 0, '{', '}'});
  CHECK_THROWS_AS((void)load_volume_vox(path_of("meta.vox")), ParseError);

  // metadata is not JSON
  {
    std::vector<unsigned char> b = {'V', 'O', 'X', 'R', 'A', 'W', '0', '1', 5, 0, 0, 0,
                                    'h', 'e', 'l', 'l', 'o'};
    write_bytes(path_of("json.vox"), b);
    CHECK_THROWS_AS((void)load_volume_vox(path_of("json.vox")), ParseError);
  }

  // valid JSON without dims
  {
    const std::string meta = R"({"dtype":"f32"})";
    std::vector<unsigned char> b = {'V', 'O', 'X', 'R', 'A', 'W', '0', '1'};
    b.push_back(static_cast<unsigned char>(meta.size()));
    b.insert(b.end(), {0, 0, 0});
    b.insert(b.end(), meta.begin(), meta.end());
    write_bytes(path_of("dims.vox"), b);
    CHECK_THROWS_AS((void)load_volume_vox(path_of("dims.vox")), ParseError);
  }

  // unsupported dtype
  {
    const std::string meta = R"({"dims":[1,1,1],"dtype":"f64"})";
    std::vector<unsigned char> b = {'V', 'O', 'X', 'R', 'A', 'W', '0', '1'};
    b.push_back(static_cast<unsigned char>(meta.size()));
    b.insert(b.end(), {0, 0, 0});
    b.insert(b.end(), meta.begin(), meta.end());
    b.insert(b.end(), {0, 0, 0, 0});
    write_bytes(path_of("dtype.vox"), b);
    CHECK_THROWS_AS((void)load_volume_vox(path_of("dtype.vox")), ParseError);
  }

  // payload shorter than dims imply: truncate a valid file
  {
    Volume v{Tensor::full({4, 4, 4}, 1.0f), {1, 1, 1}, "t"};
    write_vox(path_of("full.vox"), v);
    std::vector<unsigned char> bytes = read_bytes(path_of("full.vox"));
    bytes.resize(bytes.size() - 10);
    write_bytes(path_of("short.vox"), bytes);
    CHECK_THROWS_AS((void)load_volume_vox(path_of("short.vox")), ParseError);
  }

  // missing file is a DataError, not a ParseError
  CHECK_THROWS_AS((void)load_volume_vox(path_of("does-not-exist.vox")), DataError);
}

TEST_CASE("vox image loader rejects non-finite data") {
  Volume v{Tensor::from_data({1, 1, 2}, {1.0f, std::numeric_limits<float>::quiet_NaN()}),
           {1, 1, 1},
           "nan"};
  const std::string path = path_of("nan.vox");
  write_vox(path, v);  // writer is format-only; the loader enforces finiteness
  CHECK_THROWS_AS((void)load_volume_vox(path), DataError);
}

TEST_CASE("nifti reader maps dims, pixdim and x-fastest payload order") {
  // nx=4, ny=2, nz=3 with values 0..23 in x-fastest order
  std::vector<float> vals(24);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(i);
  const auto bytes = nifti_bytes(4, 2, 3, 16, 1.5f, 2.0f, 2.5f, f32_payload(vals));
  const std::string path = path_of("vol.nii");
  write_bytes(path, bytes);

  const Volume v = load_volume_nifti(path);
  CHECK(v.data.shape() == Shape{3, 2, 4});  // [D,H,W] = (nz,ny,nx)
  CHECK(v.spacing[0] == 2.5);               // sz
  CHECK(v.spacing[1] == 2.0);               // sy
  CHECK(v.spacing[2] == 1.5);               // sx
  // W is fastest in our layout, x is fastest in the file: a straight copy
  for (std::size_t i = 0; i < vals.size(); ++i) CHECK(v.data.data()[i] == vals[i]);
}

TEST_CASE("nifti unit pixdim copies through as unit spacing") {
  const auto bytes = nifti_bytes(2, 2, 2, 16, 1.0f, 1.0f, 1.0f, f32_payload(std::vector<float>(8, 0.5f)));
  write_bytes(path_of("unit.nii"), bytes);
  const Volume v = load_volume(path_of("unit.nii"));
  CHECK(v.spacing == std::array<double, 3>{1.0, 1.0, 1.0});
}

TEST_CASE("nifti integer and double datatypes cast to float32") {
  // uint8
  {
    std::vector<unsigned char> payload = {0, 7, 255, 128, 1, 2, 3, 4};
    write_bytes(path_of("u8.nii"), nifti_bytes(2, 2, 2, 2, 1, 1, 1, payload));
    const Volume v = load_volume_nifti(path_of("u8.nii"));
    CHECK(v.data.data()[2] == 255.0f);
    CHECK(v.data.data()[3] == 128.0f);
  }
  // int16 with negatives
  {
    std::vector<unsigned char> payload(16, 0);
    const std::int16_t vals[8] = {-5, 300, 0, 1, -32768, 32767, 12, -1};
    for (std::size_t i = 0; i < 8; ++i) put16(payload, 2 * i, vals[i]);
    write_bytes(path_of("i16.nii"), nifti_bytes(2, 2, 2, 4, 1, 1, 1, payload));
    const Volume v = load_volume_nifti(path_of("i16.nii"));
    for (std::size_t i = 0; i < 8; ++i) CHECK(v.data.data()[i] == static_cast<float>(vals[i]));
  }
  // int32
  {
    std::vector<unsigned char> payload(32, 0);
    const std::int32_t vals[8] = {-100000, 100000, 0, 1, -1, 7, 8, 9};
    for (std::size_t i = 0; i < 8; ++i) put32(payload, 4 * i, vals[i]);
    write_bytes(path_of("i32.nii"), nifti_bytes(2, 2, 2, 8, 1, 1, 1, payload));
    const Volume v = load_volume_nifti(path_of("i32.nii"));
    for (std::size_t i = 0; i < 8; ++i) CHECK(v.data.data()[i] == static_cast<float>(vals[i]));
  }
  // float64
  {
    std::vector<unsigned char> payload(64, 0);
    for (std::size_t i = 0; i < 8; ++i) {
      const double d = 0.125 * static_cast<double>(i) - 0.4;
      std::uint64_t u;
      std::memcpy(&u, &d, 8);
      for (int b = 0; b < 8; ++b)
        payload[8 * i + static_cast<std::size_t>(b)] =
            static_cast<unsigned char>((u >> (8 * b)) & 0xff);
    }
    write_bytes(path_of("f64.nii"), nifti_bytes(2, 2, 2, 64, 1, 1, 1, payload));
    const Volume v = load_volume_nifti(path_of("f64.nii"));
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(v.data.data()[i] ==
            doctest::Approx(0.125 * static_cast<double>(i) - 0.4).epsilon(1e-6));
    }
  }
}

TEST_CASE("nifti gzip-compressed volumes load identically") {
  std::vector<float> vals(27);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.25f * static_cast<float>(i);
  write_bytes(path_of("plain.nii"), nifti_bytes(3, 3, 3, 16, 1, 1, 1, f32_payload(vals)));
  gzip_file(path_of("plain.nii"), path_of("zipped.nii.gz"));

  const Volume a = load_volume(path_of("plain.nii"));
  const Volume b = load_volume(path_of("zipped.nii.gz"));
  CHECK(a.data.shape() == b.data.shape());
  for (std::size_t i = 0; i < vals.size(); ++i) CHECK(a.data.data()[i] == b.data.data()[i]);
}

TEST_CASE("nifti reader raises distinct errors for malformed headers") {
  const auto good = nifti_bytes(2, 2, 2, 16, 1, 1, 1, f32_payload(std::vector<float>(8, 0.0f)));

  // wrong sizeof_hdr (big-endian or not NIfTI at all)
  {
    auto b = good;
    put32(b, 0, 349);
    write_bytes(path_of("hdr.nii"), b);
    CHECK_THROWS_AS((void)load_volume_nifti(path_of("hdr.nii")), ParseError);
  }
  // wrong magic (detached pair)
  {
    auto b = good;
    b[344] = 'n'; b[345] = 'i'; b[346] = '1';
    write_bytes(path_of("pair.nii"), b);
    CHECK_THROWS_AS((void)load_volume_nifti(path_of("pair.nii")), ParseError);
  }
  // unsupported datatype (complex64 = 32)
  {
    auto b = good;
    put16(b, 70, 32);
    write_bytes(path_of("cplx.nii"), b);
    CHECK_THROWS_AS((void)load_volume_nifti(path_of("cplx.nii")), ParseError);
  }
  // 4-D volume with a real time axis
  {
    auto b = good;
    put16(b, 40, 4);
    put16(b, 48, 2);  // dim[4] = 2 timepoints
    write_bytes(path_of("4d.nii"), b);
    CHECK_THROWS_AS((void)load_volume_nifti(path_of("4d.nii")), ParseError);
  }
  // truncated payload
  {
    auto b = good;
    b.resize(b.size() - 4);
    write_bytes(path_of("trunc.nii"), b);
    CHECK_THROWS_AS((void)load_volume_nifti(path_of("trunc.nii")), ParseError);
  }
  // zero pixdim
  {
    auto b = good;
    putf32(b, 80, 0.0f);
    write_bytes(path_of("pixdim.nii"), b);
    CHECK_THROWS_AS((void)load_volume_nifti(path_of("pixdim.nii")), DataError);
  }
}

TEST_CASE("nifti labels go through the same value-set validation") {
  write_bytes(path_of("lab-ok.nii"),
              nifti_bytes(2, 1, 1, 2, 1, 1, 1, std::vector<unsigned char>{1, 2}));
  const LabelMap ok = load_labels(path_of("lab-ok.nii"));
  CHECK(ok.labels.data()[0] == 1.0f);
  CHECK(ok.labels.data()[1] == 2.0f);

  write_bytes(path_of("lab-bad.nii"),
              nifti_bytes(2, 1, 1, 2, 1, 1, 1, std::vector<unsigned char>{1, 9}));
  CHECK_THROWS_AS((void)load_labels(path_of("lab-bad.nii")), DataError);
}

TEST_CASE("nifti label writer round-trips through the reader") {
  LabelMap l;
  l.labels = Tensor({3, 4, 5});
  l.spacing = {2.5, 1.0, 0.5};
  l.id = "export";
  for (std::size_t i = 0; i < l.labels.data().size(); ++i) {
    l.labels.data()[i] = static_cast<float>(i % 3);
  }
  const std::string path = path_of("export.nii");
  write_nifti_labels(path, l);

  const LabelMap back = load_labels_nifti(path);
  REQUIRE(back.labels.shape() == l.labels.shape());
  CHECK(back.spacing[0] == doctest::Approx(2.5));
  CHECK(back.spacing[1] == doctest::Approx(1.0));
  CHECK(back.spacing[2] == doctest::Approx(0.5));
  for (std::size_t i = 0; i < l.labels.data().size(); ++i) {
    CHECK(back.labels.data()[i] == l.labels.data()[i]);
  }

  // the payload is uint8, one byte per voxel at offset 352
  CHECK(read_bytes(path).size() == 352 + 3 * 4 * 5);

  LabelMap bad = l;
  bad.labels.data()[0] = 7.0f;
  CHECK_THROWS_AS(write_nifti_labels(path_of("bad.nii"), bad), DataError);
}

TEST_CASE("unknown extensions are rejected up front") {
  CHECK_THROWS_AS((void)load_volume(path_of("volume.raw")), DataError);
  CHECK_THROWS_AS((void)load_labels(path_of("labels.mha")), DataError);
}

TEST_CASE("manifest round trip and relative path resolution") {
  const std::vector<CaseEntry> cases = {
      {"a", (test_dir() / "a-img.vox").string(), (test_dir() / "a-lab.vox").string()},
      {"b", (test_dir() / "b-img.vox").string(), (test_dir() / "b-lab.vox").string()},
  };
  const std::string path = path_of("dataset.json");
  write_manifest(path, cases);
  const std::vector<CaseEntry> loaded = load_manifest(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "a");
  CHECK(loaded[0].image_path == cases[0].image_path);
  CHECK(loaded[1].labels_path == cases[1].labels_path);

  // relative paths resolve against the manifest directory
  {
    std::ofstream f(path_of("rel.json"));
    f << R"({"cases":[{"id":"r","image":"img/r.vox","labels":"lab/r.vox"}]})";
  }
  const std::vector<CaseEntry> rel = load_manifest(path_of("rel.json"));
  REQUIRE(rel.size() == 1);
  CHECK(rel[0].image_path == (test_dir() / "img/r.vox").string());
  CHECK(rel[0].labels_path == (test_dir() / "lab/r.vox").string());
}

TEST_CASE("manifest loader rejects malformed documents") {
  {
    std::ofstream f(path_of("bad1.json"));
    f << "{not json";
  }
  CHECK_THROWS_AS((void)load_manifest(path_of("bad1.json")), ParseError);

  {
    std::ofstream f(path_of("bad2.json"));
    f << R"({"entries":[]})";
  }
  CHECK_THROWS_AS((void)load_manifest(path_of("bad2.json")), ParseError);

  {
    std::ofstream f(path_of("bad3.json"));
    f << R"({"cases":[{"id":"x","image":"i.vox"}]})";
  }
  CHECK_THROWS_AS((void)load_manifest(path_of("bad3.json")), ParseError);

  CHECK_THROWS_AS((void)load_manifest(path_of("missing.json")), DataError);
}
