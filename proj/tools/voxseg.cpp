// voxseg CLI: train / eval / predict / gradcheck / synth / overlay.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort,
// 5 checkpoint/architecture mismatch, 6 tolerance exceeded.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "voxseg/checks.hpp"
#include "voxseg/config.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/io.hpp"
#include "voxseg/synth.hpp"
#include "voxseg/trainer.hpp"

#ifndef VOXSEG_BUILD_ID
#define VOXSEG_BUILD_ID "unknown"
#endif

namespace {

using namespace voxseg;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;
constexpr int kExitCheckpoint = 5;
constexpr int kExitTolerance = 6;

/// Exclusive lock on an output directory so concurrent runs cannot
/// interleave writes. Removed on destruction.
class OutDirLock {
 public:
  explicit OutDirLock(const std::string& out_dir) : path_(out_dir + "/.lock") {
    std::filesystem::create_directories(out_dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw ConfigError("out-dir is locked by another run (remove " + path_ + " if stale)");
    }
  }
  ~OutDirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  OutDirLock(const OutDirLock&) = delete;
  OutDirLock& operator=(const OutDirLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

std::string arch_to_variant(const std::string& arch) {
  if (arch == "unet3d-dilated") return "unet3d_dilated";
  return arch;
}

/// Common flag overrides applied on top of the config file.
struct Overrides {
  std::string arch;
  std::string data_manifest;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load_effective_config(const std::string& config_path, const Overrides& ov) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const DataError& e) {
    // an unreadable config file is a configuration problem, not a data one
    throw ConfigError(e.what());
  }
  if (!ov.arch.empty()) cfg.train.model.variant = arch_to_variant(ov.arch);
  if (ov.seed_set) cfg.train.seed = ov.seed;
  if (!ov.data_manifest.empty()) {
    cfg.data.type = "manifest";
    cfg.data.manifest = ov.data_manifest;
  }
  validate_train_config(cfg.train);
  return cfg;
}

struct Dataset {
  std::vector<Case> cases;
  std::vector<std::string> ids;
  std::vector<std::string> image_paths;  // empty for synthetic cases
};

Dataset load_dataset(const DataConfig& d) {
  if (d.type.empty()) {
    throw ConfigError("config: missing required section 'data'");
  }
  Dataset ds;
  if (d.type == "synthetic") {
    synth::SynthSpec proto;
    proto.dims = d.dims;
    proto.spacing = d.spacing;
    proto.noise_std = d.noise_std;
    for (auto& [img, lab] : synth::make_dataset(static_cast<std::size_t>(d.num_cases), d.seed,
                                                proto)) {
      ds.ids.push_back(img.id);
      ds.image_paths.emplace_back();
      ds.cases.push_back(Case{std::move(img), std::move(lab)});
    }
    return ds;
  }
  for (const CaseEntry& e : load_manifest(d.manifest)) {
    Volume img = load_volume(e.image_path);
    LabelMap lab = load_labels(e.labels_path);
    img.id = e.id;
    lab.id = e.id;
    if (img.data.shape() != lab.labels.shape()) {
      throw DataError("case '" + e.id + "': image and labels shapes differ");
    }
    ds.ids.push_back(e.id);
    ds.image_paths.push_back(e.image_path);
    ds.cases.push_back(Case{std::move(img), std::move(lab)});
  }
  return ds;
}

void write_run_manifest(const std::string& out_dir, const RunConfig& cfg, const SplitPlan& split,
                        int fold_index) {
  json j;
  j["build_id"] = VOXSEG_BUILD_ID;
  j["config"] = json::parse(dump_run_config(cfg));
  j["fold_index"] = fold_index;
  j["format_versions"] = {{"checkpoint", 1}, {"history", 1}, {"vox", "VOXRAW01"}};
  j["label_mapping"] = {{"background", 0}, {"head", 1}, {"body", 2}};
  j["rng_algorithm"] = "xoshiro256**";
  j["seed"] = cfg.train.seed;
  j["split"] = {{"test", split.test_ids}, {"folds", split.folds}};
  std::ofstream f(out_dir + "/run_manifest.json");
  if (!f) throw DataError("cannot write " + out_dir + "/run_manifest.json");
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const Overrides& ov, const std::string& out_dir,
              int fold, const std::string& checkpoint) {
  RunConfig cfg = load_effective_config(config_path, ov);
  if (fold < 0 || fold > 8) {
    throw ConfigError("--fold must lie in [0, 8], got " + std::to_string(fold));
  }
  Dataset ds = load_dataset(cfg.data);
  const SplitPlan split = make_split(ds.ids, cfg.train.seed);

  OutDirLock lock(out_dir);
  write_run_manifest(out_dir, cfg, split, fold);

  TrainerState state =
      checkpoint.empty() ? init_state(cfg.train) : load_checkpoint(checkpoint, cfg.train.model);
  const FoldResult res = train_fold(cfg.train, ds.cases, split, fold, state, out_dir);

  std::printf("fold %d: %zu epochs, best val loss %.6f at epoch %d\n", fold, res.history.size(),
              res.best_val_loss, res.best_epoch);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

json report_json(const MetricsReport& r) {
  json per_class;
  for (const auto& [cls, m] : r.per_class) {
    per_class[std::to_string(cls)] = {{"dsc", m.dsc}, {"ji", m.ji}, {"nsd", m.nsd}};
  }
  return json{{"case_id", r.case_id},
              {"per_class", per_class},
              {"mean_foreground",
               {{"dsc", r.mean_foreground.dsc},
                {"ji", r.mean_foreground.ji},
                {"nsd", r.mean_foreground.nsd}}}};
}

int cmd_eval(const std::string& config_path, const Overrides& ov, const std::string& out_dir,
             const std::string& checkpoint, const std::string& predictions_dir) {
  RunConfig cfg = load_effective_config(config_path, ov);
  Dataset ds = load_dataset(cfg.data);
  if (ds.cases.empty()) throw DataError("empty case list");
  if (checkpoint.empty() == predictions_dir.empty()) {
    throw ConfigError("eval needs exactly one of --checkpoint or --predictions-dir");
  }

  std::vector<MetricsReport> reports;
  if (!predictions_dir.empty()) {
    for (const Case& c : ds.cases) {
      const std::string pred_path = predictions_dir + "/" + c.image.id + "_pred.vox";
      const LabelMap pred = load_labels_vox(pred_path);
      if (pred.labels.shape() != c.labels.labels.shape()) {
        throw DataError(pred_path + ": prediction dims do not match the case");
      }
      reports.push_back(
          evaluate_case(pred.labels, c.labels.labels, c.image.spacing, c.image.id));
    }
  } else {
    TrainerState state = load_checkpoint(checkpoint, cfg.train.model);
    reports = evaluate(state.model, ds.cases, cfg.train.patch_dims);
  }

  std::ofstream out;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    out.open(out_dir + "/metrics.jsonl");
    if (!out) throw DataError("cannot write " + out_dir + "/metrics.jsonl");
  }
  ClassMetrics head{}, body{}, fg{};
  for (const MetricsReport& r : reports) {
    const json line = report_json(r);
    std::cout << line.dump() << "\n";
    if (out.is_open()) out << line.dump() << "\n";
    head.dsc += r.per_class.at(1).dsc;
    head.ji += r.per_class.at(1).ji;
    head.nsd += r.per_class.at(1).nsd;
    body.dsc += r.per_class.at(2).dsc;
    body.ji += r.per_class.at(2).ji;
    body.nsd += r.per_class.at(2).nsd;
    fg.dsc += r.mean_foreground.dsc;
    fg.ji += r.mean_foreground.ji;
    fg.nsd += r.mean_foreground.nsd;
  }
  const double n = static_cast<double>(reports.size());
  std::printf("aggregate over %zu cases (DSC / JI / NSD):\n", reports.size());
  std::printf("  head  %.4f  %.4f  %.4f\n", head.dsc / n, head.ji / n, head.nsd / n);
  std::printf("  body  %.4f  %.4f  %.4f\n", body.dsc / n, body.ji / n, body.nsd / n);
  std::printf("  mean  %.4f  %.4f  %.4f\n", fg.dsc / n, fg.ji / n, fg.nsd / n);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

bool is_nifti_path(const std::string& p) {
  return p.size() >= 4 && (p.ends_with(".nii") || p.ends_with(".nii.gz"));
}

int cmd_predict(const std::string& config_path, const Overrides& ov, const std::string& out_dir,
                const std::string& checkpoint) {
  RunConfig cfg = load_effective_config(config_path, ov);
  Dataset ds = load_dataset(cfg.data);
  if (ds.cases.empty()) throw DataError("empty case list");

  TrainerState state = load_checkpoint(checkpoint, cfg.train.model);
  OutDirLock lock(out_dir);

  for (std::size_t i = 0; i < ds.cases.size(); ++i) {
    const Case& c = ds.cases[i];
    const Tensor pred = predict_labels(state.model, c.image, cfg.train.patch_dims);
    const LabelMap out{pred, c.image.spacing, c.image.id};
    write_vox_labels(out_dir + "/" + c.image.id + "_pred.vox", out);
    if (is_nifti_path(ds.image_paths[i])) {
      write_nifti_labels(out_dir + "/" + c.image.id + "_pred.nii", out);
    }
  }
  std::printf("wrote %zu predictions to %s\n", ds.cases.size(), out_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, int instances, double tolerance) {
  bool all_pass = true;
  const auto print = [&](const checks::CheckResult& r, const char* metric) {
    std::printf("%-26s  n=%-3d  %s=%.3e  %s\n", r.name.c_str(), r.instances, metric, r.worst,
                r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  };
  for (const auto& r : checks::gradient_suite(seed, instances, tolerance)) {
    print(r, "max_rel_err");
  }
  print(checks::conv_oracle(seed, 50, 1e-4), "max_abs_err");
  print(checks::nsd_oracle(seed, 200), "mismatches");
  if (!all_pass) {
    std::fprintf(stderr, "gradcheck: tolerance exceeded\n");
    return kExitTolerance;
  }
  std::printf("all checks passed\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(int n, std::uint64_t seed, const std::string& out_dir,
              std::vector<std::int64_t> dims, double noise_std) {
  if (n < 1) throw ConfigError("--n must be at least 1");
  if (dims.size() != 3) throw ConfigError("--dims needs exactly 3 values");
  synth::SynthSpec proto;
  proto.dims = Shape{dims[0], dims[1], dims[2]};
  proto.noise_std = noise_std;

  OutDirLock lock(out_dir);
  std::vector<CaseEntry> entries;
  for (auto& [img, lab] : synth::make_dataset(static_cast<std::size_t>(n), seed, proto)) {
    const std::string image_name = img.id + ".vox";
    const std::string labels_name = img.id + "_labels.vox";
    write_vox(out_dir + "/" + image_name, img);
    write_vox_labels(out_dir + "/" + labels_name, lab);
    entries.push_back(CaseEntry{img.id, image_name, labels_name});
  }
  write_manifest(out_dir + "/manifest.json", entries);
  std::printf("wrote %d cases to %s\n", n, out_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// overlay
// ---------------------------------------------------------------------------

/// Axial slice overlay as a binary PPM: the image in grayscale, ground-truth
/// foreground contours on the green channel, prediction contours on the red
/// channel (coincident contours therefore show yellow).
int cmd_overlay(const std::string& image_path, const std::string& labels_path,
                const std::string& pred_path, int slice, const std::string& out_path) {
  const Volume img = load_volume(image_path);
  const LabelMap gt = load_labels(labels_path);
  const LabelMap pred = load_labels(pred_path);
  if (gt.labels.shape() != img.data.shape() || pred.labels.shape() != img.data.shape()) {
    throw DataError("overlay inputs must share one shape");
  }
  const Shape& dims = img.data.shape();  // [D,H,W]
  if (slice < 0) slice = static_cast<int>(dims[0] / 2);
  if (slice >= dims[0]) {
    throw ConfigError("--slice out of range (volume has " + std::to_string(dims[0]) +
                      " axial slices)");
  }

  const std::int64_t H = dims[1], W = dims[2];
  const auto at = [&](const Tensor& t, std::int64_t h, std::int64_t w) {
    return t.data()[static_cast<std::size_t>((slice * H + h) * W + w)];
  };
  // min/max of the slice for display normalization
  float lo = at(img.data, 0, 0), hi = lo;
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      lo = std::min(lo, at(img.data, h, w));
      hi = std::max(hi, at(img.data, h, w));
    }
  const float range = hi > lo ? hi - lo : 1.0f;

  const auto is_contour = [&](const Tensor& lab, std::int64_t h, std::int64_t w) {
    if (at(lab, h, w) == 0.0f) return false;
    if (h == 0 || h == H - 1 || w == 0 || w == W - 1) return true;
    return at(lab, h - 1, w) == 0.0f || at(lab, h + 1, w) == 0.0f ||
           at(lab, h, w - 1) == 0.0f || at(lab, h, w + 1) == 0.0f;
  };

  std::vector<unsigned char> rgb(static_cast<std::size_t>(H * W * 3));
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      const auto base =
          static_cast<unsigned char>(255.0f * (at(img.data, h, w) - lo) / range);
      unsigned char r = base, g = base, b = base;
      if (is_contour(gt.labels, h, w)) {
        g = 255;
        b = 0;
      }
      if (is_contour(pred.labels, h, w)) {
        r = 255;
        b = 0;
      }
      const std::size_t o = static_cast<std::size_t>((h * W + w) * 3);
      rgb[o] = r;
      rgb[o + 1] = g;
      rgb[o + 2] = b;
    }

  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw DataError("cannot write " + out_path);
  f << "P6\n" << W << " " << H << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  std::printf("wrote %s (slice %d)\n", out_path.c_str(), slice);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxseg: volumetric hippocampus segmentation workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, predictions_dir;
  std::string image_path, labels_path, pred_path, overlay_out;
  Overrides ov;
  int fold = 0, n_cases = 10, instances = 20, slice = -1;
  std::uint64_t seed = 0;
  double tolerance = 1e-2, noise_std = 0.05;
  std::vector<std::int64_t> dims{32, 32, 32};

  const auto add_common = [&](CLI::App* sub, bool need_config) {
    auto* copt = sub->add_option("--config", config_path, "run configuration file (JSON)");
    if (need_config) copt->required();
    sub->add_option("--seed", ov.seed, "override the training seed")
        ->each([&](const std::string&) { ov.seed_set = true; });
    sub->add_option("--arch", ov.arch, "override the model variant")
        ->check(CLI::IsMember({"unet3d", "unet3d-dilated", "proposed"}));
    sub->add_option("--data-manifest", ov.data_manifest,
                    "override the data section with a case manifest");
  };

  auto* train = app.add_subcommand("train", "train one cross-validation fold");
  add_common(train, true);
  train->add_option("--out-dir", out_dir, "output directory")->required();
  train->add_option("--fold", fold, "validation fold index (0-8)");
  train->add_option("--checkpoint", checkpoint, "resume from this checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or stored predictions");
  add_common(eval, true);
  eval->add_option("--out-dir", out_dir, "where to write metrics.jsonl (optional)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  eval->add_option("--predictions-dir", predictions_dir,
                   "evaluate <id>_pred.vox files instead of a checkpoint");

  auto* predict = app.add_subcommand("predict", "write label-map predictions");
  add_common(predict, true);
  predict->add_option("--out-dir", out_dir, "output directory")->required();
  predict->add_option("--checkpoint", checkpoint, "checkpoint to predict with")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "run the gradient and oracle suites");
  gradcheck->add_option("--seed", seed, "suite seed");
  gradcheck->add_option("--instances", instances, "instances per op")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", tolerance, "max relative error tolerance");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--n", n_cases, "number of cases")->required();
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out-dir", out_dir, "output directory")->required();
  synth->add_option("--dims", dims, "case dims D H W")->expected(3);
  synth->add_option("--noise-std", noise_std, "intensity noise level");

  auto* overlay = app.add_subcommand("overlay", "write an axial contour-overlay image (PPM)");
  overlay->add_option("--image", image_path, "intensity volume")->required();
  overlay->add_option("--labels", labels_path, "ground-truth labels")->required();
  overlay->add_option("--pred", pred_path, "predicted labels")->required();
  overlay->add_option("--slice", slice, "axial slice index (default: middle)");
  overlay->add_option("--out", overlay_out, "output PPM path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, ov, out_dir, fold, checkpoint);
    if (eval->parsed()) return cmd_eval(config_path, ov, out_dir, checkpoint, predictions_dir);
    if (predict->parsed()) return cmd_predict(config_path, ov, out_dir, checkpoint);
    if (gradcheck->parsed()) return cmd_gradcheck(seed, instances, tolerance);
    if (synth->parsed()) return cmd_synth(n_cases, seed, out_dir, dims, noise_std);
    if (overlay->parsed()) {
      return cmd_overlay(image_path, labels_path, pred_path, slice, overlay_out);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitCheckpoint;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return kExitNumerical;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitOk;
}
