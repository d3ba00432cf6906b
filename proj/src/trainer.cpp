#include "voxseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/ops.hpp"

namespace voxseg {

namespace {

using nlohmann::json;

constexpr char kCkptMagic[8] = {'V', 'X', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kCkptVersion = 1;

Tensor loss_value(const std::string& kind, const Tensor& probs, const Tensor& target,
                  Tape* tape) {
  if (kind == "dice") return soft_dice_loss(probs, target, tape);
  if (kind == "bce") return bce_loss(probs, target, tape);
  return combined_loss(probs, target, tape).total;
}

/// Deep copy: same architecture, independent storage for every parameter
/// and buffer.
Model clone_model(const Model& src) {
  Model dst = build_model(src.config, 0);
  const auto sp = named_parameters(src);
  auto dp = named_parameters(dst);
  for (std::size_t i = 0; i < sp.size(); ++i) {
    Tensor d = dp[i].tensor;  // handle copy; writes reach dst's storage
    std::copy(sp[i].tensor.data().begin(), sp[i].tensor.data().end(), d.data().begin());
  }
  const auto sb = named_buffers(src);
  auto db = named_buffers(dst);
  for (std::size_t i = 0; i < sb.size(); ++i) {
    Tensor d = db[i].tensor;
    std::copy(sb[i].tensor.data().begin(), sb[i].tensor.data().end(), d.data().begin());
  }
  return dst;
}

json model_config_json(const ModelConfig& c) {
  return json{{"variant", c.variant},
              {"base_channels", c.base_channels},
              {"in_channels", c.in_channels},
              {"num_classes", c.num_classes},
              {"dilation_rates", c.dilation_rates},
              {"leaky_slope", c.leaky_slope}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.variant = j.at("variant").get<std::string>();
    c.base_channels = j.at("base_channels").get<std::int64_t>();
    c.in_channels = j.at("in_channels").get<std::int64_t>();
    c.num_classes = j.at("num_classes").get<std::int64_t>();
    const auto rates = j.at("dilation_rates").get<std::vector<std::int64_t>>();
    if (rates.size() != 4) throw CheckpointError("checkpoint: dilation_rates must have 4 entries");
    std::copy(rates.begin(), rates.end(), c.dilation_rates.begin());
    c.leaky_slope = j.at("leaky_slope").get<float>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed model config: ") + e.what());
  }
  return c;
}

// Fixed spatial dims across a set of rank-3 tensors -> [B, C, D, H, W].
Tensor stack_batch(const std::vector<Tensor>& vols) {
  const Shape& s = vols.front().shape();
  const std::int64_t B = static_cast<std::int64_t>(vols.size());
  Tensor out(Shape{B, 1, s[0], s[1], s[2]});
  float* dst = out.data().data();
  const std::int64_t n = shape_numel(s);
  for (std::int64_t b = 0; b < B; ++b) {
    std::memcpy(dst + b * n, vols[static_cast<std::size_t>(b)].data().data(),
                static_cast<std::size_t>(n) * sizeof(float));
  }
  return out;
}

// Each entry [1, C, D, H, W] -> [B, C, D, H, W].
Tensor stack_onehots(const std::vector<Tensor>& ohs) {
  const Shape& s = ohs.front().shape();
  const std::int64_t B = static_cast<std::int64_t>(ohs.size());
  Tensor out(Shape{B, s[1], s[2], s[3], s[4]});
  float* dst = out.data().data();
  const std::int64_t n = s[1] * s[2] * s[3] * s[4];
  for (std::int64_t b = 0; b < B; ++b) {
    std::memcpy(dst + b * n, ohs[static_cast<std::size_t>(b)].data().data(),
                static_cast<std::size_t>(n) * sizeof(float));
  }
  return out;
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
  validate_config(cfg.model);
  if (!(cfg.lr > 0.0)) throw ConfigError("lr must be positive");
  if (cfg.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(cfg.plateau_factor > 0.0) || !(cfg.plateau_factor < 1.0)) {
    throw ConfigError("plateau_factor must lie in (0, 1)");
  }
  if (cfg.plateau_patience < 1) throw ConfigError("plateau_patience must be at least 1");
  if (!(cfg.min_lr > 0.0)) throw ConfigError("min_lr must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (cfg.loss != "combined" && cfg.loss != "dice" && cfg.loss != "bce") {
    throw ConfigError("loss must be combined, dice or bce, got '" + cfg.loss + "'");
  }
  if (cfg.patch_dims.size() != 3) throw ConfigError("patch_dims must have 3 entries");
  for (std::int64_t d : cfg.patch_dims) {
    if (d < 16 || d % 16 != 0) {
      throw ConfigError("patch_dims must be multiples of 16, got " + shape_str(cfg.patch_dims));
    }
  }
  if (cfg.max_rotation_deg < 0.0 || cfg.flip_prob < 0.0 || cfg.flip_prob > 1.0) {
    throw ConfigError("augmentation parameters out of range");
  }
}

void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr) {
  for (const NamedTensor& p : params) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) {
      throw StateError("adam_step: parameter '" + p.name + "' has no gradient");
    }
  }
  state.t += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));

  for (const NamedTensor& p : params) {
    auto [mit, fresh_m] = state.m.try_emplace(p.name, Tensor::zeros(p.tensor.shape()));
    auto [vit, fresh_v] = state.v.try_emplace(p.name, Tensor::zeros(p.tensor.shape()));
    if (mit->second.shape() != p.tensor.shape() || vit->second.shape() != p.tensor.shape()) {
      throw StateError("adam_step: moment shape mismatch for '" + p.name + "'");
    }
    Tensor param = p.tensor;  // handle copy for mutable access
    auto theta = param.data();
    auto grad = param.grad();
    auto m = mit->second.data();
    auto v = vit->second.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      theta[i] = static_cast<float>(theta[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

double plateau_update(PlateauTracker& tracker, double val_loss) {
  if (!std::isfinite(val_loss)) {
    throw NumericalError("plateau_update: non-finite validation loss");
  }
  const bool improved = tracker.best_val_loss < 0.0 ||
                        val_loss < tracker.best_val_loss - tracker.improvement_eps;
  if (improved) {
    tracker.best_val_loss = val_loss;
    tracker.epochs_since_improvement = 0;
  } else {
    tracker.epochs_since_improvement += 1;
    if (tracker.epochs_since_improvement >= tracker.patience) {
      tracker.current_lr = std::max(tracker.current_lr * tracker.factor, tracker.min_lr);
      tracker.epochs_since_improvement = 0;
    }
  }
  return tracker.current_lr;
}

TrainerState init_state(const TrainConfig& cfg) {
  validate_train_config(cfg);
  TrainerState st;
  st.model = build_model(cfg.model, cfg.seed);
  st.plateau.current_lr = cfg.lr;
  st.plateau.factor = cfg.plateau_factor;
  st.plateau.min_lr = cfg.min_lr;
  st.plateau.patience = cfg.plateau_patience;
  st.plateau.improvement_eps = cfg.improvement_eps;
  return st;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const TrainerState& state) {
  json manifest;
  manifest["format_version"] = kCkptVersion;
  manifest["model"] = model_config_json(state.model.config);
  manifest["step"] = state.step;
  manifest["epoch"] = state.epoch;
  manifest["plateau"] = {{"best_val_loss", state.plateau.best_val_loss},
                         {"epochs_since_improvement", state.plateau.epochs_since_improvement},
                         {"current_lr", state.plateau.current_lr},
                         {"factor", state.plateau.factor},
                         {"min_lr", state.plateau.min_lr},
                         {"patience", state.plateau.patience},
                         {"improvement_eps", state.plateau.improvement_eps}};
  manifest["adam"] = {{"t", state.adam.t},
                      {"beta1", state.adam.beta1},
                      {"beta2", state.adam.beta2},
                      {"eps", state.adam.eps}};

  std::vector<float> payload;
  json dir = json::array();
  const auto append = [&](const std::string& name, const char* kind, const Tensor& t) {
    dir.push_back({{"name", name},
                   {"kind", kind},
                   {"shape", t.shape()},
                   {"offset", payload.size() * sizeof(float)}});
    payload.insert(payload.end(), t.data().begin(), t.data().end());
  };
  for (const NamedTensor& p : named_parameters(state.model)) append(p.name, "param", p.tensor);
  for (const NamedTensor& b : named_buffers(state.model)) append(b.name, "buffer", b.tensor);
  for (const NamedTensor& p : named_parameters(state.model)) {
    const auto mit = state.adam.m.find(p.name);
    if (mit != state.adam.m.end()) append(p.name, "adam_m", mit->second);
    const auto vit = state.adam.v.find(p.name);
    if (vit != state.adam.v.end()) append(p.name, "adam_v", vit->second);
  }
  manifest["tensors"] = std::move(dir);
  const std::string meta = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write(kCkptMagic, sizeof(kCkptMagic));
  const std::uint32_t len = static_cast<std::uint32_t>(meta.size());
  const unsigned char len_le[4] = {static_cast<unsigned char>(len & 0xff),
                                   static_cast<unsigned char>((len >> 8) & 0xff),
                                   static_cast<unsigned char>((len >> 16) & 0xff),
                                   static_cast<unsigned char>((len >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(len_le), 4);
  f.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw DataError("short write to " + path);
}

TrainerState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw CheckpointError(path + ": not a VXCKPT01 checkpoint");
  }
  unsigned char len_le[4];
  if (!f.read(reinterpret_cast<char*>(len_le), 4)) {
    throw CheckpointError(path + ": truncated manifest length");
  }
  const std::uint32_t len = static_cast<std::uint32_t>(len_le[0]) |
                            (static_cast<std::uint32_t>(len_le[1]) << 8) |
                            (static_cast<std::uint32_t>(len_le[2]) << 16) |
                            (static_cast<std::uint32_t>(len_le[3]) << 24);
  std::string meta(len, '\0');
  if (!f.read(meta.data(), len)) throw CheckpointError(path + ": truncated manifest");
  json manifest;
  try {
    manifest = json::parse(meta);
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format_version", -1) != kCkptVersion) {
    throw CheckpointError(path + ": unsupported checkpoint format version");
  }
  std::vector<float> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(float) != 0) {
      throw CheckpointError(path + ": payload size is not a multiple of 4");
    }
    payload.resize(rest.size() / sizeof(float));
    std::memcpy(payload.data(), rest.data(), rest.size());
  }

  TrainerState st;
  const ModelConfig config = model_config_from_json(manifest.at("model"));
  st.model = build_model(config, 0);
  try {
    st.step = manifest.at("step").get<std::int64_t>();
    st.epoch = manifest.at("epoch").get<int>();
    const json& pl = manifest.at("plateau");
    st.plateau.best_val_loss = pl.at("best_val_loss").get<double>();
    st.plateau.epochs_since_improvement = pl.at("epochs_since_improvement").get<int>();
    st.plateau.current_lr = pl.at("current_lr").get<double>();
    st.plateau.factor = pl.at("factor").get<double>();
    st.plateau.min_lr = pl.at("min_lr").get<double>();
    st.plateau.patience = pl.at("patience").get<int>();
    st.plateau.improvement_eps = pl.at("improvement_eps").get<double>();
    const json& ad = manifest.at("adam");
    st.adam.t = ad.at("t").get<std::int64_t>();
    st.adam.beta1 = ad.at("beta1").get<float>();
    st.adam.beta2 = ad.at("beta2").get<float>();
    st.adam.eps = ad.at("eps").get<float>();
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": malformed manifest: " + std::string(e.what()));
  }

  std::map<std::string, Tensor> params, buffers;
  for (const NamedTensor& p : named_parameters(st.model)) params.emplace(p.name, p.tensor);
  for (const NamedTensor& b : named_buffers(st.model)) buffers.emplace(b.name, b.tensor);
  std::set<std::string> filled_params, filled_buffers;

  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw CheckpointError(path + ": manifest lacks a tensor directory");
  }
  for (const json& entry : manifest["tensors"]) {
    std::string name, kind;
    Shape shape;
    std::size_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      kind = entry.at("kind").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const json::exception& e) {
      throw CheckpointError(path + ": malformed tensor entry: " + std::string(e.what()));
    }
    const std::size_t count = static_cast<std::size_t>(shape_numel(shape));
    if (offset % sizeof(float) != 0 || offset / sizeof(float) + count > payload.size()) {
      throw CheckpointError(path + ": tensor '" + name + "' extends past the payload");
    }
    const float* src = payload.data() + offset / sizeof(float);

    const auto fill = [&](Tensor& dst) {
      if (dst.shape() != shape) {
        throw CheckpointError(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                              ", model expects " + shape_str(dst.shape()));
      }
      std::copy(src, src + count, dst.data().begin());
    };
    if (kind == "param") {
      const auto it = params.find(name);
      if (it == params.end()) throw CheckpointError(path + ": unknown parameter '" + name + "'");
      fill(it->second);
      filled_params.insert(name);
    } else if (kind == "buffer") {
      const auto it = buffers.find(name);
      if (it == buffers.end()) throw CheckpointError(path + ": unknown buffer '" + name + "'");
      fill(it->second);
      filled_buffers.insert(name);
    } else if (kind == "adam_m" || kind == "adam_v") {
      const auto it = params.find(name);
      if (it == params.end()) {
        throw CheckpointError(path + ": moment for unknown parameter '" + name + "'");
      }
      if (it->second.shape() != shape) {
        throw CheckpointError(path + ": moment shape mismatch for '" + name + "'");
      }
      Tensor t(shape);
      std::copy(src, src + count, t.data().begin());
      (kind == "adam_m" ? st.adam.m : st.adam.v).emplace(name, t);
    } else {
      throw CheckpointError(path + ": unknown tensor kind '" + kind + "'");
    }
  }
  if (filled_params.size() != params.size()) {
    throw CheckpointError(path + ": checkpoint is missing model parameters");
  }
  if (filled_buffers.size() != buffers.size()) {
    throw CheckpointError(path + ": checkpoint is missing model buffers");
  }
  return st;
}

TrainerState load_checkpoint(const std::string& path, const ModelConfig& expect) {
  TrainerState st = load_checkpoint(path);
  const ModelConfig& got = st.model.config;
  if (got.variant != expect.variant || got.base_channels != expect.base_channels ||
      got.in_channels != expect.in_channels || got.num_classes != expect.num_classes ||
      got.dilation_rates != expect.dilation_rates || got.leaky_slope != expect.leaky_slope) {
    throw CheckpointError(path + ": checkpoint architecture (" + got.variant + ", base " +
                          std::to_string(got.base_channels) + ") does not match the requested (" +
                          expect.variant + ", base " + std::to_string(expect.base_channels) + ")");
  }
  return st;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

FoldResult train_fold(const TrainConfig& cfg, const std::vector<Case>& dataset,
                      const SplitPlan& split, int fold_index, TrainerState& state,
                      const std::string& out_dir) {
  validate_train_config(cfg);
  if (fold_index < 0 || fold_index >= static_cast<int>(split.folds.size())) {
    throw ConfigError("fold_index must lie in [0, 9), got " + std::to_string(fold_index));
  }

  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Case& c = dataset[i];
    if (c.image.data.shape() != c.labels.labels.shape()) {
      throw DataError("case '" + c.image.id + "': image and labels shapes differ");
    }
    by_id[c.image.id] = i;
  }
  const auto resolve = [&](const std::string& id) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("split references unknown case '" + id + "'");
    return it->second;
  };

  std::vector<std::size_t> val_idx, train_idx;
  for (const std::string& id : split.folds[static_cast<std::size_t>(fold_index)]) {
    val_idx.push_back(resolve(id));
  }
  for (std::size_t f = 0; f < split.folds.size(); ++f) {
    if (static_cast<int>(f) == fold_index) continue;
    for (const std::string& id : split.folds[f]) train_idx.push_back(resolve(id));
  }
  if (train_idx.empty() || val_idx.empty()) {
    throw ConfigError("fold " + std::to_string(fold_index) + " has an empty train or val set");
  }

  // Normalize once; cache padded validation tensors (validation never
  // augments, so these are fixed for the whole fold).
  std::map<std::size_t, Volume> normalized;
  for (std::size_t i : train_idx) normalized.emplace(i, zscore_normalize(dataset[i].image));
  std::vector<std::pair<Tensor, Tensor>> val_cached;  // (padded image, padded onehot)
  for (std::size_t i : val_idx) {
    const Volume norm = zscore_normalize(dataset[i].image);
    auto [img, place] = pad_or_crop(norm.data, cfg.patch_dims);
    auto [lab, lplace] = pad_or_crop(dataset[i].labels.labels, cfg.patch_dims);
    val_cached.emplace_back(img, onehot(LabelMap{lab, dataset[i].labels.spacing, ""},
                                        cfg.model.num_classes));
  }

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  std::vector<NamedTensor> params = named_parameters(state.model);
  set_parameter_grads(state.model, true);

  FoldResult result;
  result.best_model = clone_model(state.model);

  for (int epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = state.plateau.current_lr;

    // deterministic per-(seed, fold, epoch) shuffle stream
    std::vector<std::size_t> order = train_idx;
    Rng shuffle_rng(derive_stream(
        cfg.seed, {hash_string("shuffle"), static_cast<std::uint64_t>(fold_index),
                   static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    set_training(state.model, true);
    double train_loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Tensor> images, targets;
      std::string batch_ids;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order[k];
        const Case& c = dataset[i];
        batch_ids += (batch_ids.empty() ? "" : ", ") + c.image.id;

        Volume img = normalized.at(i);
        LabelMap lab = c.labels;
        if (cfg.augment) {
          // per-(seed, fold, epoch, case) stream: independent of batch order
          Rng aug_rng(derive_stream(
              cfg.seed, {hash_string("augment"), static_cast<std::uint64_t>(fold_index),
                         static_cast<std::uint64_t>(epoch), hash_string(c.image.id)}));
          auto [av, al] = augment(img, lab, aug_rng, cfg.max_rotation_deg, cfg.flip_prob);
          img = std::move(av);
          lab = std::move(al);
        }
        auto [pimg, place] = pad_or_crop(img.data, cfg.patch_dims);
        auto [plab, lplace] = pad_or_crop(lab.labels, cfg.patch_dims);
        images.push_back(pimg);
        targets.push_back(onehot(LabelMap{plab, lab.spacing, ""}, cfg.model.num_classes));
      }

      const Tensor batch = stack_batch(images);
      const Tensor target = stack_onehots(targets);

      for (NamedTensor& p : params) p.tensor.zero_grad();
      Tape tape;
      const Tensor logits = forward(state.model, batch, &tape);
      const Tensor probs = softmax_channels(logits, &tape);
      const Tensor loss = loss_value(cfg.loss, probs, target, &tape);
      const double lval = loss.scalar();
      if (!std::isfinite(lval)) {
        throw NumericalError("training aborted: non-finite loss at epoch " +
                             std::to_string(epoch) + ", lr " + std::to_string(lr) +
                             ", cases [" + batch_ids + "]");
      }
      tape.backward(loss);
      adam_step(params, state.adam, lr);
      state.step += 1;
      train_loss_sum += lval;
      batches += 1;
    }

    // validation (eval mode, no augmentation)
    set_training(state.model, false);
    double val_sum = 0.0;
    for (const auto& [img, target] : val_cached) {
      const Tensor batch = stack_batch({img});
      const Tensor logits = forward(state.model, batch, nullptr);
      const Tensor probs = softmax_channels(logits, nullptr);
      const double v = loss_value(cfg.loss, probs, target, nullptr).scalar();
      if (!std::isfinite(v)) {
        throw NumericalError("validation loss non-finite at epoch " + std::to_string(epoch));
      }
      val_sum += v;
    }
    const double val_loss = val_sum / static_cast<double>(val_cached.size());

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss_sum / static_cast<double>(std::max<std::int64_t>(batches, 1));
    rec.val_loss = val_loss;
    rec.lr = lr;
    result.history.push_back(rec);
    if (!out_dir.empty()) append_history(out_dir + "/history.jsonl", rec);

    const double prev_best = state.plateau.best_val_loss;
    const bool improved =
        prev_best < 0.0 || val_loss < prev_best - state.plateau.improvement_eps;
    plateau_update(state.plateau, val_loss);
    state.epoch = epoch;

    if (improved) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.best_model = clone_model(state.model);
      if (!out_dir.empty()) save_checkpoint(out_dir + "/best.ckpt", state);
    }
    if (!out_dir.empty()) save_checkpoint(out_dir + "/last.ckpt", state);
  }
  return result;
}

CvReport cross_validate(const TrainConfig& cfg, const std::vector<Case>& dataset,
                        const SplitPlan& split, const std::string& out_dir) {
  CvReport report;
  for (int fold = 0; fold < 9; ++fold) {
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = derive_stream(cfg.seed, {hash_string("fold"), static_cast<std::uint64_t>(fold)});
    TrainerState st = init_state(fold_cfg);
    const std::string fold_dir =
        out_dir.empty() ? "" : out_dir + "/fold" + std::to_string(fold);
    FoldResult res = train_fold(fold_cfg, dataset, split, fold, st, fold_dir);

    std::vector<Case> val_cases;
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < dataset.size(); ++i) by_id[dataset[i].image.id] = i;
    for (const std::string& id : split.folds[static_cast<std::size_t>(fold)]) {
      val_cases.push_back(dataset[by_id.at(id)]);
    }
    const std::vector<MetricsReport> reports =
        evaluate(res.best_model, val_cases, cfg.patch_dims);

    FoldReport fr;
    fr.fold = fold;
    fr.best_val_loss = res.best_val_loss;
    fr.best_epoch = res.best_epoch;
    fr.history = std::move(res.history);
    for (const MetricsReport& r : reports) {
      fr.mean_dsc += r.mean_foreground.dsc;
      fr.mean_ji += r.mean_foreground.ji;
      fr.mean_nsd += r.mean_foreground.nsd;
    }
    const double n = static_cast<double>(reports.size());
    fr.mean_dsc /= n;
    fr.mean_ji /= n;
    fr.mean_nsd /= n;
    report.folds.push_back(std::move(fr));
  }
  for (const FoldReport& fr : report.folds) {
    report.mean_dsc += fr.mean_dsc;
    report.mean_ji += fr.mean_ji;
    report.mean_nsd += fr.mean_nsd;
  }
  report.mean_dsc /= 9.0;
  report.mean_ji /= 9.0;
  report.mean_nsd /= 9.0;
  return report;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

Tensor predict_labels(Model& model, const Volume& image, const Shape& patch_dims) {
  const Volume norm = zscore_normalize(image);
  auto [padded, place] = pad_or_crop(norm.data, patch_dims);
  set_training(model, false);
  const Tensor logits = forward(model, stack_batch({padded}), nullptr);

  const std::int64_t C = logits.dim(1);
  const std::int64_t spatial = logits.dim(2) * logits.dim(3) * logits.dim(4);
  Tensor pred(Shape{logits.dim(2), logits.dim(3), logits.dim(4)});
  const float* lp = logits.data().data();
  float* pp = pred.data().data();
  for (std::int64_t i = 0; i < spatial; ++i) {
    std::int64_t arg = 0;
    float best = lp[i];
    for (std::int64_t c = 1; c < C; ++c) {
      const float v = lp[c * spatial + i];
      if (v > best) {  // ties keep the lowest class index
        best = v;
        arg = c;
      }
    }
    pp[i] = static_cast<float>(arg);
  }
  return invert_pad_or_crop(pred, place, 0.0f);
}

std::vector<MetricsReport> evaluate(Model& model, const std::vector<Case>& cases,
                                    const Shape& patch_dims) {
  std::vector<MetricsReport> reports;
  reports.reserve(cases.size());
  for (const Case& c : cases) {
    const Tensor pred = predict_labels(model, c.image, patch_dims);
    reports.push_back(evaluate_case(pred, c.labels.labels, c.image.spacing, c.image.id));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// History files
// ---------------------------------------------------------------------------

void append_history(const std::string& path, const EpochRecord& rec) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw DataError("cannot open " + path + " for appending");
  const json line = {{"epoch", rec.epoch},
                     {"train_loss", rec.train_loss},
                     {"val_loss", rec.val_loss},
                     {"lr", rec.lr}};
  f << line.dump() << "\n";
}

std::vector<EpochRecord> read_history(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open history " + path);
  std::vector<EpochRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      EpochRecord r;
      r.epoch = j.at("epoch").get<int>();
      r.train_loss = j.at("train_loss").get<double>();
      r.val_loss = j.at("val_loss").get<double>();
      r.lr = j.at("lr").get<double>();
      out.push_back(r);
    } catch (const json::exception& e) {
      throw ParseError(path + ": malformed history line: " + std::string(e.what()));
    }
  }
  return out;
}

}  // namespace voxseg
