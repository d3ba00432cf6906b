#include "voxseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "voxseg/errors.hpp"

namespace voxseg {

namespace {

using nlohmann::json;

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
}

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) {
      throw ConfigError("config: unknown key '" + where + key + "'");
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + where + key + "' has the wrong type");
  }
}

void read_triple(const json& j, const char* key, Shape& out, const std::string& where) {
  if (!j.contains(key)) return;
  Shape v;
  try {
    v = j.at(key).get<Shape>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + where + key + "' must be an array of 3 integers");
  }
  if (v.size() != 3) {
    throw ConfigError("config: '" + where + key + "' must have exactly 3 entries");
  }
  out = v;
}

void parse_model(const json& j, ModelConfig& m) {
  expect_object(j, "model");
  reject_unknown(j,
                 {"variant", "base_channels", "in_channels", "num_classes", "dilation_rates",
                  "leaky_slope"},
                 "model.");
  read_field(j, "variant", m.variant, "model.");
  read_field(j, "base_channels", m.base_channels, "model.");
  read_field(j, "in_channels", m.in_channels, "model.");
  read_field(j, "num_classes", m.num_classes, "model.");
  read_field(j, "leaky_slope", m.leaky_slope, "model.");
  if (j.contains("dilation_rates")) {
    std::vector<std::int64_t> rates;
    try {
      rates = j.at("dilation_rates").get<std::vector<std::int64_t>>();
    } catch (const json::exception&) {
      throw ConfigError("config: 'model.dilation_rates' must be an array of integers");
    }
    if (rates.size() != 4) {
      throw ConfigError("config: 'model.dilation_rates' must have exactly 4 entries");
    }
    std::copy(rates.begin(), rates.end(), m.dilation_rates.begin());
  }
  validate_config(m);
}

void parse_train(const json& j, TrainConfig& t) {
  expect_object(j, "train");
  reject_unknown(j,
                 {"lr", "epochs", "plateau_patience", "plateau_factor", "min_lr",
                  "improvement_eps", "batch_size", "seed", "loss", "patch_dims",
                  "max_rotation_deg", "flip_prob", "augment"},
                 "train.");
  read_field(j, "lr", t.lr, "train.");
  read_field(j, "epochs", t.epochs, "train.");
  read_field(j, "plateau_patience", t.plateau_patience, "train.");
  read_field(j, "plateau_factor", t.plateau_factor, "train.");
  read_field(j, "min_lr", t.min_lr, "train.");
  read_field(j, "improvement_eps", t.improvement_eps, "train.");
  read_field(j, "batch_size", t.batch_size, "train.");
  read_field(j, "seed", t.seed, "train.");
  read_field(j, "loss", t.loss, "train.");
  read_triple(j, "patch_dims", t.patch_dims, "train.");
  read_field(j, "max_rotation_deg", t.max_rotation_deg, "train.");
  read_field(j, "flip_prob", t.flip_prob, "train.");
  read_field(j, "augment", t.augment, "train.");
}

void parse_data(const json& j, DataConfig& d) {
  expect_object(j, "data");
  reject_unknown(j, {"type", "num_cases", "dims", "spacing", "noise_std", "seed", "manifest"},
                 "data.");
  if (!j.contains("type")) {
    throw ConfigError("config: missing required field 'data.type'");
  }
  read_field(j, "type", d.type, "data.");
  if (d.type != "synthetic" && d.type != "manifest") {
    throw ConfigError("config: 'data.type' must be 'synthetic' or 'manifest', got '" + d.type +
                      "'");
  }
  read_field(j, "num_cases", d.num_cases, "data.");
  read_triple(j, "dims", d.dims, "data.");
  if (j.contains("spacing")) {
    std::vector<double> sp;
    try {
      sp = j.at("spacing").get<std::vector<double>>();
    } catch (const json::exception&) {
      throw ConfigError("config: 'data.spacing' must be an array of 3 numbers");
    }
    if (sp.size() != 3) throw ConfigError("config: 'data.spacing' must have exactly 3 entries");
    std::copy(sp.begin(), sp.end(), d.spacing.begin());
  }
  read_field(j, "noise_std", d.noise_std, "data.");
  read_field(j, "seed", d.seed, "data.");
  read_field(j, "manifest", d.manifest, "data.");

  if (d.type == "synthetic") {
    if (d.num_cases < 1) throw ConfigError("config: 'data.num_cases' must be at least 1");
    for (std::int64_t dim : d.dims) {
      if (dim < 16) throw ConfigError("config: 'data.dims' entries must be at least 16");
    }
    for (double s : d.spacing) {
      if (!(s > 0.0)) throw ConfigError("config: 'data.spacing' entries must be positive");
    }
    if (d.noise_std < 0.0) throw ConfigError("config: 'data.noise_std' must be non-negative");
  } else if (d.manifest.empty()) {
    throw ConfigError("config: missing required field 'data.manifest'");
  }
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  expect_object(j, "<root>");
  reject_unknown(j, {"model", "train", "data"}, "");

  RunConfig c;
  if (j.contains("model")) parse_model(j.at("model"), c.train.model);
  if (j.contains("train")) parse_train(j.at("train"), c.train);
  if (j.contains("data")) parse_data(j.at("data"), c.data);
  validate_train_config(c.train);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& config) {
  const TrainConfig& t = config.train;
  const ModelConfig& m = t.model;
  json j;
  j["model"] = {{"variant", m.variant},
                {"base_channels", m.base_channels},
                {"in_channels", m.in_channels},
                {"num_classes", m.num_classes},
                {"dilation_rates", m.dilation_rates},
                {"leaky_slope", m.leaky_slope}};
  j["train"] = {{"lr", t.lr},
                {"epochs", t.epochs},
                {"plateau_patience", t.plateau_patience},
                {"plateau_factor", t.plateau_factor},
                {"min_lr", t.min_lr},
                {"improvement_eps", t.improvement_eps},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"loss", t.loss},
                {"patch_dims", t.patch_dims},
                {"max_rotation_deg", t.max_rotation_deg},
                {"flip_prob", t.flip_prob},
                {"augment", t.augment}};
  if (!config.data.type.empty()) {
    const DataConfig& d = config.data;
    if (d.type == "synthetic") {
      j["data"] = {{"type", d.type},           {"num_cases", d.num_cases},
                   {"dims", d.dims},           {"spacing", d.spacing},
                   {"noise_std", d.noise_std}, {"seed", d.seed}};
    } else {
      j["data"] = {{"type", d.type}, {"manifest", d.manifest}};
    }
  }
  return j.dump(2) + "\n";
}

}  // namespace voxseg
