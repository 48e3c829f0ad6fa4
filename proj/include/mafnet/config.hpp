#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <toml.hpp>

#include "training.hpp"

namespace mafnet {

struct DataConfig {
  int crop_size = 224;  // 0 keeps the native in-plane extent
  std::uint64_t split_seed = 0;
  int max_slices_per_case = 0;  // 0 keeps every tumor slice

  std::optional<int> crop() const { return crop_size > 0 ? std::optional<int>(crop_size) : std::nullopt; }
  void validate() const {
    require(crop_size >= 0 && max_slices_per_case >= 0, ErrorCode::BadConfig, "data sizes must be >= 0");
  }
};

inline void to_json(json& j, const DataConfig& c) {
  j = json{{"crop_size", c.crop_size},
           {"split_seed", c.split_seed},
           {"max_slices_per_case", c.max_slices_per_case}};
}
inline void from_json(const json& j, DataConfig& c) {
  j.at("crop_size").get_to(c.crop_size);
  j.at("split_seed").get_to(c.split_seed);
  j.at("max_slices_per_case").get_to(c.max_slices_per_case);
}

// Everything a training run needs besides the dataset. Serialized as TOML
// with one table per component; unknown tables or keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  static RunConfig defaults(bool desk_scale) {
    RunConfig r;
    if (desk_scale) {
      r.model = ModelConfig::desk_scale();
      r.train = TrainConfig::desk_scale();
      r.data.crop_size = 0;
    }
    return r;
  }

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
  }

  void apply(const toml::table& tbl);
  toml::table to_table() const;
  std::string to_toml() const {
    std::ostringstream os;
    os << to_table() << '\n';
    return os.str();
  }
};

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model}, {"train", c.train}, {"data", c.data}};
}
inline void from_json(const json& j, RunConfig& c) {
  j.at("model").get_to(c.model);
  j.at("train").get_to(c.train);
  j.at("data").get_to(c.data);
}

namespace config_detail {

using Setter = std::function<void(const toml::node&, const std::string&)>;

inline double as_double(const toml::node& n, const std::string& key) {
  if (auto v = n.value_exact<double>()) return *v;
  if (auto v = n.value_exact<std::int64_t>()) return static_cast<double>(*v);
  fail(ErrorCode::BadConfig, key + " must be a number");
}
inline std::int64_t as_int(const toml::node& n, const std::string& key) {
  if (auto v = n.value_exact<std::int64_t>()) return *v;
  fail(ErrorCode::BadConfig, key + " must be an integer");
}
inline bool as_bool(const toml::node& n, const std::string& key) {
  if (auto v = n.value_exact<bool>()) return *v;
  fail(ErrorCode::BadConfig, key + " must be a boolean");
}

inline Setter num(double& dst) {
  return [&dst](const toml::node& n, const std::string& k) { dst = as_double(n, k); };
}
inline Setter integer(int& dst) {
  return [&dst](const toml::node& n, const std::string& k) {
    const auto v = as_int(n, k);
    require(v >= INT32_MIN && v <= INT32_MAX, ErrorCode::BadConfig, k + " out of range");
    dst = static_cast<int>(v);
  };
}
inline Setter seed(std::uint64_t& dst) {
  return [&dst](const toml::node& n, const std::string& k) {
    const auto v = as_int(n, k);
    require(v >= 0, ErrorCode::BadConfig, k + " must be >= 0");
    dst = static_cast<std::uint64_t>(v);
  };
}
inline Setter flag(bool& dst) {
  return [&dst](const toml::node& n, const std::string& k) { dst = as_bool(n, k); };
}
inline Setter int_list(std::vector<int>& dst) {
  return [&dst](const toml::node& n, const std::string& k) {
    const auto* arr = n.as_array();
    require(arr != nullptr, ErrorCode::BadConfig, k + " must be an array of integers");
    dst.clear();
    for (const auto& e : *arr) dst.push_back(static_cast<int>(as_int(e, k)));
  };
}

}  // namespace config_detail

inline void RunConfig::apply(const toml::table& tbl) {
  using namespace config_detail;
  auto& g = model.generator;
  auto& w = train.weights;
  const std::map<std::string, std::map<std::string, Setter>> schema{
      {"generator",
       {{"base_width", integer(g.base_width)},
        {"n_blocks", integer(g.n_blocks)},
        {"nce_layers", int_list(g.nce_layers)},
        {"num_patches", integer(g.num_patches)},
        {"proj_dim", integer(g.proj_dim)}}},
      {"discriminator",
       {{"base_width", integer(model.discriminator.base_width)}, {"n_layers", integer(model.discriminator.n_layers)}}},
      {"unet", {{"base_width", integer(model.unet.base_width)}, {"depth", integer(model.unet.depth)}}},
      {"train",
       {{"lr_g", num(train.lr_g)},
        {"lr_h", num(train.lr_h)},
        {"lr_d", num(train.lr_d)},
        {"lr_seg", num(train.lr_seg)},
        {"beta1", num(train.beta1)},
        {"beta2", num(train.beta2)},
        {"adam_eps", num(train.adam_eps)},
        {"batch_size", integer(train.batch_size)},
        {"epochs_synthesis", integer(train.epochs_synthesis)},
        {"epochs_joint", integer(train.epochs_joint)},
        {"seed", seed(train.seed)},
        {"allow_weight_override", flag(train.allow_weight_override)},
        {"detach_synthesis_for_seg", flag(train.detach_synthesis_for_seg)}}},
      {"loss",
       {{"lambda_x", num(w.lambda_x)},
        {"lambda_y", num(w.lambda_y)},
        {"tau", num(w.tau)},
        {"lambda", num(w.lambda)},
        {"use_identity", flag(w.use_identity)}}},
      {"data",
       {{"crop_size", integer(data.crop_size)},
        {"split_seed", seed(data.split_seed)},
        {"max_slices_per_case", integer(data.max_slices_per_case)}}},
  };
  for (const auto& [section, node] : tbl) {
    const std::string name(section.str());
    auto it = schema.find(name);
    require(it != schema.end(), ErrorCode::BadConfig, "unknown config table [" + name + "]");
    const auto* sub = node.as_table();
    require(sub != nullptr, ErrorCode::BadConfig, "[" + name + "] must be a table");
    for (const auto& [key, value] : *sub) {
      const std::string k(key.str());
      auto jt = it->second.find(k);
      require(jt != it->second.end(), ErrorCode::BadConfig, "unknown config key " + name + "." + k);
      jt->second(value, name + "." + k);
    }
  }
  // The identity switch picks the standard weight pair unless weights were
  // overridden explicitly.
  const auto* loss = tbl["loss"].as_table();
  if (loss && loss->contains("use_identity") && !loss->contains("lambda_x") && !loss->contains("lambda_y")) {
    const auto std_w = LossWeights::with_identity(w.use_identity);
    w.lambda_x = std_w.lambda_x;
    w.lambda_y = std_w.lambda_y;
  }
  validate();
}

inline toml::table RunConfig::to_table() const {
  const auto& g = model.generator;
  toml::array layers;
  for (int l : g.nce_layers) layers.push_back(l);
  const auto& w = train.weights;
  return toml::table{
      {"generator", toml::table{{"base_width", g.base_width},
                                {"n_blocks", g.n_blocks},
                                {"nce_layers", layers},
                                {"num_patches", g.num_patches},
                                {"proj_dim", g.proj_dim}}},
      {"discriminator",
       toml::table{{"base_width", model.discriminator.base_width}, {"n_layers", model.discriminator.n_layers}}},
      {"unet", toml::table{{"base_width", model.unet.base_width}, {"depth", model.unet.depth}}},
      {"train", toml::table{{"lr_g", train.lr_g},
                            {"lr_h", train.lr_h},
                            {"lr_d", train.lr_d},
                            {"lr_seg", train.lr_seg},
                            {"beta1", train.beta1},
                            {"beta2", train.beta2},
                            {"adam_eps", train.adam_eps},
                            {"batch_size", train.batch_size},
                            {"epochs_synthesis", train.epochs_synthesis},
                            {"epochs_joint", train.epochs_joint},
                            {"seed", static_cast<std::int64_t>(train.seed)},
                            {"allow_weight_override", train.allow_weight_override},
                            {"detach_synthesis_for_seg", train.detach_synthesis_for_seg}}},
      {"loss", toml::table{{"lambda_x", w.lambda_x},
                           {"lambda_y", w.lambda_y},
                           {"tau", w.tau},
                           {"lambda", w.lambda},
                           {"use_identity", w.use_identity}}},
      {"data", toml::table{{"crop_size", data.crop_size},
                           {"split_seed", static_cast<std::int64_t>(data.split_seed)},
                           {"max_slices_per_case", data.max_slices_per_case}}},
  };
}

inline RunConfig parse_run_config(std::string_view text, bool desk_scale) {
  RunConfig r = RunConfig::defaults(desk_scale);
  try {
    r.apply(toml::parse(text));
  } catch (const toml::parse_error& e) {
    fail(ErrorCode::BadConfig, std::string("config parse error: ") + std::string(e.description()));
  }
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path, bool desk_scale) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorCode::Usage, "cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), desk_scale);
}

}  // namespace mafnet
