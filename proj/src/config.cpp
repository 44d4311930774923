// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/config.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace tokensieve {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); }

void read(const json& v, const std::string& path, int& out) {
  if (!v.is_number_integer()) bad(path, "expected an integer");
  const auto x = v.get<std::int64_t>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) bad(path, "integer out of range");
  out = static_cast<int>(x);
}

void read(const json& v, const std::string& path, std::uint64_t& out) {
  if (v.is_number_unsigned()) {
    out = v.get<std::uint64_t>();
  } else if (v.is_number_integer() && v.get<std::int64_t>() >= 0) {
    out = static_cast<std::uint64_t>(v.get<std::int64_t>());
  } else {
    bad(path, "expected a non-negative integer");
  }
}

void read(const json& v, const std::string& path, double& out) {
  if (!v.is_number()) bad(path, "expected a number");
  out = v.get<double>();
}

void read(const json& v, const std::string& path, bool& out) {
  if (!v.is_boolean()) bad(path, "expected true or false");
  out = v.get<bool>();
}

void read(const json& v, const std::string& path, std::string& out) {
  if (!v.is_string()) bad(path, "expected a string");
  out = v.get<std::string>();
}

template <class T>
void read(const json& v, const std::string& path, std::vector<T>& out) {
  if (!v.is_array()) bad(path, "expected an array");
  out.clear();
  for (std::size_t i = 0; i < v.size(); ++i) {
    T x{};
    read(v[i], path + "[" + std::to_string(i) + "]", x);
    out.push_back(x);
  }
}

// Tracks which keys of an object were consumed so leftovers can be rejected.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_.empty() ? "config" : path_, "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  bool get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    seen_.insert(key);
    read(*it, name(key), out);
    return true;
  }

  Obj sub(const char* key) {
    seen_.insert(key);
    return Obj(j_.at(key), name(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) bad(name(it.key().c_str()), "unknown key");
    }
  }

  std::string name(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_model(Obj o, ModelDims& m) {
  o.get("layers", m.layers);
  o.get("heads", m.heads);
  o.get("width", m.width);
  o.get("patch", m.patch);
  o.get("image_size", m.image_size);
  o.get("channels", m.channels);
  o.get("classes", m.classes);
  o.finish();
}

void parse_prune(Obj o, PruneConfig& p) {
  std::string s;
  if (o.get("selector", s)) {
    try {
      p.selector = parse_selector(s);
    } catch (const std::invalid_argument&) {
      bad(o.name("selector"), "expected gate_mlp, gate_pooled or attention_score");
    }
  }
  if (o.get("rate_mode", s)) {
    if (s != "dynamic" && s != "fixed") bad(o.name("rate_mode"), "expected dynamic or fixed");
    p.rate_mode = parse_rate_mode(s);
  }
  o.get("preserve", p.preserve);
  o.get("reactivate", p.reactivate);
  o.get("gated_layers", p.gated_layers);
  o.get("keep_ratios", p.keep_ratios);
  o.get("lambda", p.lambda);
  o.get("tau", p.tau);
  o.get("gate_init_keep_bias", p.gate_keep_bias);
  o.finish();
}

void parse_optim(Obj o, OptimConfig& p) {
  o.get("dense_epochs", p.dense_epochs);
  o.get("sparse_epochs", p.sparse_epochs);
  o.get("batch_size", p.batch_size);
  o.get("lr_dense", p.lr_dense);
  o.get("lr_sparse", p.lr_sparse);
  o.get("beta1", p.beta1);
  o.get("beta2", p.beta2);
  o.get("eps", p.eps);
  o.finish();
}

void parse_bench(Obj o, BenchConfig& b) {
  o.get("image_size", b.image_size);
  o.get("patch", b.patch);
  o.get("images", b.images);
  o.get("repeats", b.repeats);
  o.get("warmup", b.warmup);
  o.finish();
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Obj root(j, "");
  if (!root.get("seed", c.seed)) bad("seed", "required field is missing");
  if (root.has("model")) parse_model(root.sub("model"), c.model);
  // Scene geometry follows the model unless given explicitly.
  c.data.image_size = c.model.image_size;
  c.data.patch = c.model.patch;
  c.data.classes = c.model.classes;
  c.data.seed = c.seed;
  if (root.has("prune")) parse_prune(root.sub("prune"), c.prune);
  if (root.has("optim")) parse_optim(root.sub("optim"), c.optim);
  if (root.has("data")) {
    Obj o = root.sub("data");
    o.get("image_size", c.data.image_size);
    o.get("patch", c.data.patch);
    o.get("shapes", c.data.shapes);
    o.get("classes", c.data.classes);
    o.get("min_shape", c.data.min_shape);
    o.get("max_shape", c.data.max_shape);
    o.get("noise", c.data.noise);
    o.get("seed", c.data.seed);
    o.finish();
  }
  if (root.has("bench")) parse_bench(root.sub("bench"), c.bench);
  root.get("train_images", c.train_images);
  root.get("eval_images", c.eval_images);
  root.get("out_dir", c.out_dir);
  root.get("threads", c.threads);
  root.get("sweep_ratios", c.sweep_ratios);
  root.get("compare_seeds", c.compare_seeds);
  root.finish();
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

ordered_json config_to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["model"] = {{"layers", c.model.layers},         {"heads", c.model.heads},
                {"width", c.model.width},           {"patch", c.model.patch},
                {"image_size", c.model.image_size}, {"channels", c.model.channels},
                {"classes", c.model.classes}};
  ordered_json p;
  p["selector"] = to_string(c.prune.selector);
  p["rate_mode"] = to_string(c.prune.rate_mode);
  p["preserve"] = c.prune.preserve;
  p["reactivate"] = c.prune.reactivate;
  p["gated_layers"] = c.prune.gated_layers;
  p["keep_ratios"] = c.prune.keep_ratios;
  p["lambda"] = c.prune.lambda;
  p["tau"] = c.prune.tau;
  p["gate_init_keep_bias"] = c.prune.gate_keep_bias;
  j["prune"] = std::move(p);
  ordered_json o;
  o["dense_epochs"] = c.optim.dense_epochs;
  o["sparse_epochs"] = c.optim.sparse_epochs;
  o["batch_size"] = c.optim.batch_size;
  o["lr_dense"] = c.optim.lr_dense;
  o["lr_sparse"] = c.optim.lr_sparse;
  o["beta1"] = c.optim.beta1;
  o["beta2"] = c.optim.beta2;
  o["eps"] = c.optim.eps;
  j["optim"] = std::move(o);
  ordered_json d;
  d["image_size"] = c.data.image_size;
  d["patch"] = c.data.patch;
  d["shapes"] = c.data.shapes;
  d["classes"] = c.data.classes;
  d["min_shape"] = c.data.min_shape;
  d["max_shape"] = c.data.max_shape;
  d["noise"] = c.data.noise;
  d["seed"] = c.data.seed;
  j["data"] = std::move(d);
  ordered_json b;
  b["image_size"] = c.bench.image_size;
  b["patch"] = c.bench.patch;
  b["images"] = c.bench.images;
  b["repeats"] = c.bench.repeats;
  b["warmup"] = c.bench.warmup;
  j["bench"] = std::move(b);
  j["train_images"] = c.train_images;
  j["eval_images"] = c.eval_images;
  j["out_dir"] = c.out_dir;
  j["threads"] = c.threads;
  j["sweep_ratios"] = c.sweep_ratios;
  j["compare_seeds"] = c.compare_seeds;
  return j;
}

}  // namespace tokensieve
