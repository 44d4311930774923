// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "tokensieve/harness.hpp"

namespace tokensieve {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json to_json(const EvalMetrics& m) {
  ordered_json j;
  j["images"] = m.images;
  j["token_acc"] = m.token_acc;
  j["fg_acc"] = m.fg_acc;
  j["miou"] = m.miou;
  j["keep_ratio"] = m.keep_ratio;
  j["flops"] = m.flops;
  j["fg_usage"] = m.fg_usage;
  j["bg_usage"] = m.bg_usage;
  return j;
}

ordered_json to_json(const LossReport& l) {
  ordered_json j;
  j["task"] = l.task;
  j["ratio"] = l.ratio;
  j["total"] = l.total;
  j["usage"] = l.usage;
  return j;
}

ordered_json to_json(const EpochRecord& r) {
  ordered_json j;
  j["kind"] = "epoch";
  j["stage"] = r.stage;
  j["epoch"] = r.epoch;
  j["steps"] = r.steps;
  j["loss"] = to_json(r.loss);
  j["eval"] = to_json(r.eval);
  return j;
}

ordered_json to_json(const SweepRow& r) {
  ordered_json j;
  j["kind"] = "sweep";
  j["base_ratio"] = r.base_ratio;
  j["schedule"] = r.schedule;
  j["diverged"] = r.diverged;
  j["eval"] = to_json(r.eval);
  return j;
}

ordered_json to_json(const CompareRow& r) {
  ordered_json j;
  j["kind"] = "compare";
  j["seed"] = r.seed;
  j["selector"] = r.selector;
  j["diverged"] = r.diverged;
  j["eval"] = to_json(r.eval);
  return j;
}

ordered_json to_json(const std::vector<ReactivationStat>& stats) {
  ordered_json j;
  j["kind"] = "reactivation";
  ordered_json layers = ordered_json::array();
  for (const auto& s : stats) {
    ordered_json e;
    e["layer"] = s.layer;
    e["pruned"] = s.pruned;
    e["reused"] = s.reused;
    e["reused_next"] = s.reused_next;
    e["ratio"] = s.ratio ? ordered_json(*s.ratio) : ordered_json(nullptr);
    e["immediate"] = s.immediate ? ordered_json(*s.immediate) : ordered_json(nullptr);
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j;
}

namespace {

struct SchemaError {
  std::string msg;
};

const json& field(const json& o, const std::string& path, const char* key) {
  if (!o.is_object()) throw SchemaError{path + " must be an object"};
  auto it = o.find(key);
  if (it == o.end()) throw SchemaError{"missing field " + path + "." + key};
  return *it;
}

double number(const json& o, const std::string& path, const char* key) {
  const json& v = field(o, path, key);
  if (!v.is_number()) throw SchemaError{path + "." + key + " must be a number"};
  return v.get<double>();
}

double unit(const json& o, const std::string& path, const char* key) {
  const double v = number(o, path, key);
  if (!(v >= 0.0 && v <= 1.0)) throw SchemaError{path + "." + key + " must lie in [0, 1]"};
  return v;
}

void unit_array(const json& o, const std::string& path, const char* key) {
  const json& v = field(o, path, key);
  if (!v.is_array()) throw SchemaError{path + "." + key + " must be an array"};
  for (const auto& e : v) {
    if (!e.is_number() || e.get<double>() < 0.0 || e.get<double>() > 1.0) {
      throw SchemaError{path + "." + key + " entries must be numbers in [0, 1]"};
    }
  }
}

void check_eval(const json& e, const std::string& path) {
  if (!field(e, path, "images").is_number_unsigned()) throw SchemaError{path + ".images must be a count"};
  unit(e, path, "token_acc");
  unit(e, path, "fg_acc");
  unit(e, path, "miou");
  unit_array(e, path, "keep_ratio");
  if (number(e, path, "flops") < 0) throw SchemaError{path + ".flops must be >= 0"};
  unit(e, path, "fg_usage");
  unit(e, path, "bg_usage");
}

void check_record(const json& r) {
  const json& kind = field(r, "record", "kind");
  if (!kind.is_string()) throw SchemaError{"record.kind must be a string"};
  const std::string k = kind.get<std::string>();
  if (k == "epoch") {
    const json& st = field(r, "record", "stage");
    if (!st.is_string() || (st != "dense" && st != "sparse")) throw SchemaError{"record.stage must be dense|sparse"};
    if (!field(r, "record", "epoch").is_number_integer()) throw SchemaError{"record.epoch must be an integer"};
    if (!field(r, "record", "steps").is_number_integer()) throw SchemaError{"record.steps must be an integer"};
    const json& loss = field(r, "record", "loss");
    number(loss, "loss", "task");
    if (number(loss, "loss", "ratio") < 0) throw SchemaError{"loss.ratio must be >= 0"};
    number(loss, "loss", "total");
    unit_array(loss, "loss", "usage");
    check_eval(field(r, "record", "eval"), "eval");
  } else if (k == "eval") {
    check_eval(field(r, "record", "eval"), "eval");
  } else if (k == "sweep") {
    const double b = number(r, "record", "base_ratio");
    if (!(b > 0.0 && b <= 1.0)) throw SchemaError{"record.base_ratio must lie in (0, 1]"};
    unit_array(r, "record", "schedule");
    if (!field(r, "record", "diverged").is_boolean()) throw SchemaError{"record.diverged must be a boolean"};
    check_eval(field(r, "record", "eval"), "eval");
  } else if (k == "compare") {
    if (!field(r, "record", "seed").is_number_unsigned()) throw SchemaError{"record.seed must be an unsigned integer"};
    const json& s = field(r, "record", "selector");
    if (!s.is_string() || (s != "gate_mlp" && s != "gate_pooled")) {
      throw SchemaError{"record.selector must be gate_mlp|gate_pooled"};
    }
    if (!field(r, "record", "diverged").is_boolean()) throw SchemaError{"record.diverged must be a boolean"};
    check_eval(field(r, "record", "eval"), "eval");
  } else if (k == "reactivation") {
    const json& layers = field(r, "record", "layers");
    if (!layers.is_array()) throw SchemaError{"record.layers must be an array"};
    for (const auto& e : layers) {
      for (const char* key : {"layer", "pruned", "reused", "reused_next"}) {
        if (!field(e, "layers[]", key).is_number_integer()) throw SchemaError{std::string("layers[].") + key + " must be an integer"};
      }
      for (const char* key : {"ratio", "immediate"}) {
        const json& v = field(e, "layers[]", key);
        if (!v.is_null() && !(v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0)) {
          throw SchemaError{std::string("layers[].") + key + " must be null or a number in [0, 1]"};
        }
      }
    }
  } else {
    throw SchemaError{"unknown record kind '" + k + "'"};
  }
}

}  // namespace

std::string validate_metric_record(const json& rec) {
  try {
    check_record(rec);
  } catch (const SchemaError& e) {
    return e.msg;
  }
  return {};
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f) {
      f.close();
      std::remove(tmp.c_str());
      throw std::runtime_error("write to " + tmp + " failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot rename " + tmp + " to " + path + ": " + ec.message());
  }
}

}  // namespace tokensieve
