// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tokensieve/harness.hpp"

namespace tokensieve {

namespace {

using Kind = CheckpointError::Kind;

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  std::uint64_t get(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(get(8, what)); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw CheckpointError(Kind::truncated, std::string("checkpoint truncated while reading ") + what + " at byte " +
                                                 std::to_string(pos_));
    }
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const BackboneParams& params, const std::string& stage, std::uint64_t seed) {
  Checkpoint ck;
  ck.dims = params.dims;
  ck.stage = stage;
  ck.seed = seed;
  visit_params(params, [&](const std::string& name, const Matrix& m) { ck.tensors.emplace_back(name, m); });
  return ck;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(ck.version);
  for (int v : {ck.dims.layers, ck.dims.heads, ck.dims.width, ck.dims.patch, ck.dims.image_size, ck.dims.channels,
                ck.dims.classes}) {
    w.i32(v);
  }
  w.str(ck.stage);
  w.u64(ck.seed);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, m] : ck.tensors) {
    w.str(name);
    w.u32(2);
    w.u64(m.rows());
    w.u64(m.cols());
    for (double v : m.data()) w.f64(v);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic) {
    throw CheckpointError(Kind::truncated, "checkpoint truncated: shorter than the 8-byte magic");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError(Kind::bad_magic, "not a checkpoint: bad magic bytes");
  }
  Reader r(bytes);
  r.get(8, "magic");
  Checkpoint ck;
  ck.version = r.u32("version");
  if (ck.version != kCheckpointVersion) {
    throw CheckpointError(Kind::unsupported_version, "unsupported checkpoint version " + std::to_string(ck.version) +
                                                         " (this build reads version " +
                                                         std::to_string(kCheckpointVersion) + ")");
  }
  ck.dims.layers = r.i32("dims");
  ck.dims.heads = r.i32("dims");
  ck.dims.width = r.i32("dims");
  ck.dims.patch = r.i32("dims");
  ck.dims.image_size = r.i32("dims");
  ck.dims.channels = r.i32("dims");
  ck.dims.classes = r.i32("dims");
  ck.stage = r.str("stage");
  ck.seed = r.u64("seed");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.str("tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank != 2) throw CheckpointError(Kind::malformed, "tensor " + name + " has rank " + std::to_string(rank));
    const std::uint64_t rows = r.u64("tensor shape"), cols = r.u64("tensor shape");
    if (cols != 0 && rows > r.remaining() / 8 / cols) {
      throw CheckpointError(Kind::truncated, "checkpoint truncated inside tensor " + name);
    }
    Matrix m(rows, cols);
    for (double& v : m.data()) v = r.f64("tensor payload");
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (r.remaining() != 0) {
    throw CheckpointError(Kind::malformed, std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  }
  return ck;
}

BackboneParams params_from_checkpoint(const Checkpoint& ck) {
  try {
    ck.dims.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(Kind::malformed, std::string("checkpoint dims invalid: ") + e.what());
  }
  std::map<std::string, const Matrix*> by_name;
  std::map<int, GateDesign> gate_layers;
  bool has_cls = false;
  for (const auto& [name, m] : ck.tensors) {
    if (!by_name.emplace(name, &m).second) throw CheckpointError(Kind::malformed, "duplicate tensor " + name);
    if (name.rfind("gates.", 0) == 0) {
      const auto dot = name.find('.', 6);
      int layer = 0;
      try {
        layer = std::stoi(name.substr(6, dot - 6));
      } catch (const std::exception&) {
        throw CheckpointError(Kind::malformed, "bad gate tensor name " + name);
      }
      auto& d = gate_layers.emplace(layer, GateDesign::mlp).first->second;
      if (name.substr(dot + 1) == "w3") d = GateDesign::pooled;
    }
    if (name == "cls_token") has_cls = true;
  }
  Rng rng(0);
  BackboneParams p = init_backbone(ck.dims, rng);
  for (const auto& [layer, design] : gate_layers) {
    if (layer < 1 || layer > ck.dims.layers) {
      throw CheckpointError(Kind::malformed, "gate for layer " + std::to_string(layer) + " outside the model");
    }
    p.gates.emplace(layer, init_gate(design, ck.dims.c(), 0.0, rng));
  }
  if (has_cls) p.cls_token = Matrix(1, ck.dims.c());
  std::size_t used = 0;
  visit_params(p, [&](const std::string& name, Matrix& m) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError(Kind::malformed, "checkpoint is missing tensor " + name);
    if (!it->second->same_shape(m)) {
      throw CheckpointError(Kind::shape_mismatch, "tensor " + name + " has shape " + it->second->shape_str() +
                                                      " in the checkpoint, model expects " + m.shape_str());
    }
    m = *it->second;
    ++used;
  });
  if (used != by_name.size()) {
    std::set<std::string> known;
    visit_params(p, [&](const std::string& name, Matrix&) { known.insert(name); });
    for (const auto& [name, m] : by_name) {
      if (!known.count(name)) throw CheckpointError(Kind::malformed, "unexpected tensor " + name);
    }
  }
  return p;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  try {
    write_file_atomic(path, serialize_checkpoint(ck));
  } catch (const std::runtime_error& e) {
    throw CheckpointError(Kind::io, e.what());
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(Kind::io, "cannot read checkpoint " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace tokensieve
