// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// Binary checkpoint format, all integers little-endian:
//
//   "TSIEVECK"                 8-byte magic
//   u32 version                currently 1
//   7 x i32 dims               layers heads width patch image_size channels classes
//   u32 len, bytes             training stage ("dense" | "sparse")
//   u64 seed                   master seed of the producing run
//   u32 count                  number of tensors
//   per tensor:
//     u32 len, bytes           name (see visit_params)
//     u32 rank, rank x u64     shape
//     f64 x prod(shape)        IEEE-754 binary64 payload, row-major

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tokensieve/vit.hpp"

namespace tokensieve {

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'I', 'E', 'V', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, unsupported_version, truncated, malformed, shape_mismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelDims dims;
  std::string stage;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Matrix>> tensors;
};

Checkpoint make_checkpoint(const BackboneParams& params, const std::string& stage, std::uint64_t seed);
// Rebuilds parameters, inferring gates and the class token from tensor names
// and validating every shape against the stored dims.
BackboneParams params_from_checkpoint(const Checkpoint& ck);

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tokensieve
