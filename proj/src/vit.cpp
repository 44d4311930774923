// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokensieve/vit.hpp"

#include <stdexcept>

namespace tokensieve {

namespace {

constexpr double kInitStd = 0.02;

Matrix normal_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = kInitStd * rng.normal();
  return m;
}

void require_positive(int v, const char* field) {
  if (v <= 0) throw std::invalid_argument(std::string("model.") + field + " must be positive, got " + std::to_string(v));
}

}  // namespace

void ModelDims::validate() const {
  require_positive(layers, "layers");
  require_positive(heads, "heads");
  require_positive(width, "width");
  require_positive(patch, "patch");
  require_positive(image_size, "image_size");
  require_positive(channels, "channels");
  require_positive(classes, "classes");
  if (width % heads != 0) {
    throw std::invalid_argument("model.heads " + std::to_string(heads) + " does not divide model.width " +
                                std::to_string(width));
  }
  if (image_size % patch != 0) {
    throw std::invalid_argument("model.image_size " + std::to_string(image_size) + " is not divisible by model.patch " +
                                std::to_string(patch));
  }
  if (width < 4) throw std::invalid_argument("model.width must be at least 4 for the gate hidden layer");
}

BackboneParams init_backbone(const ModelDims& dims, Rng& rng) {
  dims.validate();
  const std::size_t c = dims.c();
  BackboneParams p;
  p.dims = dims;
  p.patch_w = normal_matrix(dims.patch_dim(), c, rng);
  p.patch_b = Matrix(1, c);
  p.pos = normal_matrix(dims.tokens(), c, rng);
  p.blocks.resize(static_cast<std::size_t>(dims.layers));
  for (auto& b : p.blocks) {
    b.ln1_g = Matrix(1, c, 1.0);
    b.ln1_b = Matrix(1, c);
    b.wq = normal_matrix(c, c, rng);
    b.bq = Matrix(1, c);
    b.wk = normal_matrix(c, c, rng);
    b.bk = Matrix(1, c);
    b.wv = normal_matrix(c, c, rng);
    b.bv = Matrix(1, c);
    b.wo = normal_matrix(c, c, rng);
    b.bo = Matrix(1, c);
    b.ln2_g = Matrix(1, c, 1.0);
    b.ln2_b = Matrix(1, c);
    b.w1 = normal_matrix(c, 4 * c, rng);
    b.b1 = Matrix(1, 4 * c);
    b.w2 = normal_matrix(4 * c, c, rng);
    b.b2 = Matrix(1, c);
  }
  p.head_w = normal_matrix(c, static_cast<std::size_t>(dims.classes), rng);
  p.head_b = Matrix(1, static_cast<std::size_t>(dims.classes));
  return p;
}

void attach_gates(BackboneParams& params, const std::vector<int>& layers, GateDesign design, double keep_bias,
                  Rng& rng) {
  params.gates.clear();
  for (int layer : layers) {
    if (layer < 1 || layer > params.dims.layers) {
      throw std::invalid_argument("attach_gates: layer " + std::to_string(layer) + " outside [1, " +
                                  std::to_string(params.dims.layers) + "]");
    }
    params.gates.emplace(layer, init_gate(design, params.dims.c(), keep_bias, rng));
  }
}

void attach_class_token(BackboneParams& params, Rng& rng) { params.cls_token = normal_matrix(1, params.dims.c(), rng); }

Matrix extract_patches(const Image& image, int patch) {
  if (patch <= 0) throw std::invalid_argument("extract_patches: patch size must be positive");
  const auto ps = static_cast<std::size_t>(patch);
  if (image.height % ps != 0 || image.width % ps != 0) {
    throw std::invalid_argument("extract_patches: image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " is not divisible by patch size " + std::to_string(ps));
  }
  const std::size_t gh = image.height / ps, gw = image.width / ps;
  Matrix out(gh * gw, ps * ps * image.channels);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      auto row = out.row(py * gw + px);
      std::size_t k = 0;
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x)
          for (std::size_t c = 0; c < image.channels; ++c) row[k++] = image.at(py * ps + y, px * ps + x, c);
    }
  }
  return out;
}

TokenMap patch_embed(const Image& image, const BackboneParams& p) {
  Eager ops;
  return patch_embed(ops, image, p);
}

TokenMap mhsa_masked(const TokenMap& x, const LayerMask& keep, const ViTBlockParams& p, int heads) {
  if (keep.size() != x.rows()) {
    throw ShapeError("mhsa_masked: mask of " + std::to_string(keep.size()) + " for " + x.shape_str());
  }
  if (popcount(keep) == 0) throw std::invalid_argument("mhsa_masked: every token is pruned");
  Eager ops;
  const Matrix km = additive_key_mask(keep);
  return attention(ops, x, p, heads, &km, false).out;
}

TokenMap vit_block_forward(const TokenMap& x, const LayerMask& keep, const ViTBlockParams& p, int heads,
                           ExecForm form) {
  if (keep.size() != x.rows()) {
    throw ShapeError("vit_block_forward: mask of " + std::to_string(keep.size()) + " for " + x.shape_str());
  }
  if (popcount(keep) == 0) throw std::invalid_argument("vit_block_forward: every token is pruned");
  Eager ops;
  if (form == ExecForm::masked) {
    const Matrix km = additive_key_mask(keep);
    Matrix v = block_apply(ops, x, p, heads, &km).out;
    return mask_combine(mask_column(keep), v, x);
  }
  const auto idx = kept_indices(keep);
  Matrix v = block_apply(ops, gather_rows(x, idx), p, heads).out;
  TokenMap out = x;
  scatter_rows(out, v, idx);
  return out;
}

Matrix head_predict(const TokenMap& x, const BackboneParams& p) {
  Eager ops;
  return head_apply(ops, x, p);
}

}  // namespace tokensieve
