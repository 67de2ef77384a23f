#pragma once

#include "smelt/params.hpp"
#include "smelt/rng.hpp"

namespace smelt {

// Fixed backbone family: input embedding, `depth` pre-norm residual MLP
// blocks, and a final projection into embedding space. Small enough for
// finite-difference checks while spanning distinct layer kinds and depths.
struct NetConfig {
  int input_dim = 16;
  int width = 32;
  int depth = 2;
  int embed_dim = 32;

  bool operator==(const NetConfig&) const = default;
};

SpecsPtr backbone_specs(const NetConfig& cfg);

// Weights ~ N(0, 1/sqrt(fan_in)), biases/shifts 0, norm scales 1.
ParamSet init_backbone(const NetConfig& cfg, RngStream rng);

// Embedding forward for a batch of inputs x [N x input_dim] -> [N x embed_dim].
Var backbone_embed(Tape& tape, const TapedParams& params, const NetConfig& cfg, Var x);

// Convenience: run on a scratch tape, values only.
Tensor backbone_embed_values(const ParamSet& params, const NetConfig& cfg, const Tensor& x);

}  // namespace smelt
