#pragma once

#include "smelt/experts.hpp"
#include "smelt/fewshot.hpp"
#include "smelt/net.hpp"
#include "smelt/rng.hpp"

namespace smelt {

// One self-attention + feedforward block over class-prototype tokens, a
// linear head emitting per-expert logits, and a Gumbel-Sigmoid sampler.
struct RouterConfig {
  int embed_dim = 32;
  int experts = 4;
  int heads = 2;
  int ffn_mult = 2;
  double gumbel_temp = 1.0;

  void validate() const;
};

struct RouterParams {
  ParamSet params;
  RouterConfig cfg;
};

SpecsPtr router_specs(const RouterConfig& cfg);
RouterParams init_router(const RouterConfig& cfg, RngStream rng);

// Class prototypes from the frozen encoder, ordered by class id [n_way x E].
Tensor encode_prototypes(const ParamSet& encoder, const NetConfig& net_cfg,
                         const Episode& episode);

// Per-expert activation logits from block + mean-pooled head.
Var router_logits_t(Tape& tape, const TapedParams& router_vars, const RouterConfig& cfg,
                    const Tensor& prototypes);
Tensor router_logits(const RouterParams& router, const Tensor& prototypes);

enum class RouteMode { kTrain, kHard };

struct RouteResult {
  std::vector<Var> alpha_vars;  // M scalar vars (train mode only)
  MergeWeights weights;         // values in both modes
  std::vector<double> noise;    // logistic noise used (train mode)
};

// Train mode: raw_m = sigmoid((logit_m + g_m)/temp) with logistic noise g,
// differentiable w.r.t. the router; alphas normalized by their sum.
// `noise_override` substitutes fixed noise (tests).
RouteResult route_train(Tape& tape, const TapedParams& router_vars, const RouterConfig& cfg,
                        const Tensor& prototypes, RngStream& rng,
                        const std::vector<double>* noise_override = nullptr);

// Hard mode: raw_m = 1 if sigmoid(logit_m) > 0.5 else 0; deterministic.
MergeWeights route_hard(const RouterParams& router, const Tensor& prototypes);

// Cosine similarity between rows (zero rows give zero similarity).
Tensor selection_similarity(const Tensor& per_domain_mean_alpha);

}  // namespace smelt
