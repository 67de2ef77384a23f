#pragma once

#include <vector>

#include "smelt/l0mask.hpp"
#include "smelt/params.hpp"

namespace smelt {

// Frozen pre-trained parameters, one shared trainable modulation, and M mask
// distributions with their constraint multipliers.
struct ExpertPool {
  ParamSet theta_pre;   // never updated
  ParamSet theta_delta;
  std::vector<HardConcreteMask> masks;
  std::vector<double> lambdas;
  double tau = 0.9;

  int expert_count() const { return static_cast<int>(masks.size()); }
  void validate() const;
};

ExpertPool make_pool(ParamSet theta_pre, int experts, double tau, const HardConcreteConfig& hc,
                     double init_density, double init_std, RngStream rng);

// Per-expert nonnegative merge weights. If any raw activation is positive the
// alphas are normalized to sum to one; an all-zero raw vector yields all-zero
// alphas (the merge then degenerates to theta_pre).
struct MergeWeights {
  std::vector<double> alpha;
  std::vector<double> raw;

  static MergeWeights from_raw(std::vector<double> raw);
  void validate() const;
};

// theta_i = theta_pre + theta_delta .* sum_m alpha_m * z_m
ParamSet merge(const ExpertPool& pool, const MergeWeights& weights,
               const std::vector<GateSample>& gates);

// Taped merge for training: alphas and gates are tape variables; theta_pre
// enters as constants so no gradient can reach it.
TapedParams merge_vars(Tape& tape, const ParamSet& theta_pre, const TapedParams& theta_delta,
                       const std::vector<Var>& alphas,
                       const std::vector<std::vector<Var>>& gates);

// Guaranteed lower bound on merged-modulation sparsity when each of M masks
// meets target sparsity tau: max(0, 1 - M*(1-tau)).
double merged_sparsity_bound(int experts, double tau);

}  // namespace smelt
