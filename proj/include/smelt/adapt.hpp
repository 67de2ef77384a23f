#pragma once

#include <map>
#include <span>

#include "smelt/metaopt.hpp"

namespace smelt {

struct SelectionSearchConfig {
  int rounds = 5;            // R
  double accept_prob = 0.9;  // rho: acceptance probability for improving flips
  uint64_t seed = 0;
  bool stochastic_gates = false;  // sample gates once at the start instead of
                                  // using the deterministic estimator
  bool loo_support_loss = true;   // leave-one-out centroids when every class
                                  // has >= 2 shots; plain support CE otherwise

  void validate() const;
};

struct SelectionTraceEntry {
  std::vector<double> candidate;  // binary raw activations
  double support_loss = 0.0;
  bool accepted = false;
};

struct SelectionTrace {
  std::vector<SelectionTraceEntry> entries;  // first entry is the initial point
  std::vector<double> best_raw;
  double best_loss = 0.0;
  int64_t merges_evaluated = 0;
};

struct SelectionResult {
  MergeWeights weights;
  SelectionTrace trace;
};

// Support-set ProtoNet cross-entropy used by the selection search; pure
// forward computation, no tape is ever differentiated.
double selection_support_loss(const ParamSet& theta, const NetConfig& net_cfg,
                              const Episode& episode, Metric metric, bool leave_one_out);

// Gradient-free local search over binary expert activations (bit flips with
// rejection sampling), starting from the hard-routed selection.
SelectionResult select_experts(const TrainState& state, const NetConfig& net_cfg,
                               const Episode& episode, const SelectionSearchConfig& cfg,
                               Metric metric);

struct FinetuneConfig {
  int steps = 50;
  double lr = 1e-3;
  bool stochastic_gates = false;
  uint64_t seed = 0;

  void validate() const;
};

struct FinetuneResult {
  ParamSet theta;
  Tensor query_logits;
  std::vector<double> support_loss_curve;  // loss before each step + final
};

// Full fine-tuning from the merged initialization: detach theta_i, then run
// adaptive-moment steps on the support CE. The train state is never mutated.
FinetuneResult finetune_full(const TrainState& state, const NetConfig& net_cfg,
                             const Episode& episode, const FinetuneConfig& cfg, Metric metric);

// Best fine-tuning learning rate per domain by mean query loss over labeled
// validation episodes; ties break toward the smaller rate. The "" key holds
// the global best across all episodes (fallback for unseen domains).
std::map<std::string, double> lr_search(const TrainState& state, const NetConfig& net_cfg,
                                        std::span<const Episode> validation,
                                        std::span<const double> grid, const FinetuneConfig& base,
                                        Metric metric);

}  // namespace smelt
