#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>

#include "smelt/experts.hpp"
#include "smelt/fewshot.hpp"
#include "smelt/optim.hpp"
#include "smelt/router.hpp"

namespace smelt {

struct TrainConfig {
  int experts = 4;        // M
  double tau = 0.9;       // target per-expert sparsity
  double beta_w = 0.5;    // CE weight in the episode loss
  double kd_temp = 2.0;
  int teacher_steps = 1;  // K
  double lr_main = 2e-3;
  double lr_lambda = 1.0;
  double lr_teacher = 0.5;
  int batch_tasks = 4;
  int max_steps = 10000;
  uint64_t seed = 0;

  double gumbel_temp = 1.0;
  double gumbel_temp_final = 1.0;  // linear anneal endpoint; equal = constant
  bool alpha_weighted_ascent = false;
  Metric metric = Metric::kSqEuclid;
  HardConcreteConfig hc;
  double mask_init_density = 0.5;
  double mask_init_std = 0.01;
  int eval_every = 500;
  int eval_episodes = 40;

  void validate() const;
};

struct TrainState {
  ExpertPool pool;
  RouterParams router;
  int64_t step = 0;
  Adam opt_delta;
  Adam opt_router;
  std::vector<Adam> opt_masks;
};

struct StepMetrics {
  double objective = 0.0;  // batch loss + active constraint penalties
  double mean_ce = 0.0;
  double mean_kd = 0.0;
  std::vector<double> density;     // per expert, evaluated at the step's iterate
  std::vector<double> lambda;      // after the ascent/reset
  std::vector<double> mean_alpha;  // batch mean merge weight per expert
};

struct EpisodeSource {
  std::function<Episode(uint64_t)> train_episode;
  std::function<Episode(uint64_t)> val_id;
  std::function<Episode(uint64_t)> val_ood;  // optional diagnostics
};

struct TrainResult {
  TrainState best;   // by validation ID accuracy (final state when never evaluated)
  TrainState final_state;
  int64_t best_step = 0;
  double best_val_acc = 0.0;
  std::vector<std::string> metrics_rows;  // fixed-order CSV rows
};

std::string metrics_csv_header(int experts);

TrainState init_train_state(const TrainConfig& cfg, const NetConfig& net_cfg, ParamSet theta_pre);

// K plain gradient-descent steps on the query cross-entropy, starting from a
// detached copy of theta_i; the returned set carries no tape history.
ParamSet make_teacher(const ParamSet& theta_i, const Episode& episode, int steps, double lr,
                      const NetConfig& net_cfg, Metric metric);

// v_m = expected_density(mask_m) - (1 - tau); positive means violated.
std::vector<double> sparsity_violation(const ExpertPool& pool);

// One simultaneous descent/ascent step over a batch of episodes.
StepMetrics meta_step(TrainState& state, std::span<const Episode> batch, const TrainConfig& cfg,
                      const NetConfig& net_cfg);

TrainResult train(const TrainConfig& cfg, const NetConfig& net_cfg, ParamSet theta_pre,
                  const EpisodeSource& source);

// ---- inference helpers shared by evaluation and test-time adaptation ----

// Gates fixed once per episode: deterministic estimator by default, or a
// single stochastic draw.
std::vector<GateSample> episode_gates(const ExpertPool& pool, bool stochastic, RngStream rng);

struct DirectInference {
  MergeWeights weights;
  ParamSet theta_i;
  Tensor query_logits;
};

DirectInference direct_inference(const TrainState& state, const NetConfig& net_cfg,
                                 const Episode& episode, Metric metric,
                                 const std::vector<GateSample>& gates);

// Plain dense meta-tuning baseline: episodic ProtoNet training of the whole
// parameter set starting from theta_pre. Also the reference half of the
// meta_step equivalence check.
struct DenseTuneResult {
  ParamSet theta;
  std::vector<std::string> metrics_rows;  // step,mean_ce
};

DenseTuneResult dense_meta_tune(const ParamSet& theta_pre, const NetConfig& net_cfg,
                                const std::function<Episode(uint64_t)>& episodes, int steps,
                                int batch, double lr, Metric metric);

// ---- single-mask constrained fit (the sparse-interpolation harness) ----

struct FitDomainConfig {
  double tau = 0.9;
  int steps = 3000;
  int batch_tasks = 4;
  double lr_log_alpha = 0.05;
  double lr_lambda = 1.0;
  uint64_t seed = 0;
  HardConcreteConfig hc;
  double init_density = 0.5;
  double init_std = 0.01;
  Metric metric = Metric::kSqEuclid;

  void validate() const;
};

struct FitDomainResult {
  HardConcreteMask mask;
  double lambda = 0.0;
  double final_density = 0.0;
  bool reset_rule_held = true;  // lambda == 0 whenever the constraint was satisfied
  std::vector<std::string> history_rows;  // step,loss,density,lambda
};

// Freezes the modulation to theta_tuned - theta_pre and trains one mask under
// the sparsity constraint (router bypassed, merge weight fixed at 1).
FitDomainResult fit_domain_mask(const ParamSet& theta_pre, const ParamSet& theta_tuned,
                                const std::function<Episode(uint64_t)>& episodes,
                                const NetConfig& net_cfg, const FitDomainConfig& cfg);

}  // namespace smelt
