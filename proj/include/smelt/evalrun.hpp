#pragma once

#include "smelt/adapt.hpp"
#include "smelt/analysis.hpp"
#include "smelt/tasks.hpp"

namespace smelt {

enum class EvalMode { kDirect, kSelect, kFinetune };
EvalMode eval_mode_from_name(const std::string& s);
const char* eval_mode_name(EvalMode m);

struct EvalOptions {
  Split split = Split::kTest;
  EvalMode mode = EvalMode::kDirect;
  int episodes = 100;  // per group (ID and OOD)
  bool include_id = true;
  bool include_ood = true;
  bool stochastic_gates = false;
  SelectionSearchConfig selection;
  FinetuneConfig finetune;  // finetune.lr <= 0 triggers the validation lr search
  std::vector<double> lr_grid = {3e-4, 1e-3, 3e-3, 1e-2};
  int lr_search_episodes = 8;
  uint64_t seed = 0;
  int threads = 0;  // 0 = SMLT_THREADS or 1
  Metric metric = Metric::kSqEuclid;
};

struct EvalSummary {
  double id_mean = 0.0, id_ci95 = 0.0;
  double ood_mean = 0.0, ood_ci95 = 0.0;
  int id_n = 0, ood_n = 0;
};

struct EvalOutput {
  std::vector<EvalLogRow> rows;
  EvalSummary summary;
  std::string csv;  // header + per-episode rows + summary rows
};

// Episode evaluation may fan out to worker threads; results are reduced in
// episode order, so the output is independent of the thread count.
EvalOutput run_eval(const TrainState& state, const NetConfig& net_cfg, const SuiteSpec& suite,
                    const EvalOptions& opts);

int resolve_thread_count(int requested);

}  // namespace smelt
