#pragma once

#include <string>
#include <vector>

#include "smelt/adapt.hpp"
#include "smelt/metaopt.hpp"
#include "smelt/tasks.hpp"

namespace smelt {

struct AdaptBlock {
  SelectionSearchConfig selection;
  FinetuneConfig finetune;
  std::vector<double> lr_grid = {3e-4, 1e-3, 3e-3, 1e-2};
  int lr_search_episodes = 8;
  bool ft_lr_fixed = false;  // true when ft_lr given explicitly
};

// Whole-run configuration. Every seed defaults to the top-level seed, so a
// run is reproducible from this file alone. Unknown keys are rejected.
struct RunConfig {
  int format_version = 1;
  SuiteSpec suite;
  bool suite_by_name = true;
  std::string suite_name = "md-mini";
  std::string catalog_version = "1";
  NetConfig net;
  PretrainConfig pretrain;
  TrainConfig train;
  AdaptBlock adapt;
  std::string output_dir = "runs/out";
  uint64_t seed = 0;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Canonical JSON echo (stable key order); stored verbatim in checkpoints.
std::string run_config_json(const RunConfig& cfg);

}  // namespace smelt
