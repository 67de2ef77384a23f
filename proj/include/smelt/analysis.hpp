#pragma once

#include <span>
#include <string>
#include <vector>

#include "smelt/metaopt.hpp"

namespace smelt {

struct SparsityRow {
  std::string layer;
  LayerKind kind = LayerKind::kLinearWeight;
  int depth_index = 0;
  int expert = 0;
  double density = 0.0;
  double sparsity = 0.0;
};

struct SparsityReport {
  std::vector<SparsityRow> rows;                 // per (layer, expert)
  std::vector<double> expert_total_density;      // per expert
  std::vector<double> layer_density_std;         // across experts, per layer
  double merged_expected_density = 0.0;          // P(any gate keeps the entry), independent gates
  double merged_expected_sparsity = 0.0;
};

SparsityReport sparsity_report(const ExpertPool& pool);
std::string sparsity_report_csv(const SparsityReport& r, const ExpertPool& pool);

// Pairwise overlap of deterministic gates binarized at `threshold`.
Tensor mask_overlap_matrix(const ExpertPool& pool, double threshold);
std::string overlap_matrix_csv(const Tensor& m);

struct AlignmentEpisode {
  Episode episode;
  uint64_t noise_id = 0;  // keys the routing/gate noise; equal ids reproduce gradients
};

struct AlignmentPairRow {
  double delta_alignment = 0.0;                // cos over theta_delta gradients
  std::vector<double> expert_alignment;        // cos over z_m-masked gradients
  bool zero_gradient = false;                  // reported as 0 with this flag
};

struct AlignmentReport {
  std::vector<AlignmentPairRow> pairs;
  double delta_alignment_mean = 0.0;
  std::vector<double> expert_alignment_mean;
};

// Meta-gradient of the episode loss w.r.t. theta_delta for each pair member;
// alignment is the cosine overall and per binarized expert mask.
AlignmentReport gradient_alignment(const TrainState& state, const NetConfig& net_cfg,
                                   const TrainConfig& cfg,
                                   std::span<const std::pair<AlignmentEpisode, AlignmentEpisode>> pairs);
std::string alignment_csv(const AlignmentReport& r);

struct EvalLogRow {
  uint64_t task_id = 0;
  std::string domain;
  bool is_ood = false;
  double acc = 0.0;
  std::vector<double> raw;    // pre-normalization activations
  std::vector<double> alpha;  // normalized merge weights
};

struct SelectionStats {
  std::vector<std::string> domains;
  Tensor mean_alpha;      // [domains x M]
  double discreteness = 0.0;  // mean over entries of min(raw, 1-raw)
  Tensor similarity;      // cosine between domain rows
};

SelectionStats selection_stats(std::span<const EvalLogRow> log);
std::string selection_stats_csv(const SelectionStats& s);

// Parses the per-episode rows of an evaluation CSV (summary rows skipped).
std::vector<EvalLogRow> parse_eval_log(const std::string& csv_text);

}  // namespace smelt
