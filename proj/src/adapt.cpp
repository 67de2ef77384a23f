#include "smelt/adapt.hpp"

#include <algorithm>
#include <cmath>

namespace smelt {

void SelectionSearchConfig::validate() const {
  if (rounds < 1) throw ConfigError("selection: rounds must be >= 1");
  if (!(accept_prob > 0.0 && accept_prob <= 1.0))
    throw ConfigError("selection: accept_prob must be in (0,1]");
}

void FinetuneConfig::validate() const {
  if (steps < 0) throw ConfigError("finetune: steps must be >= 0");
  if (lr < 0.0) throw ConfigError("finetune: lr must be >= 0");
}

namespace {

double sq_dist(const Tensor& emb, int row, const std::vector<double>& centroid) {
  double s = 0.0;
  int e = emb.cols();
  for (int c = 0; c < e; ++c) {
    double d = emb.at(row, c) - centroid[static_cast<size_t>(c)];
    s += d * d;
  }
  return s;
}

double cos_dist(const Tensor& emb, int row, const std::vector<double>& centroid) {
  double dotv = 0, na = 0, nb = 0;
  int e = emb.cols();
  for (int c = 0; c < e; ++c) {
    double a = emb.at(row, c), b = centroid[static_cast<size_t>(c)];
    dotv += a * b;
    na += a * a;
    nb += b * b;
  }
  double denom = std::sqrt(na * nb) + 1e-12;
  return 1.0 - dotv / denom;
}

double softmax_ce_of_neg_dists(const std::vector<double>& dists, int label) {
  double m = -dists[0];
  for (double d : dists) m = std::max(m, -d);
  double lse = 0;
  for (double d : dists) lse += std::exp(-d - m);
  lse = m + std::log(lse);
  return -(-dists[static_cast<size_t>(label)] - lse);
}

}  // namespace

double selection_support_loss(const ParamSet& theta, const NetConfig& net_cfg,
                              const Episode& episode, Metric metric, bool leave_one_out) {
  Tensor emb = backbone_embed_values(theta, net_cfg, episode.support_x);
  int ns = emb.rows(), e = emb.cols(), k_way = episode.n_way;

  std::vector<int> counts(static_cast<size_t>(k_way), 0);
  std::vector<std::vector<double>> sums(static_cast<size_t>(k_way),
                                        std::vector<double>(static_cast<size_t>(e), 0.0));
  for (int j = 0; j < ns; ++j) {
    int y = episode.support_y[static_cast<size_t>(j)];
    ++counts[static_cast<size_t>(y)];
    for (int c = 0; c < e; ++c) sums[static_cast<size_t>(y)][static_cast<size_t>(c)] += emb.at(j, c);
  }
  bool loo = leave_one_out &&
             std::all_of(counts.begin(), counts.end(), [](int c) { return c >= 2; });

  double loss = 0.0;
  std::vector<double> centroid(static_cast<size_t>(e));
  std::vector<double> dists(static_cast<size_t>(k_way));
  for (int j = 0; j < ns; ++j) {
    int yj = episode.support_y[static_cast<size_t>(j)];
    for (int k = 0; k < k_way; ++k) {
      double denom = counts[static_cast<size_t>(k)];
      for (int c = 0; c < e; ++c) centroid[static_cast<size_t>(c)] = sums[static_cast<size_t>(k)][static_cast<size_t>(c)];
      if (loo && k == yj) {
        for (int c = 0; c < e; ++c) centroid[static_cast<size_t>(c)] -= emb.at(j, c);
        denom -= 1.0;
      }
      for (int c = 0; c < e; ++c) centroid[static_cast<size_t>(c)] /= denom;
      dists[static_cast<size_t>(k)] = metric == Metric::kSqEuclid ? sq_dist(emb, j, centroid)
                                                                  : cos_dist(emb, j, centroid);
    }
    loss += softmax_ce_of_neg_dists(dists, yj);
  }
  return loss / ns;
}

SelectionResult select_experts(const TrainState& state, const NetConfig& net_cfg,
                               const Episode& episode, const SelectionSearchConfig& cfg,
                               Metric metric) {
  cfg.validate();
  const int m_count = state.pool.expert_count();
  RngStream rng = RngStream(cfg.seed).child("select");

  // masks fixed once for the whole search
  auto gates = episode_gates(state.pool, cfg.stochastic_gates, rng.child("gates"));

  Tensor protos = encode_prototypes(state.pool.theta_pre, net_cfg, episode);
  MergeWeights init = route_hard(state.router, protos);
  std::vector<double> current = init.raw;  // binary

  auto eval_candidate = [&](const std::vector<double>& raw) {
    ParamSet theta = merge(state.pool, MergeWeights::from_raw(raw), gates);
    return selection_support_loss(theta, net_cfg, episode, metric, cfg.loo_support_loss);
  };

  SelectionResult out;
  double l_current = eval_candidate(current);
  out.trace.entries.push_back({current, l_current, true});
  out.trace.best_raw = current;
  out.trace.best_loss = l_current;
  out.trace.merges_evaluated = 1;

  for (int r = 0; r < cfg.rounds; ++r) {
    for (int m = 0; m < m_count; ++m) {
      std::vector<double> cand = current;
      cand[static_cast<size_t>(m)] = cand[static_cast<size_t>(m)] == 0.0 ? 1.0 : 0.0;
      double l = eval_candidate(cand);
      ++out.trace.merges_evaluated;

      bool improving = l < l_current;
      double p_accept = improving ? cfg.accept_prob : 1.0 - cfg.accept_prob;
      bool accepted = rng.uniform() < p_accept;
      if (accepted) {
        current = cand;
        l_current = l;
      }
      if (l < out.trace.best_loss) {
        out.trace.best_loss = l;
        out.trace.best_raw = cand;
      }
      out.trace.entries.push_back({std::move(cand), l, accepted});
    }
  }
  out.weights = MergeWeights::from_raw(out.trace.best_raw);
  return out;
}

FinetuneResult finetune_full(const TrainState& state, const NetConfig& net_cfg,
                             const Episode& episode, const FinetuneConfig& cfg, Metric metric) {
  cfg.validate();
  RngStream rng = RngStream(cfg.seed).child("finetune");
  auto gates = episode_gates(state.pool, cfg.stochastic_gates, rng.child("gates"));
  Tensor protos = encode_prototypes(state.pool.theta_pre, net_cfg, episode);
  MergeWeights w = route_hard(state.router, protos);
  ParamSet theta = merge(state.pool, w, gates);  // detached task-specific copy

  FinetuneResult out;
  Adam opt(theta.specs());
  for (int k = 0; k < cfg.steps; ++k) {
    Tape tape;
    TapedParams tp = lift(tape, theta, true);
    Var logits = protonet_support_logits_t(tape, tp, net_cfg, episode, metric);
    Var loss = ce_loss_t(tape, logits, episode.support_y);
    double lv = tape.val(loss).scalar_value();
    if (!std::isfinite(lv)) throw NumericError("finetune diverged at step " + std::to_string(k));
    out.support_loss_curve.push_back(lv);
    if (cfg.lr == 0.0) continue;  // still records the flat curve
    ParamSet grads = gather_grads(tape, loss, tp);
    theta = opt.step(theta, grads, cfg.lr);
  }
  {
    Tape tape;
    TapedParams tp = lift(tape, theta, false);
    Var logits = protonet_support_logits_t(tape, tp, net_cfg, episode, metric);
    Var loss = ce_loss_t(tape, logits, episode.support_y);
    out.support_loss_curve.push_back(tape.val(loss).scalar_value());
  }
  out.query_logits = protonet_logits(theta, net_cfg, episode, metric);
  out.theta = std::move(theta);
  return out;
}

std::map<std::string, double> lr_search(const TrainState& state, const NetConfig& net_cfg,
                                        std::span<const Episode> validation,
                                        std::span<const double> grid, const FinetuneConfig& base,
                                        Metric metric) {
  if (grid.empty()) throw ConfigError("lr_search: empty grid");
  std::vector<double> sorted_grid(grid.begin(), grid.end());
  std::sort(sorted_grid.begin(), sorted_grid.end());

  std::map<std::string, std::vector<const Episode*>> by_domain;
  for (const auto& ep : validation) {
    if (!ep.query_labeled()) throw ConfigError("lr_search: validation episodes must be labeled");
    by_domain[ep.domain].push_back(&ep);
  }

  std::map<std::string, double> best;
  std::vector<double> global_mean(sorted_grid.size(), 0.0);
  for (auto& [domain, eps] : by_domain) {
    double best_loss = 0.0;
    double best_lr = sorted_grid[0];
    for (size_t gi = 0; gi < sorted_grid.size(); ++gi) {
      FinetuneConfig cfg = base;
      cfg.lr = sorted_grid[gi];
      double mean_loss = 0.0;
      for (const Episode* ep : eps) {
        FinetuneResult r = finetune_full(state, net_cfg, *ep, cfg, metric);
        mean_loss += ce_value(r.query_logits, ep->query_y);
      }
      mean_loss /= static_cast<double>(eps.size());
      global_mean[gi] += mean_loss * static_cast<double>(eps.size());
      if (gi == 0 || mean_loss < best_loss) {  // strict: ties keep the smaller lr
        best_loss = mean_loss;
        best_lr = sorted_grid[gi];
      }
    }
    best[domain] = best_lr;
  }
  size_t gbest = 0;
  for (size_t gi = 1; gi < sorted_grid.size(); ++gi)
    if (global_mean[gi] < global_mean[gbest]) gbest = gi;
  best[""] = sorted_grid[gbest];
  return best;
}

}  // namespace smelt
