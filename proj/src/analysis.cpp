#include "smelt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace smelt {

namespace {
std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

SparsityReport sparsity_report(const ExpertPool& pool) {
  pool.validate();
  const auto& layers = pool.theta_pre.layers();
  const int m_count = pool.expert_count();
  SparsityReport rep;
  rep.expert_total_density.assign(static_cast<size_t>(m_count), 0.0);
  rep.layer_density_std.assign(layers.size(), 0.0);

  std::vector<ParamSet> probs;
  probs.reserve(static_cast<size_t>(m_count));
  for (const auto& mask : pool.masks) probs.push_back(prob_nonzero(mask));

  std::vector<double> merged_keep(static_cast<size_t>(pool.theta_pre.total_dim()), 1.0);
  size_t flat_off = 0;
  for (size_t l = 0; l < layers.size(); ++l) {
    double layer_mean_sum = 0.0, layer_mean_sq = 0.0;
    for (int m = 0; m < m_count; ++m) {
      const auto& pd = probs[static_cast<size_t>(m)].value(l).data();
      double s = 0.0;
      for (double v : pd) s += v;
      double density = s / static_cast<double>(pd.size());
      rep.rows.push_back({layers[l].name, layers[l].kind, layers[l].depth_index, m + 1, density,
                          1.0 - density});
      rep.expert_total_density[static_cast<size_t>(m)] += s;
      layer_mean_sum += density;
      layer_mean_sq += density * density;
      for (size_t j = 0; j < pd.size(); ++j) merged_keep[flat_off + j] *= 1.0 - pd[j];
    }
    double mu = layer_mean_sum / m_count;
    rep.layer_density_std[l] = std::sqrt(std::max(0.0, layer_mean_sq / m_count - mu * mu));
    flat_off += probs[0].value(l).data().size();
  }
  double total = static_cast<double>(pool.theta_pre.total_dim());
  for (auto& d : rep.expert_total_density) d /= total;
  double merged = 0.0;
  for (double k : merged_keep) merged += 1.0 - k;
  rep.merged_expected_density = merged / total;
  rep.merged_expected_sparsity = 1.0 - rep.merged_expected_density;
  return rep;
}

std::string sparsity_report_csv(const SparsityReport& r, const ExpertPool& pool) {
  std::ostringstream os;
  os << "layer,kind,depth_index,expert,density,sparsity,layer_density_std\n";
  const auto& layers = pool.theta_pre.layers();
  for (const auto& row : r.rows) {
    size_t li = 0;
    for (size_t l = 0; l < layers.size(); ++l)
      if (layers[l].name == row.layer) li = l;
    os << row.layer << "," << layer_kind_name(row.kind) << "," << row.depth_index << ","
       << row.expert << "," << fmt_g17(row.density) << "," << fmt_g17(row.sparsity) << ","
       << fmt_g17(r.layer_density_std[li]) << "\n";
  }
  for (size_t m = 0; m < r.expert_total_density.size(); ++m)
    os << "TOTAL,expert," << 0 << "," << m + 1 << "," << fmt_g17(r.expert_total_density[m]) << ","
       << fmt_g17(1.0 - r.expert_total_density[m]) << ",\n";
  os << "TOTAL,merged,0,0," << fmt_g17(r.merged_expected_density) << ","
     << fmt_g17(r.merged_expected_sparsity) << ",\n";
  return os.str();
}

Tensor mask_overlap_matrix(const ExpertPool& pool, double threshold) {
  const int m_count = pool.expert_count();
  std::vector<ParamSet> bin;
  bin.reserve(static_cast<size_t>(m_count));
  for (const auto& mask : pool.masks) bin.push_back(binarize(deterministic_gate(mask).z, threshold));
  Tensor out = Tensor::zeros({m_count, m_count});
  for (int i = 0; i < m_count; ++i)
    for (int j = 0; j < m_count; ++j)
      out.at(i, j) = overlap_ratio(bin[static_cast<size_t>(i)], bin[static_cast<size_t>(j)]);
  return out;
}

std::string overlap_matrix_csv(const Tensor& m) {
  std::ostringstream os;
  os << "expert";
  for (int j = 0; j < m.cols(); ++j) os << ",overlap_" << j + 1;
  os << "\n";
  for (int i = 0; i < m.rows(); ++i) {
    os << i + 1;
    for (int j = 0; j < m.cols(); ++j) os << "," << fmt_g17(m.at(i, j));
    os << "\n";
  }
  return os.str();
}

namespace {

// Meta-gradient of the episode loss w.r.t. theta_delta; routing and gate
// noise keyed by noise_id so identical ids reproduce identical gradients.
ParamSet episode_meta_gradient(const TrainState& state, const NetConfig& net_cfg,
                               const TrainConfig& cfg, const AlignmentEpisode& ae) {
  Tape tape;
  TapedParams delta_vars = lift(tape, state.pool.theta_delta, true);
  std::vector<TapedParams> mask_vars;
  for (const auto& m : state.pool.masks) mask_vars.push_back(lift(tape, m.log_alpha, false));

  RngStream rng = RngStream(cfg.seed).child("align", ae.noise_id);
  Tensor protos = encode_prototypes(state.pool.theta_pre, net_cfg, ae.episode);
  TapedParams router_vars = lift(tape, state.router.params, false);
  RngStream gumbel_rng = rng.child("gumbel");
  RouteResult route = route_train(tape, router_vars, state.router.cfg, protos, gumbel_rng);

  std::vector<std::vector<Var>> gates;
  for (size_t m = 0; m < mask_vars.size(); ++m) {
    RngStream gate_rng = rng.child("gate", m);
    std::vector<Tensor> noise_vals;
    for (size_t l = 0; l < state.pool.theta_pre.n_layers(); ++l) {
      Tensor t = Tensor::zeros(state.pool.theta_pre.value(l).shape());
      for (auto& v : t.data()) v = gate_rng.uniform_open(1e-6);
      noise_vals.push_back(std::move(t));
    }
    ParamSet noise(state.pool.theta_pre.specs(), std::move(noise_vals));
    gates.push_back(gate_vars(tape, mask_vars[m], noise, cfg.hc));
  }

  TapedParams theta_i = merge_vars(tape, state.pool.theta_pre, delta_vars, route.alpha_vars, gates);
  Var logits = protonet_logits_t(tape, theta_i, net_cfg, ae.episode, cfg.metric);
  Var loss;
  if (cfg.beta_w == 1.0) {
    loss = ce_loss_t(tape, logits, ae.episode.query_y);
  } else {
    ParamSet teacher = make_teacher(gather_values(tape, theta_i), ae.episode, cfg.teacher_steps,
                                    cfg.lr_teacher, net_cfg, cfg.metric);
    Tensor teacher_logits = protonet_logits(teacher, net_cfg, ae.episode, cfg.metric);
    loss = episode_meta_loss_t(tape, logits, teacher_logits, ae.episode.query_y, cfg.beta_w,
                               cfg.kd_temp);
  }
  return gather_grads(tape, loss, delta_vars);
}

double masked_cosine(const std::vector<double>& a, const std::vector<double>& b,
                     const std::vector<double>* mask, bool* zero_flag) {
  double dotv = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double mi = mask ? (*mask)[i] : 1.0;
    double ai = a[i] * mi, bi = b[i] * mi;
    dotv += ai * bi;
    na += ai * ai;
    nb += bi * bi;
  }
  if (na == 0.0 || nb == 0.0) {
    if (zero_flag) *zero_flag = true;
    return 0.0;
  }
  return dotv / std::sqrt(na * nb);
}

}  // namespace

AlignmentReport gradient_alignment(const TrainState& state, const NetConfig& net_cfg,
                                   const TrainConfig& cfg,
                                   std::span<const std::pair<AlignmentEpisode, AlignmentEpisode>> pairs) {
  if (pairs.empty()) throw ConfigError("gradient_alignment: need at least one pair");
  const int m_count = state.pool.expert_count();
  AlignmentReport rep;
  rep.expert_alignment_mean.assign(static_cast<size_t>(m_count), 0.0);

  std::vector<std::vector<double>> masks_flat;
  for (const auto& mask : state.pool.masks)
    masks_flat.push_back(binarize(deterministic_gate(mask).z, 0.5).flatten_view());

  for (const auto& [ea, eb] : pairs) {
    std::vector<double> ga = episode_meta_gradient(state, net_cfg, cfg, ea).flatten_view();
    std::vector<double> gb = episode_meta_gradient(state, net_cfg, cfg, eb).flatten_view();
    AlignmentPairRow row;
    row.delta_alignment = masked_cosine(ga, gb, nullptr, &row.zero_gradient);
    for (int m = 0; m < m_count; ++m)
      row.expert_alignment.push_back(
          masked_cosine(ga, gb, &masks_flat[static_cast<size_t>(m)], &row.zero_gradient));
    rep.delta_alignment_mean += row.delta_alignment;
    for (int m = 0; m < m_count; ++m)
      rep.expert_alignment_mean[static_cast<size_t>(m)] += row.expert_alignment[static_cast<size_t>(m)];
    rep.pairs.push_back(std::move(row));
  }
  double n = static_cast<double>(pairs.size());
  rep.delta_alignment_mean /= n;
  for (auto& v : rep.expert_alignment_mean) v /= n;
  return rep;
}

std::string alignment_csv(const AlignmentReport& r) {
  std::ostringstream os;
  int m_count = r.expert_alignment_mean.empty() ? 0 : static_cast<int>(r.expert_alignment_mean.size());
  os << "pair,delta_alignment";
  for (int m = 1; m <= m_count; ++m) os << ",expert_" << m;
  os << ",zero_gradient\n";
  for (size_t i = 0; i < r.pairs.size(); ++i) {
    os << i << "," << fmt_g17(r.pairs[i].delta_alignment);
    for (double v : r.pairs[i].expert_alignment) os << "," << fmt_g17(v);
    os << "," << (r.pairs[i].zero_gradient ? 1 : 0) << "\n";
  }
  os << "mean," << fmt_g17(r.delta_alignment_mean);
  for (double v : r.expert_alignment_mean) os << "," << fmt_g17(v);
  os << ",\n";
  return os.str();
}

SelectionStats selection_stats(std::span<const EvalLogRow> log) {
  if (log.empty()) throw ConfigError("selection_stats: empty log");
  const size_t m_count = log[0].alpha.size();
  std::map<std::string, std::pair<std::vector<double>, int>> acc;
  double disc = 0.0;
  int64_t disc_n = 0;
  for (const auto& row : log) {
    if (row.alpha.size() != m_count || row.raw.size() != m_count)
      throw ConfigError("selection_stats: inconsistent expert counts in log");
    auto& slot = acc[row.domain];
    if (slot.first.empty()) slot.first.assign(m_count, 0.0);
    for (size_t m = 0; m < m_count; ++m) slot.first[m] += row.alpha[m];
    slot.second += 1;
    for (double r : row.raw) {
      disc += std::min(r, 1.0 - r);
      ++disc_n;
    }
  }
  SelectionStats out;
  out.mean_alpha = Tensor::zeros({static_cast<int>(acc.size()), static_cast<int>(m_count)});
  int i = 0;
  for (auto& [domain, slot] : acc) {
    out.domains.push_back(domain);
    for (size_t m = 0; m < m_count; ++m)
      out.mean_alpha.at(i, static_cast<int>(m)) = slot.first[m] / slot.second;
    ++i;
  }
  out.discreteness = disc / static_cast<double>(disc_n);
  out.similarity = selection_similarity(out.mean_alpha);
  return out;
}

std::string selection_stats_csv(const SelectionStats& s) {
  std::ostringstream os;
  int m_count = s.mean_alpha.cols();
  os << "domain";
  for (int m = 1; m <= m_count; ++m) os << ",mean_alpha_" << m;
  for (size_t j = 0; j < s.domains.size(); ++j) os << ",sim_" << s.domains[j];
  os << ",discreteness\n";
  for (size_t i = 0; i < s.domains.size(); ++i) {
    os << s.domains[i];
    for (int m = 0; m < m_count; ++m) os << "," << fmt_g17(s.mean_alpha.at(static_cast<int>(i), m));
    for (size_t j = 0; j < s.domains.size(); ++j)
      os << "," << fmt_g17(s.similarity.at(static_cast<int>(i), static_cast<int>(j)));
    os << "," << (i == 0 ? fmt_g17(s.discreteness) : std::string());
    os << "\n";
  }
  return os.str();
}

std::vector<EvalLogRow> parse_eval_log(const std::string& csv_text) {
  std::vector<EvalLogRow> rows;
  std::istringstream is(csv_text);
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("parse_eval_log: empty file");
  // header: task_id,domain,is_ood,n_way,k_shot,acc,ci95,raw_1..M,alpha_1..M
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
  }
  int m_count = 0;
  for (const auto& h : header)
    if (h.rfind("raw_", 0) == 0) ++m_count;
  if (m_count == 0) throw ConfigError("parse_eval_log: no raw_* columns in header");

  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < header.size() - 1) continue;
    if (cells[0].rfind("summary", 0) == 0) continue;
    EvalLogRow row;
    row.task_id = std::stoull(cells[0]);
    row.domain = cells[1];
    row.is_ood = cells[2] == "1";
    row.acc = std::stod(cells[5]);
    for (int m = 0; m < m_count; ++m) row.raw.push_back(std::stod(cells[7 + static_cast<size_t>(m)]));
    for (int m = 0; m < m_count; ++m)
      row.alpha.push_back(std::stod(cells[7 + static_cast<size_t>(m_count + m)]));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace smelt
