#include "smelt/evalrun.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace smelt {

namespace {
std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::pair<double, double> mean_ci95(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mu = 0;
  for (double x : xs) mu += x;
  mu /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mu, 0.0};
  double ss = 0;
  for (double x : xs) ss += (x - mu) * (x - mu);
  double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return {mu, 1.96 * sd / std::sqrt(static_cast<double>(xs.size()))};
}
}  // namespace

EvalMode eval_mode_from_name(const std::string& s) {
  if (s == "direct") return EvalMode::kDirect;
  if (s == "select") return EvalMode::kSelect;
  if (s == "finetune") return EvalMode::kFinetune;
  throw ConfigError("unknown eval mode: " + s);
}

const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::kDirect: return "direct";
    case EvalMode::kSelect: return "select";
    case EvalMode::kFinetune: return "finetune";
  }
  return "?";
}

int resolve_thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SMLT_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

EvalOutput run_eval(const TrainState& state, const NetConfig& net_cfg, const SuiteSpec& suite,
                    const EvalOptions& opts) {
  if (opts.episodes < 1) throw ConfigError("eval: episodes must be >= 1");
  const int m_count = state.pool.expert_count();

  // fine-tune lr: fixed, or searched per domain on validation episodes
  std::map<std::string, double> lr_by_domain;
  if (opts.mode == EvalMode::kFinetune && opts.finetune.lr <= 0.0) {
    std::vector<Episode> val;
    int per_group = opts.lr_search_episodes;
    for (int i = 0; i < per_group; ++i) val.push_back(sample_episode(suite, Split::kVal, false, static_cast<uint64_t>(i)));
    if (!suite.ood_domains.empty())
      for (int i = 0; i < per_group; ++i) val.push_back(sample_episode(suite, Split::kVal, true, static_cast<uint64_t>(i)));
    FinetuneConfig base = opts.finetune;
    base.lr = opts.lr_grid.front();
    lr_by_domain = lr_search(state, net_cfg, val, opts.lr_grid, base, opts.metric);
  }

  struct Slot {
    bool ood;
    uint64_t index;
  };
  std::vector<Slot> slots;
  if (opts.include_id)
    for (int i = 0; i < opts.episodes; ++i) slots.push_back({false, static_cast<uint64_t>(i)});
  if (opts.include_ood && !suite.ood_domains.empty())
    for (int i = 0; i < opts.episodes; ++i) slots.push_back({true, static_cast<uint64_t>(i)});

  std::vector<EvalLogRow> rows(slots.size());
  std::vector<int> n_ways(slots.size()), k_shots(slots.size());

  auto eval_slot = [&](size_t si) {
    const Slot& slot = slots[si];
    Episode ep = sample_episode(suite, opts.split, slot.ood, slot.index);
    if (!ep.query_labeled()) throw ConfigError("eval: episodes must carry query labels for scoring");

    EvalLogRow row;
    row.task_id = slot.index + (slot.ood ? 1000000u : 0u);
    row.domain = ep.domain;
    row.is_ood = slot.ood;

    Tensor protos = encode_prototypes(state.pool.theta_pre, net_cfg, ep);
    Tensor logits = router_logits(state.router, protos);
    for (int64_t m = 0; m < logits.numel(); ++m) {
      double v = logits[m];
      row.raw.push_back(1.0 / (1.0 + std::exp(-v)));  // soft activation, logged
    }

    uint64_t ep_seed = RngStream(opts.seed).child("eval", slot.ood ? 1 : 0, slot.index).next_u64();
    RngStream gate_rng = RngStream(ep_seed).child("gates");
    auto gates = episode_gates(state.pool, opts.stochastic_gates, gate_rng);

    switch (opts.mode) {
      case EvalMode::kDirect: {
        DirectInference inf = direct_inference(state, net_cfg, ep, opts.metric, gates);
        row.alpha = inf.weights.alpha;
        row.acc = accuracy(inf.query_logits, ep.query_y);
        break;
      }
      case EvalMode::kSelect: {
        SelectionSearchConfig cfg = opts.selection;
        cfg.seed = ep_seed;
        cfg.stochastic_gates = opts.stochastic_gates;
        SelectionResult sel = select_experts(state, net_cfg, ep, cfg, opts.metric);
        ParamSet theta = merge(state.pool, sel.weights, gates);
        Tensor qlogits = protonet_logits(theta, net_cfg, ep, opts.metric);
        row.alpha = sel.weights.alpha;
        row.acc = accuracy(qlogits, ep.query_y);
        break;
      }
      case EvalMode::kFinetune: {
        FinetuneConfig cfg = opts.finetune;
        cfg.seed = ep_seed;
        cfg.stochastic_gates = opts.stochastic_gates;
        if (cfg.lr <= 0.0) {
          auto it = lr_by_domain.find(ep.domain);
          cfg.lr = it != lr_by_domain.end() ? it->second : lr_by_domain.at("");
        }
        FinetuneResult ft = finetune_full(state, net_cfg, ep, cfg, opts.metric);
        MergeWeights w = route_hard(state.router, protos);
        row.alpha = w.alpha;
        row.acc = accuracy(ft.query_logits, ep.query_y);
        break;
      }
    }
    rows[si] = std::move(row);
    n_ways[si] = ep.n_way;
    k_shots[si] = static_cast<int>(ep.support_y.size()) / ep.n_way;
  };

  int n_threads = resolve_thread_count(opts.threads);
  if (n_threads <= 1 || slots.size() < 2) {
    for (size_t si = 0; si < slots.size(); ++si) eval_slot(si);
  } else {
    std::vector<std::thread> workers;
    std::atomic<size_t> next{0};
    std::atomic<bool> failed{false};
    std::string error_msg;
    std::mutex err_mu;
    for (int t = 0; t < n_threads; ++t)
      workers.emplace_back([&] {
        for (;;) {
          size_t si = next.fetch_add(1);
          if (si >= slots.size() || failed.load()) return;
          try {
            eval_slot(si);
          } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lk(err_mu);
            failed.store(true);
            if (error_msg.empty()) error_msg = e.what();
          }
        }
      });
    for (auto& w : workers) w.join();
    if (failed.load()) throw NumericError("eval worker failed: " + error_msg);
  }

  EvalOutput out;
  std::ostringstream csv;
  csv << "task_id,domain,is_ood,n_way,k_shot,acc,ci95";
  for (int m = 1; m <= m_count; ++m) csv << ",raw_" << m;
  for (int m = 1; m <= m_count; ++m) csv << ",alpha_" << m;
  csv << "\n";

  std::vector<double> id_accs, ood_accs;
  for (size_t si = 0; si < rows.size(); ++si) {
    const auto& row = rows[si];
    csv << row.task_id << "," << row.domain << "," << (row.is_ood ? 1 : 0) << "," << n_ways[si]
        << "," << k_shots[si] << "," << fmt_g17(row.acc) << ",";
    for (double v : row.raw) csv << "," << fmt_g17(v);
    for (double v : row.alpha) csv << "," << fmt_g17(v);
    csv << "\n";
    (row.is_ood ? ood_accs : id_accs).push_back(row.acc);
  }
  auto [idm, idc] = mean_ci95(id_accs);
  auto [oodm, oodc] = mean_ci95(ood_accs);
  out.summary = {idm, idc, oodm, oodc, static_cast<int>(id_accs.size()), static_cast<int>(ood_accs.size())};
  auto blank_tail = [&] {
    for (int m = 0; m < 2 * m_count; ++m) csv << ",";
    csv << "\n";
  };
  if (!id_accs.empty()) {
    csv << "summary_id,ID,0,,," << fmt_g17(idm) << "," << fmt_g17(idc);
    blank_tail();
  }
  if (!ood_accs.empty()) {
    csv << "summary_ood,OOD,1,,," << fmt_g17(oodm) << "," << fmt_g17(oodc);
    blank_tail();
  }
  out.rows = std::move(rows);
  out.csv = csv.str();
  return out;
}

}  // namespace smelt
