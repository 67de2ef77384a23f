#include "smelt/experts.hpp"

#include <algorithm>
#include <cmath>

namespace smelt {

void ExpertPool::validate() const {
  if (masks.empty()) throw ConfigError("pool: need at least one expert");
  if (masks.size() != lambdas.size()) throw ConfigError("pool: lambda count != mask count");
  if (tau < 0.0 || tau > 1.0) throw ConfigError("pool: tau must be in [0,1]");
  if (!theta_pre.same_specs(theta_delta)) throw ShapeError("pool: theta_delta specs differ from theta_pre");
  for (const auto& m : masks) {
    if (!m.log_alpha.same_specs(theta_pre)) throw ShapeError("pool: mask specs differ from theta_pre");
    m.validate();
  }
  for (double l : lambdas)
    if (l < 0.0) throw ConfigError("pool: negative lambda");
}

ExpertPool make_pool(ParamSet theta_pre, int experts, double tau, const HardConcreteConfig& hc,
                     double init_density, double init_std, RngStream rng) {
  if (experts < 1) throw ConfigError("make_pool: need at least one expert");
  ExpertPool pool;
  pool.theta_delta = zeros_like(theta_pre);  // training starts exactly at theta_pre
  pool.tau = tau;
  for (int m = 0; m < experts; ++m)
    pool.masks.push_back(init_mask(theta_pre.specs(), hc, init_density, init_std,
                                   rng.child("mask", static_cast<uint64_t>(m))));
  pool.lambdas.assign(static_cast<size_t>(experts), 0.0);
  pool.theta_pre = std::move(theta_pre);
  pool.validate();
  return pool;
}

MergeWeights MergeWeights::from_raw(std::vector<double> raw) {
  MergeWeights w;
  double s = 0.0;
  for (double r : raw) {
    if (r < 0.0) throw ConfigError("merge weights: negative raw activation");
    s += r;
  }
  w.alpha.assign(raw.size(), 0.0);
  if (s > 0.0)
    for (size_t i = 0; i < raw.size(); ++i) w.alpha[i] = raw[i] / s;
  w.raw = std::move(raw);
  return w;
}

void MergeWeights::validate() const {
  if (alpha.size() != raw.size()) throw ConfigError("merge weights: size mismatch");
  double s = 0.0;
  bool any_raw = false;
  for (size_t i = 0; i < alpha.size(); ++i) {
    if (alpha[i] < 0.0) throw ConfigError("merge weights: negative alpha");
    s += alpha[i];
    any_raw = any_raw || raw[i] > 0.0;
  }
  if (any_raw && std::fabs(s - 1.0) > 1e-9) throw ConfigError("merge weights: alphas do not sum to 1");
  if (!any_raw && s != 0.0) throw ConfigError("merge weights: all-zero raw requires all-zero alpha");
}

ParamSet merge(const ExpertPool& pool, const MergeWeights& weights,
               const std::vector<GateSample>& gates) {
  const int m_count = pool.expert_count();
  if (static_cast<int>(weights.alpha.size()) != m_count)
    throw ConfigError("merge: weight count != expert count");
  if (static_cast<int>(gates.size()) != m_count) throw ConfigError("merge: gate count != expert count");
  weights.validate();

  bool all_zero = std::all_of(weights.alpha.begin(), weights.alpha.end(),
                              [](double a) { return a == 0.0; });
  if (all_zero) return pool.theta_pre;

  std::vector<Tensor> out;
  out.reserve(pool.theta_pre.n_layers());
  for (size_t l = 0; l < pool.theta_pre.n_layers(); ++l) {
    Tensor t = pool.theta_pre.value(l);
    const auto& dd = pool.theta_delta.value(l).data();
    for (int m = 0; m < m_count; ++m) {
      double a = weights.alpha[static_cast<size_t>(m)];
      if (a == 0.0) continue;
      if (!gates[static_cast<size_t>(m)].z.same_specs(pool.theta_pre))
        throw ShapeError("merge: gate specs differ from pool specs");
      const auto& zd = gates[static_cast<size_t>(m)].z.value(l).data();
      for (size_t j = 0; j < t.data().size(); ++j) t.data()[j] += dd[j] * a * zd[j];
    }
    out.push_back(std::move(t));
  }
  return ParamSet(pool.theta_pre.specs(), std::move(out));
}

TapedParams merge_vars(Tape& tape, const ParamSet& theta_pre, const TapedParams& theta_delta,
                       const std::vector<Var>& alphas,
                       const std::vector<std::vector<Var>>& gates) {
  if (alphas.size() != gates.size()) throw ConfigError("merge_vars: alpha count != gate count");
  TapedParams out;
  out.specs = theta_pre.specs();
  out.vars.reserve(theta_pre.n_layers());
  for (size_t l = 0; l < theta_pre.n_layers(); ++l) {
    Var mix{};
    for (size_t m = 0; m < alphas.size(); ++m) {
      Var term = tape.mul(alphas[m], gates[m][l]);
      mix = mix.valid() ? tape.add(mix, term) : term;
    }
    Var modulated = tape.mul(theta_delta.vars[l], mix);
    out.vars.push_back(tape.add(tape.constant(theta_pre.value(l)), modulated));
  }
  return out;
}

double merged_sparsity_bound(int experts, double tau) {
  if (experts < 1) throw ConfigError("merged_sparsity_bound: experts must be >= 1");
  if (tau < 0.0 || tau > 1.0) throw ConfigError("merged_sparsity_bound: tau must be in [0,1]");
  return std::max(0.0, 1.0 - static_cast<double>(experts) * (1.0 - tau));
}

}  // namespace smelt
