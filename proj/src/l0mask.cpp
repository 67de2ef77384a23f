#include "smelt/l0mask.hpp"

#include <cmath>

namespace smelt {

namespace {
constexpr double kNoiseEps = 1e-6;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double hard_stretch(double s, double gamma, double zeta_s) {
  double sbar = s * (zeta_s - gamma) + gamma;
  return std::min(1.0, std::max(0.0, sbar));
}
}  // namespace

void HardConcreteConfig::validate() const {
  if (!(gamma < 0.0 && zeta_s > 1.0)) throw ConfigError("hard concrete: need gamma < 0 < 1 < zeta_s");
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("hard concrete: beta must be in (0,1]");
}

double HardConcreteConfig::cdf_shift() const { return std::log(-gamma / zeta_s); }

void HardConcreteMask::validate() const {
  cfg.validate();
  for (const auto& t : log_alpha.values())
    if (!t.all_finite()) throw NumericError("mask log_alpha has non-finite entries");
}

HardConcreteMask init_mask(SpecsPtr specs, const HardConcreteConfig& cfg, double init_density,
                           double init_std, RngStream rng) {
  cfg.validate();
  if (!(init_density > 0.0 && init_density < 1.0))
    throw ConfigError("init_density must be in (0,1)");
  // sigmoid(m0 - beta*shift) = init_density
  double m0 = std::log(init_density / (1.0 - init_density)) + cfg.beta * cfg.cdf_shift();
  ParamSet la = ParamSet::zeros(specs);
  std::vector<Tensor> vals;
  for (size_t i = 0; i < la.n_layers(); ++i) {
    Tensor t = la.value(i);
    for (auto& v : t.data()) v = m0 + init_std * rng.normal();
    vals.push_back(std::move(t));
  }
  return HardConcreteMask{ParamSet(specs, std::move(vals)), cfg};
}

GateSample sample_gate(const HardConcreteMask& mask, RngStream& rng) {
  const auto& la = mask.log_alpha;
  std::vector<Tensor> zs, us;
  zs.reserve(la.n_layers());
  us.reserve(la.n_layers());
  for (size_t i = 0; i < la.n_layers(); ++i) {
    Tensor z = la.value(i);
    Tensor u = Tensor::zeros(z.shape());
    for (size_t j = 0; j < z.data().size(); ++j) {
      double uv = rng.uniform_open(kNoiseEps);
      u.data()[j] = uv;
      double s = sigmoid((std::log(uv) - std::log(1.0 - uv) + z.data()[j]) / mask.cfg.beta);
      z.data()[j] = hard_stretch(s, mask.cfg.gamma, mask.cfg.zeta_s);
    }
    zs.push_back(std::move(z));
    us.push_back(std::move(u));
  }
  return GateSample{ParamSet(la.specs(), std::move(zs)), ParamSet(la.specs(), std::move(us))};
}

GateSample deterministic_gate(const HardConcreteMask& mask) {
  const auto& la = mask.log_alpha;
  std::vector<Tensor> zs;
  zs.reserve(la.n_layers());
  for (size_t i = 0; i < la.n_layers(); ++i) {
    Tensor z = la.value(i);
    for (auto& v : z.data()) v = hard_stretch(sigmoid(v), mask.cfg.gamma, mask.cfg.zeta_s);
    zs.push_back(std::move(z));
  }
  return GateSample{ParamSet(la.specs(), std::move(zs)), full_like(la, 0.5)};
}

ParamSet prob_nonzero(const HardConcreteMask& mask) {
  const auto& la = mask.log_alpha;
  double shift = mask.cfg.beta * mask.cfg.cdf_shift();
  std::vector<Tensor> ps;
  ps.reserve(la.n_layers());
  for (size_t i = 0; i < la.n_layers(); ++i) {
    Tensor p = la.value(i);
    for (auto& v : p.data()) v = sigmoid(v - shift);
    ps.push_back(std::move(p));
  }
  return ParamSet(la.specs(), std::move(ps));
}

double expected_density(const HardConcreteMask& mask) {
  ParamSet p = prob_nonzero(mask);
  double s = 0.0;
  for (const auto& t : p.values())
    for (double v : t.data()) s += v;
  return s / static_cast<double>(mask.dim());
}

double sparsity(const HardConcreteMask& mask) { return 1.0 - expected_density(mask); }

std::vector<Var> gate_vars(Tape& tape, const TapedParams& log_alpha_vars, const ParamSet& noise,
                           const HardConcreteConfig& cfg) {
  std::vector<Var> out;
  out.reserve(log_alpha_vars.vars.size());
  for (size_t i = 0; i < log_alpha_vars.vars.size(); ++i) {
    Tensor logit_u = noise.value(i);
    for (auto& v : logit_u.data()) v = std::log(v) - std::log(1.0 - v);
    Var s = tape.sigmoid(
        tape.scale(tape.add(log_alpha_vars.vars[i], tape.constant(std::move(logit_u))), 1.0 / cfg.beta));
    Var sbar = tape.add(tape.scale(s, cfg.zeta_s - cfg.gamma), tape.constant_scalar(cfg.gamma));
    out.push_back(tape.clamp(sbar, 0.0, 1.0));
  }
  return out;
}

Var expected_density_var(Tape& tape, const TapedParams& log_alpha_vars,
                         const HardConcreteConfig& cfg) {
  double shift = cfg.beta * cfg.cdf_shift();
  Var total{};
  int64_t dim = 0;
  for (size_t i = 0; i < log_alpha_vars.vars.size(); ++i) {
    Var p = tape.sigmoid(tape.sub(log_alpha_vars.vars[i], tape.constant_scalar(shift)));
    Var s = tape.sum(p);
    total = total.valid() ? tape.add(total, s) : s;
    dim += tape.val(log_alpha_vars.vars[i]).numel();
  }
  return tape.scale(total, 1.0 / static_cast<double>(dim));
}

ParamSet binarize(const ParamSet& z, double threshold) {
  std::vector<Tensor> vals;
  vals.reserve(z.n_layers());
  for (size_t i = 0; i < z.n_layers(); ++i) {
    Tensor t = z.value(i);
    for (auto& v : t.data()) v = v > threshold ? 1.0 : 0.0;
    vals.push_back(std::move(t));
  }
  return ParamSet(z.specs(), std::move(vals));
}

ParamSet mask_union(const ParamSet& a, const ParamSet& b) {
  if (!a.same_specs(b)) throw ShapeError("mask_union: spec mismatch");
  std::vector<Tensor> vals;
  vals.reserve(a.n_layers());
  for (size_t i = 0; i < a.n_layers(); ++i) {
    Tensor t = a.value(i);
    const auto& bd = b.value(i).data();
    for (size_t j = 0; j < t.data().size(); ++j) t.data()[j] = std::max(t.data()[j], bd[j]);
    vals.push_back(std::move(t));
  }
  return ParamSet(a.specs(), std::move(vals));
}

double overlap_ratio(const ParamSet& a, const ParamSet& b) {
  if (!a.same_specs(b)) throw ShapeError("overlap_ratio: spec mismatch");
  int64_t joint = 0, either = 0;
  for (size_t i = 0; i < a.n_layers(); ++i) {
    const auto& ad = a.value(i).data();
    const auto& bd = b.value(i).data();
    for (size_t j = 0; j < ad.size(); ++j) {
      bool an = ad[j] != 0.0, bn = bd[j] != 0.0;
      joint += (an && bn) ? 1 : 0;
      either += (an || bn) ? 1 : 0;
    }
  }
  return either == 0 ? 0.0 : static_cast<double>(joint) / static_cast<double>(either);
}

double binary_density(const ParamSet& a) {
  int64_t nz = 0;
  for (const auto& t : a.values())
    for (double v : t.data())
      if (v != 0.0) ++nz;
  return static_cast<double>(nz) / static_cast<double>(a.total_dim());
}

}  // namespace smelt
