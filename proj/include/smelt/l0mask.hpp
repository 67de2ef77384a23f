#pragma once

#include "smelt/params.hpp"
#include "smelt/rng.hpp"

namespace smelt {

// Stretched hard-concrete gate distribution: a binary-concrete sample is
// stretched to (gamma, zeta_s) and hard-rectified into [0,1], so gates are
// exactly 0 or 1 with positive probability while staying reparameterizable.
struct HardConcreteConfig {
  double beta = 2.0 / 3.0;
  double gamma = -0.1;
  double zeta_s = 1.1;  // suffix avoids clashing with router parameter naming

  void validate() const;
  // log of -gamma/zeta_s, the logit of the rectification point
  double cdf_shift() const;
};

struct HardConcreteMask {
  ParamSet log_alpha;  // one location parameter per masked parameter
  HardConcreteConfig cfg;

  void validate() const;
  int64_t dim() const { return log_alpha.total_dim(); }
};

struct GateSample {
  ParamSet z;  // values in [0,1]; exactly 0/1 where the stretch saturates
  ParamSet u;  // uniform noise that produced z, retained for reproducibility
};

// log_alpha ~ Normal(m0, init_std) with m0 set so the initial expected
// density equals init_density.
HardConcreteMask init_mask(SpecsPtr specs, const HardConcreteConfig& cfg, double init_density,
                           double init_std, RngStream rng);

GateSample sample_gate(const HardConcreteMask& mask, RngStream& rng);
GateSample deterministic_gate(const HardConcreteMask& mask);

// Per-entry P(z != 0) = sigmoid(log_alpha - beta * log(-gamma/zeta_s)).
ParamSet prob_nonzero(const HardConcreteMask& mask);
double expected_density(const HardConcreteMask& mask);
double sparsity(const HardConcreteMask& mask);

// Taped counterparts used inside training objectives. `log_alpha_vars` is the
// mask's log_alpha lifted onto the tape.
std::vector<Var> gate_vars(Tape& tape, const TapedParams& log_alpha_vars, const ParamSet& noise,
                           const HardConcreteConfig& cfg);
Var expected_density_var(Tape& tape, const TapedParams& log_alpha_vars,
                         const HardConcreteConfig& cfg);

// Binary mask utilities (the motivating union arithmetic and diagnostics).
ParamSet binarize(const ParamSet& z, double threshold);
ParamSet mask_union(const ParamSet& a, const ParamSet& b);
double overlap_ratio(const ParamSet& a, const ParamSet& b);  // 0 when the union is empty
double binary_density(const ParamSet& a);

}  // namespace smelt
