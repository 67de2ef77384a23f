#include <doctest.h>

#include <cmath>

#include "smelt/l0mask.hpp"
#include "smelt/rng.hpp"

using namespace smelt;

namespace {

SpecsPtr vec_specs(int n) { return make_specs({{"m", LayerKind::kLinearWeight, {n}, 0}}); }

HardConcreteMask const_mask(double log_alpha_value, int n = 1) {
  ParamSet la(vec_specs(n), {Tensor::full({n}, log_alpha_value)});
  return HardConcreteMask{la, HardConcreteConfig{}};
}

// Monte-Carlo estimate of P(z > 0) for a scalar mask.
double mc_prob_nonzero(double log_alpha, const HardConcreteConfig& cfg, int n, uint64_t seed) {
  RngStream rng(seed);
  int nz = 0;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform_open(1e-6);
    double s = 1.0 / (1.0 + std::exp(-(std::log(u) - std::log(1 - u) + log_alpha) / cfg.beta));
    double sbar = s * (cfg.zeta_s - cfg.gamma) + cfg.gamma;
    if (std::min(1.0, std::max(0.0, sbar)) > 0.0) ++nz;
  }
  return static_cast<double>(nz) / n;
}

}  // namespace

TEST_CASE("saturated log_alpha gives exact all-zero / all-one gates") {
  RngStream rng(1);
  auto lo = const_mask(-40.0, 8);
  auto hi = const_mask(+40.0, 8);
  GateSample glo = sample_gate(lo, rng);
  GateSample ghi = sample_gate(hi, rng);
  for (double v : glo.z.value(0).data()) CHECK(v == 0.0);
  for (double v : ghi.z.value(0).data()) CHECK(v == 1.0);
  CHECK(deterministic_gate(lo).z.value(0)[0] == 0.0);
  CHECK(deterministic_gate(hi).z.value(0)[0] == 1.0);
}

TEST_CASE("gate at log_alpha=0 with u=0.5 is exactly 0.5") {
  auto mask = const_mask(0.0);
  Tape t;
  TapedParams la = lift(t, mask.log_alpha, true);
  ParamSet noise = full_like(mask.log_alpha, 0.5);
  auto zs = gate_vars(t, la, noise, mask.cfg);
  CHECK(t.val(zs[0])[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(deterministic_gate(mask).z.value(0)[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("prob_nonzero analytic value at origin") {
  auto mask = const_mask(0.0);
  double p = prob_nonzero(mask).value(0)[0];
  CHECK(p == doctest::Approx(0.8318).epsilon(2e-4));
  // Monte-Carlo agreement within 0.002 at one million samples
  double mc = mc_prob_nonzero(0.0, mask.cfg, 1000000, 99);
  CHECK(std::fabs(mc - p) < 0.002);
  CHECK(expected_density(mask) == doctest::Approx(p).epsilon(1e-12));
  CHECK(sparsity(mask) == doctest::Approx(1.0 - p).epsilon(1e-12));
}

TEST_CASE("prob_nonzero saturates to 0 and 1") {
  CHECK(prob_nonzero(const_mask(-200.0)).value(0)[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(prob_nonzero(const_mask(+200.0)).value(0)[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("half saturated entries give density one half") {
  ParamSet la(vec_specs(4), {Tensor::row({200.0, 200.0, -200.0, -200.0})});
  HardConcreteMask mask{la, HardConcreteConfig{}};
  CHECK(expected_density(mask) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("monte carlo matches analytic CDF within 3 binomial sigma at 20 settings") {
  RngStream rng(7);
  const int n = 1000000;
  for (int i = 0; i < 20; ++i) {
    double la = rng.uniform(-3.0, 3.0);
    auto mask = const_mask(la);
    double p = prob_nonzero(mask).value(0)[0];
    double mc = mc_prob_nonzero(la, mask.cfg, n, 1000 + i);
    double sigma = std::sqrt(p * (1.0 - p) / n);
    INFO("log_alpha " << la << " p " << p << " mc " << mc);
    CHECK(std::fabs(mc - p) <= 3.0 * sigma + 1e-12);
  }
}

TEST_CASE("pathwise gate gradient matches FD of E[z] under common random numbers") {
  const int n = 100000;
  const double la0 = 0.4, h = 1e-4;
  HardConcreteConfig cfg;
  RngStream rng(17);
  std::vector<double> us(n);
  for (auto& u : us) u = rng.uniform_open(1e-6);

  auto mean_z = [&](double la) {
    double s = 0;
    for (double u : us) {
      double sg = 1.0 / (1.0 + std::exp(-(std::log(u) - std::log(1 - u) + la) / cfg.beta));
      double sbar = sg * (cfg.zeta_s - cfg.gamma) + cfg.gamma;
      s += std::min(1.0, std::max(0.0, sbar));
    }
    return s / n;
  };

  // analytic pathwise derivative through the tape, averaged over the noise
  auto specs = vec_specs(1);
  double gsum = 0;
  for (double u : us) {
    Tape t;
    TapedParams lav = lift(t, ParamSet(specs, {Tensor::scalar(la0)}), true);
    ParamSet noise(specs, {Tensor::scalar(u)});
    auto zs = gate_vars(t, lav, noise, cfg);
    std::vector<Var> wrt{lav.vars[0]};
    gsum += t.grad(zs[0], wrt)[0][0];
  }
  double analytic = gsum / n;
  double fd = (mean_z(la0 + h) - mean_z(la0 - h)) / (2 * h);
  INFO("analytic " << analytic << " fd " << fd);
  CHECK(std::fabs(analytic - fd) / std::max({std::fabs(fd), std::fabs(analytic), 1e-6}) < 1e-3);
}

TEST_CASE("expected density is monotone in every log_alpha entry") {
  RngStream rng(23);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor la = Tensor::zeros({6});
    for (auto& v : la.data()) v = rng.uniform(-2.0, 2.0);
    HardConcreteMask mask{ParamSet(vec_specs(6), {la}), HardConcreteConfig{}};
    double d0 = expected_density(mask);
    int idx = static_cast<int>(rng.next_below(6));
    Tensor la2 = mask.log_alpha.value(0);
    la2[idx] += rng.uniform(0.0, 1.0);
    HardConcreteMask bumped{ParamSet(vec_specs(6), {la2}), HardConcreteConfig{}};
    CHECK(expected_density(bumped) >= d0);
  }
}

TEST_CASE("init_mask hits the requested starting density") {
  auto specs = vec_specs(512);
  HardConcreteMask m = init_mask(specs, HardConcreteConfig{}, 0.5, 0.01, RngStream(3));
  CHECK(expected_density(m) == doctest::Approx(0.5).epsilon(1e-2));
  HardConcreteMask m2 = init_mask(specs, HardConcreteConfig{}, 0.2, 0.01, RngStream(4));
  CHECK(expected_density(m2) == doctest::Approx(0.2).epsilon(1e-2));
}

TEST_CASE("overlap ratio basics") {
  auto specs = vec_specs(4);
  ParamSet z1(specs, {Tensor::row({1, 1, 0, 0})});
  ParamSet z2(specs, {Tensor::row({0, 1, 1, 0})});
  CHECK(overlap_ratio(z1, z2) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(overlap_ratio(z1, z1) == 1.0);
  ParamSet zero = ParamSet::zeros(specs);
  CHECK(overlap_ratio(zero, zero) == 0.0);
  ParamSet u = mask_union(z1, z2);
  CHECK(u.value(0).data() == std::vector<double>{1, 1, 1, 0});
}

TEST_CASE("overlap ratio is symmetric, bounded, and 1 iff supports coincide") {
  RngStream rng(29);
  auto specs = vec_specs(32);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor a = Tensor::zeros({32}), b = Tensor::zeros({32});
    for (auto& v : a.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    for (auto& v : b.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    ParamSet pa(specs, {a}), pb(specs, {b});
    double r1 = overlap_ratio(pa, pb), r2 = overlap_ratio(pb, pa);
    CHECK(r1 == r2);
    CHECK(r1 >= 0.0);
    CHECK(r1 <= 1.0);
    bool same_support = pa.value(0).data() == pb.value(0).data();
    bool nonempty = binary_density(pa) > 0.0;
    CHECK((r1 == 1.0) == (same_support && nonempty));
  }
}

TEST_CASE("binarize thresholds strictly") {
  auto specs = vec_specs(3);
  ParamSet z(specs, {Tensor::row({0.2, 0.5, 0.9})});
  ParamSet b = binarize(z, 0.5);
  CHECK(b.value(0).data() == std::vector<double>{0, 0, 1});
}

TEST_CASE("invalid config rejected") {
  HardConcreteConfig bad;
  bad.gamma = 0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  HardConcreteConfig bad2;
  bad2.beta = 1.5;
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
}
