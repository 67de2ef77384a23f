#include <doctest.h>

#include <cmath>

#include "smelt/experts.hpp"
#include "smelt/rng.hpp"

using namespace smelt;

namespace {

SpecsPtr vec_specs(int n) { return make_specs({{"w", LayerKind::kLinearWeight, {n}, 0}}); }

ParamSet vec(SpecsPtr specs, std::vector<double> v) {
  return ParamSet(std::move(specs), {Tensor::row(std::move(v))});
}

GateSample gate_of(const ParamSet& z) { return GateSample{z, full_like(z, 0.5)}; }

ExpertPool tiny_pool(int n, int experts, double tau = 0.9) {
  auto specs = vec_specs(n);
  ParamSet pre = ParamSet::zeros(specs);
  return make_pool(pre, experts, tau, HardConcreteConfig{}, 0.5, 0.01, RngStream(3));
}

}  // namespace

TEST_CASE("all-zero weights short-circuit to theta_pre bit-identically") {
  auto specs = vec_specs(3);
  ExpertPool pool = tiny_pool(3, 2);
  pool.theta_pre = vec(specs, {0.25, -1.5, 3.125});
  pool.theta_delta = vec(specs, {1, 1, 1});
  MergeWeights w = MergeWeights::from_raw({0.0, 0.0});
  auto gates = std::vector<GateSample>{gate_of(ones_like(pool.theta_pre)),
                                       gate_of(ones_like(pool.theta_pre))};
  ParamSet merged = merge(pool, w, gates);
  CHECK(merged == pool.theta_pre);
}

TEST_CASE("single expert, full gate: theta_pre + theta_delta") {
  auto specs = vec_specs(3);
  ExpertPool pool = tiny_pool(3, 1);
  pool.theta_pre = vec(specs, {1.0, 2.0, -3.0});
  pool.theta_delta = vec(specs, {0.5, -0.25, 4.0});
  MergeWeights w = MergeWeights::from_raw({1.0});
  ParamSet merged = merge(pool, w, {gate_of(ones_like(pool.theta_pre))});
  ParamSet expect = axpy(1.0, pool.theta_delta, pool.theta_pre);
  CHECK(merged == expect);
}

TEST_CASE("merge matches the hand-evaluated two-expert example") {
  auto specs = vec_specs(2);
  ExpertPool pool = tiny_pool(2, 2);
  pool.theta_pre = vec(specs, {1.0, 2.0});
  pool.theta_delta = vec(specs, {0.5, -1.0});
  MergeWeights w = MergeWeights::from_raw({0.5, 0.5});
  auto gates = std::vector<GateSample>{gate_of(vec(specs, {1, 0})), gate_of(vec(specs, {0, 1}))};
  ParamSet merged = merge(pool, w, gates);
  CHECK(merged.value(0)[0] == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(merged.value(0)[1] == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("merge count mismatches raise") {
  ExpertPool pool = tiny_pool(2, 2);
  MergeWeights w = MergeWeights::from_raw({1.0});
  CHECK_THROWS_AS((void)merge(pool, w, {gate_of(ones_like(pool.theta_pre))}), ConfigError);
}

TEST_CASE("merge is affine in the weights") {
  RngStream rng(9);
  auto specs = vec_specs(8);
  ExpertPool pool = tiny_pool(8, 3);
  {
    Tensor pre = Tensor::zeros({8}), delta = Tensor::zeros({8});
    for (auto& v : pre.data()) v = rng.uniform(-1, 1);
    for (auto& v : delta.data()) v = rng.uniform(-1, 1);
    pool.theta_pre = ParamSet(specs, {pre});
    pool.theta_delta = ParamSet(specs, {delta});
  }
  std::vector<GateSample> gates;
  for (int m = 0; m < 3; ++m) {
    Tensor z = Tensor::zeros({8});
    for (auto& v : z.data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    gates.push_back(gate_of(ParamSet(specs, {z})));
  }
  // raw vectors with a common sum, so normalized alphas combine affinely
  std::vector<double> r1{0.2, 0.5, 0.3}, r2{0.6, 0.1, 0.3};
  double c = 0.3;
  std::vector<double> r3(3);
  for (int m = 0; m < 3; ++m) r3[static_cast<size_t>(m)] = c * r1[static_cast<size_t>(m)] + (1 - c) * r2[static_cast<size_t>(m)];

  ParamSet m1 = merge(pool, MergeWeights::from_raw(r1), gates);
  ParamSet m2 = merge(pool, MergeWeights::from_raw(r2), gates);
  ParamSet m3 = merge(pool, MergeWeights::from_raw(r3), gates);
  ParamSet mod3 = axpy(-1.0, pool.theta_pre, m3);
  ParamSet mod_expect = axpy(c, axpy(-1.0, pool.theta_pre, m1),
                             hadamard(axpy(-1.0, pool.theta_pre, m2), full_like(m2, 1 - c)));
  auto f3 = mod3.flatten_view(), fe = mod_expect.flatten_view();
  for (size_t i = 0; i < f3.size(); ++i) CHECK(std::fabs(f3[i] - fe[i]) < 1e-12);
}

TEST_CASE("taped merge agrees with the plain merge") {
  RngStream rng(11);
  auto specs = vec_specs(6);
  ExpertPool pool = tiny_pool(6, 2);
  {
    Tensor pre = Tensor::zeros({6}), delta = Tensor::zeros({6});
    for (auto& v : pre.data()) v = rng.uniform(-1, 1);
    for (auto& v : delta.data()) v = rng.uniform(-1, 1);
    pool.theta_pre = ParamSet(specs, {pre});
    pool.theta_delta = ParamSet(specs, {delta});
  }
  std::vector<GateSample> gates;
  for (int m = 0; m < 2; ++m) {
    Tensor z = Tensor::zeros({6});
    for (auto& v : z.data()) v = rng.uniform(0, 1);
    gates.push_back(gate_of(ParamSet(specs, {z})));
  }
  MergeWeights w = MergeWeights::from_raw({0.3, 0.7});

  Tape tape;
  TapedParams delta_vars = lift(tape, pool.theta_delta, true);
  std::vector<Var> alphas{tape.constant_scalar(w.alpha[0]), tape.constant_scalar(w.alpha[1])};
  std::vector<std::vector<Var>> gate_vars_list;
  for (const auto& g : gates)
    gate_vars_list.push_back({tape.constant(g.z.value(0))});
  TapedParams merged_vars = merge_vars(tape, pool.theta_pre, delta_vars, alphas, gate_vars_list);
  ParamSet taped = gather_values(tape, merged_vars);
  ParamSet plain = merge(pool, w, gates);
  auto ft = taped.flatten_view(), fp = plain.flatten_view();
  for (size_t i = 0; i < ft.size(); ++i) CHECK(ft[i] == doctest::Approx(fp[i]).epsilon(1e-15));
}

TEST_CASE("merged sparsity bound values") {
  CHECK(merged_sparsity_bound(8, 0.9) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(merged_sparsity_bound(1, 0.9) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(merged_sparsity_bound(16, 0.9) == 0.0);
}

TEST_CASE("binary union sparsity respects the merged bound") {
  RngStream rng(13);
  auto specs = vec_specs(64);
  for (int rep = 0; rep < 200; ++rep) {
    int m_count = 1 + static_cast<int>(rng.next_below(6));
    double tau = rng.uniform(0.5, 1.0);
    int max_ones = static_cast<int>(std::floor((1.0 - tau) * 64));
    ParamSet u = ParamSet::zeros(specs);
    for (int m = 0; m < m_count; ++m) {
      Tensor z = Tensor::zeros({64});
      int ones = max_ones == 0 ? 0 : static_cast<int>(rng.next_below(static_cast<uint64_t>(max_ones + 1)));
      for (int o = 0; o < ones; ++o) z[static_cast<int64_t>(rng.next_below(64))] = 1.0;
      u = mask_union(u, ParamSet(specs, {z}));
    }
    double union_sparsity = 1.0 - binary_density(u);
    CHECK(union_sparsity >= merged_sparsity_bound(m_count, tau) - 1e-12);
  }
}

TEST_CASE("pool invariants enforced") {
  ExpertPool pool = tiny_pool(4, 2);
  pool.lambdas[0] = -0.5;
  CHECK_THROWS_AS(pool.validate(), ConfigError);
  pool.lambdas[0] = 0.0;
  pool.tau = 1.5;
  CHECK_THROWS_AS(pool.validate(), ConfigError);
}

TEST_CASE("merge weights normalize or stay all-zero") {
  MergeWeights w = MergeWeights::from_raw({0.5, 1.5});
  CHECK(w.alpha[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(w.alpha[1] == doctest::Approx(0.75).epsilon(1e-15));
  MergeWeights z = MergeWeights::from_raw({0.0, 0.0});
  CHECK(z.alpha == std::vector<double>{0.0, 0.0});
  CHECK_THROWS_AS((void)MergeWeights::from_raw({-0.1, 0.4}), ConfigError);
}
