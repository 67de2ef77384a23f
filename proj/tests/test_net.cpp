#include <doctest.h>

#include "smelt/gradcheck.hpp"
#include "smelt/net.hpp"
#include "smelt/rng.hpp"

using namespace smelt;

TEST_CASE("backbone specs cover all layer kinds and depths") {
  NetConfig cfg{.input_dim = 4, .width = 6, .depth = 2, .embed_dim = 5};
  auto specs = backbone_specs(cfg);
  CHECK(specs->size() == 1 + 2 * 4 + 4);
  bool kinds[5] = {};
  int max_depth = 0;
  for (const auto& s : *specs) {
    kinds[static_cast<int>(s.kind)] = true;
    max_depth = std::max(max_depth, s.depth_index);
  }
  for (bool k : kinds) CHECK(k);
  CHECK(max_depth == 3);
  ParamSet p = init_backbone(cfg, RngStream(0));
  CHECK(p.total_dim() == 4 * 6 + 2 * (6 + 6 + 36 + 6) + 6 + 6 + 6 * 5 + 5);
}

TEST_CASE("embedding forward shape and determinism") {
  NetConfig cfg{.input_dim = 3, .width = 8, .depth = 1, .embed_dim = 4};
  ParamSet p = init_backbone(cfg, RngStream(7));
  Tensor x = Tensor::matrix(5, 3, {1, 0, -1, 0.5, 2, 0.1, -0.3, 0.9, 1.1, 0, 0, 0, 2, -2, 0.4});
  Tensor e1 = backbone_embed_values(p, cfg, x);
  Tensor e2 = backbone_embed_values(p, cfg, x);
  CHECK(e1.rows() == 5);
  CHECK(e1.cols() == 4);
  CHECK(e1.data() == e2.data());
}

TEST_CASE("backbone gradient matches finite differences") {
  NetConfig cfg{.input_dim = 3, .width = 5, .depth = 2, .embed_dim = 4};
  ParamSet p = init_backbone(cfg, RngStream(13));
  RngStream rng(14);
  Tensor x = Tensor::zeros({4, 3});
  for (auto& v : x.data()) v = rng.uniform(-1.5, 1.5);
  Tensor w = Tensor::zeros({4, 4});
  for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);

  auto eval = [&](const ParamSet& q, ParamSet* g) {
    Tape t;
    TapedParams tp = lift(t, q, true);
    Var e = backbone_embed(t, tp, cfg, t.constant(x));
    Var loss = t.sum(t.mul(e, t.constant(w)));
    double v = t.val(loss).scalar_value();
    if (g) *g = gather_grads(t, loss, tp);
    return v;
  };

  ParamSet analytic;
  eval(p, &analytic);
  auto res = finite_difference_check([&](const ParamSet& q) { return eval(q, nullptr); }, p,
                                     analytic, 1e-5);
  INFO("worst " << res.worst_index << " fd " << res.fd_at_worst << " an " << res.analytic_at_worst);
  CHECK(res.max_rel_err < 1e-4);
}
