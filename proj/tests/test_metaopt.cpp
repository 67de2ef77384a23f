#include <doctest.h>

#include <cmath>

#include "smelt/gradcheck.hpp"
#include "smelt/metaopt.hpp"
#include "smelt/tasks.hpp"

using namespace smelt;

namespace {

NetConfig tiny_net() { return NetConfig{.input_dim = 4, .width = 6, .depth = 1, .embed_dim = 6}; }

SuiteSpec tiny_suite() {
  SuiteSpec s;
  s.name = "tiny";
  s.seed = 99;
  s.n_way_min = s.n_way_max = 3;
  s.k_shot_min = s.k_shot_max = 3;
  s.q_query = 3;
  s.min_transform_distance = 0.0;
  DomainSpec d;
  d.name = "a";
  d.kind = GeneratorKind::kGaussianClusters;
  d.noise_scale = 0.3;
  d.nuisance_mult = 2.0;
  d.center_scale = 1.0;
  d.input_dim = 4;
  d.signal_dims = 2;
  d.class_pool_size = 30;
  d.transform_seed = 11;
  DomainSpec d2 = d;
  d2.name = "b";
  d2.transform_seed = 12;
  d2.warp = InputWarp::kTanh;
  s.id_domains = {d, d2};
  DomainSpec od = d;
  od.name = "c";
  od.transform_seed = 13;
  od.warp = InputWarp::kSin;
  s.ood_domains = {od};
  return s;
}

TrainConfig tiny_cfg(int experts = 2) {
  TrainConfig cfg;
  cfg.experts = experts;
  cfg.tau = 0.6;
  cfg.beta_w = 0.5;
  cfg.teacher_steps = 1;
  cfg.lr_teacher = 0.05;
  cfg.batch_tasks = 2;
  cfg.max_steps = 4;
  cfg.eval_every = 2;
  cfg.eval_episodes = 3;
  cfg.seed = 7;
  return cfg;
}

std::vector<Episode> batch_of(const SuiteSpec& s, int n, uint64_t base = 0) {
  std::vector<Episode> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_episode(s, Split::kTrain, false, base + static_cast<uint64_t>(i)));
  return out;
}

EpisodeSource source_of(const SuiteSpec& s) {
  EpisodeSource src;
  src.train_episode = [s](uint64_t i) { return sample_episode(s, Split::kTrain, false, i); };
  src.val_id = [s](uint64_t i) { return sample_episode(s, Split::kVal, false, i); };
  src.val_ood = [s](uint64_t i) { return sample_episode(s, Split::kVal, true, i); };
  return src;
}

ParamSet pre_params() { return init_backbone(tiny_net(), RngStream(1).child("init")); }

}  // namespace

TEST_CASE("teacher with zero learning rate is the student") {
  SuiteSpec s = tiny_suite();
  Episode ep = sample_episode(s, Split::kTrain, false, 0);
  ParamSet theta = pre_params();
  ParamSet teacher = make_teacher(theta, ep, 3, 0.0, tiny_net(), Metric::kSqEuclid);
  CHECK(teacher == theta);
  Tensor tl = protonet_logits(teacher, tiny_net(), ep, Metric::kSqEuclid);
  Tensor sl = protonet_logits(theta, tiny_net(), ep, Metric::kSqEuclid);
  CHECK(kd_value(sl, tl, 2.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("one teacher step is exactly one explicit gradient step") {
  SuiteSpec s = tiny_suite();
  Episode ep = sample_episode(s, Split::kTrain, false, 1);
  ParamSet theta = pre_params();
  double lr = 0.03;
  ParamSet teacher = make_teacher(theta, ep, 1, lr, tiny_net(), Metric::kSqEuclid);

  Tape tape;
  TapedParams tp = lift(tape, theta, true);
  Var loss = ce_loss_t(tape, protonet_logits_t(tape, tp, tiny_net(), ep, Metric::kSqEuclid), ep.query_y);
  ParamSet grads = gather_grads(tape, loss, tp);
  ParamSet expect = axpy(-lr, grads, theta);
  CHECK(teacher == expect);
}

TEST_CASE("teacher descends the query loss") {
  SuiteSpec s = tiny_suite();
  for (uint64_t i = 0; i < 5; ++i) {
    Episode ep = sample_episode(s, Split::kTrain, false, i);
    ParamSet theta = pre_params();
    ParamSet teacher = make_teacher(theta, ep, 1, 0.05, tiny_net(), Metric::kSqEuclid);
    double ce_student = ce_value(protonet_logits(theta, tiny_net(), ep, Metric::kSqEuclid), ep.query_y);
    double ce_teacher = ce_value(protonet_logits(teacher, tiny_net(), ep, Metric::kSqEuclid), ep.query_y);
    CHECK(ce_teacher <= ce_student + 1e-12);
  }
}

TEST_CASE("sparsity violation sign convention") {
  ParamSet pre = pre_params();
  TrainConfig cfg = tiny_cfg(1);
  cfg.tau = 0.9;
  TrainState st = init_train_state(cfg, tiny_net(), pre);
  auto set_density = [&](double target) {
    // sigmoid(m0 - beta*shift) = target
    double m0 = std::log(target / (1 - target)) + st.pool.masks[0].cfg.beta * st.pool.masks[0].cfg.cdf_shift();
    st.pool.masks[0].log_alpha = full_like(st.pool.theta_pre, m0);
  };
  set_density(0.15);
  CHECK(sparsity_violation(st.pool)[0] == doctest::Approx(0.05).epsilon(1e-9));
  set_density(0.10);
  CHECK(sparsity_violation(st.pool)[0] == doctest::Approx(0.0).epsilon(1e-9));
  set_density(0.05);
  CHECK(sparsity_violation(st.pool)[0] == doctest::Approx(-0.05).epsilon(1e-9));
}

TEST_CASE("tau zero keeps every multiplier at zero") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  cfg.tau = 0.0;
  TrainState st = init_train_state(cfg, tiny_net(), pre_params());
  for (int i = 0; i < 4; ++i) {
    auto m = meta_step(st, batch_of(s, 2, static_cast<uint64_t>(i) * 2), cfg, tiny_net());
    for (double l : m.lambda) CHECK(l == 0.0);
  }
}

TEST_CASE("saturated dense masks raise every multiplier on the first step") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  cfg.tau = 0.9;
  TrainState st = init_train_state(cfg, tiny_net(), pre_params());
  for (auto& mask : st.pool.masks) mask.log_alpha = full_like(st.pool.theta_pre, 40.0);
  auto m = meta_step(st, batch_of(s, 2), cfg, tiny_net());
  for (double l : m.lambda) CHECK(l >= cfg.lr_lambda * 0.9 - 1e-9);
}

TEST_CASE("multipliers stay nonnegative and reset when satisfied") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  cfg.tau = 0.5;
  cfg.max_steps = 12;
  TrainState st = init_train_state(cfg, tiny_net(), pre_params());
  for (int i = 0; i < 12; ++i) {
    auto m = meta_step(st, batch_of(s, 2, static_cast<uint64_t>(i) * 2), cfg, tiny_net());
    for (int e = 0; e < cfg.experts; ++e) {
      double v = m.density[static_cast<size_t>(e)] - (1.0 - cfg.tau);
      CHECK(m.lambda[static_cast<size_t>(e)] >= 0.0);
      if (v <= 0.0) CHECK(m.lambda[static_cast<size_t>(e)] == 0.0);
    }
  }
}

TEST_CASE("theta_pre stays bit-identical through training") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  ParamSet pre = pre_params();
  TrainState st = init_train_state(cfg, tiny_net(), pre);
  for (int i = 0; i < 6; ++i) (void)meta_step(st, batch_of(s, 2, static_cast<uint64_t>(i) * 2), cfg, tiny_net());
  CHECK(st.pool.theta_pre == pre);
}

TEST_CASE("constraint penalty enters the objective exactly as sum lambda_m v_m") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  cfg.tau = 0.9;
  TrainState a = init_train_state(cfg, tiny_net(), pre_params());
  TrainState b = a;
  a.pool.lambdas = {1.25, 0.5};
  b.pool.lambdas = {0.0, 0.0};
  auto batch = batch_of(s, 2);
  auto ma = meta_step(a, batch, cfg, tiny_net());
  auto mb = meta_step(b, batch, cfg, tiny_net());
  double expect = 0.0;
  for (int m = 0; m < 2; ++m)
    expect += (m == 0 ? 1.25 : 0.5) * (mb.density[static_cast<size_t>(m)] - (1.0 - cfg.tau));
  CHECK(ma.objective - mb.objective == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("with dense saturated gate and beta 1, meta_step is plain protonet tuning") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg(1);
  cfg.beta_w = 1.0;
  cfg.tau = 0.0;      // constraint never binds
  cfg.lr_main = 1e-3;
  ParamSet pre = pre_params();
  TrainState st = init_train_state(cfg, tiny_net(), pre);
  st.pool.masks[0].log_alpha = full_like(pre, 40.0);  // gate exactly 1

  auto batch = batch_of(s, 3);
  (void)meta_step(st, batch, cfg, tiny_net());
  ParamSet merged = axpy(1.0, st.pool.theta_delta, st.pool.theta_pre);

  size_t calls = 0;
  auto episodes = [&](uint64_t) { return batch[calls < batch.size() ? calls++ : 0]; };
  DenseTuneResult dense = dense_meta_tune(pre, tiny_net(), episodes, 1, 3, cfg.lr_main, Metric::kSqEuclid);

  auto fm = merged.flatten_view(), fd = dense.theta.flatten_view();
  double max_diff = 0;
  for (size_t i = 0; i < fm.size(); ++i) max_diff = std::max(max_diff, std::fabs(fm[i] - fd[i]));
  CHECK(max_diff < 1e-10);
}

TEST_CASE("full meta objective gradient matches finite differences on a small pool") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg(2);
  cfg.beta_w = 0.5;
  ParamSet pre = pre_params();
  Episode ep = sample_episode(s, Split::kTrain, false, 0);

  // objective as a function of (theta_delta, router, both log_alphas)
  TrainState base = init_train_state(cfg, tiny_net(), pre);
  base.pool.lambdas = {0.7, 0.4};

  auto flatten_groups = [&](const TrainState& st) {
    std::vector<ParamSet> groups{st.pool.theta_delta, st.router.params,
                                 st.pool.masks[0].log_alpha, st.pool.masks[1].log_alpha};
    return groups;
  };

  std::vector<Tensor> frozen_teacher_logits;  // per spec of the objective: StopGrads(teacher)
  auto eval_at = [&](const std::vector<ParamSet>& groups, std::vector<ParamSet>* grads_out) {
    Tape tape;
    TapedParams delta_vars = lift(tape, groups[0], true);
    TapedParams router_vars = lift(tape, groups[1], true);
    std::vector<TapedParams> mask_vars{lift(tape, groups[2], true), lift(tape, groups[3], true)};

    RngStream ep_rng = RngStream(cfg.seed).child("meta", 0).child("ep", 0);
    Tensor protos = encode_prototypes(base.pool.theta_pre, tiny_net(), ep);
    RngStream gumbel = ep_rng.child("gumbel");
    RouterConfig rc = base.router.cfg;
    RouteResult route = route_train(tape, router_vars, rc, protos, gumbel);

    std::vector<std::vector<Var>> gates;
    for (int m = 0; m < 2; ++m) {
      RngStream grng = ep_rng.child("gate", static_cast<uint64_t>(m));
      std::vector<Tensor> noise;
      for (size_t l = 0; l < pre.n_layers(); ++l) {
        Tensor t = Tensor::zeros(pre.value(l).shape());
        for (auto& v : t.data()) v = grng.uniform_open(1e-6);
        noise.push_back(std::move(t));
      }
      gates.push_back(gate_vars(tape, mask_vars[static_cast<size_t>(m)],
                                ParamSet(pre.specs(), std::move(noise)), cfg.hc));
    }
    TapedParams theta_i = merge_vars(tape, base.pool.theta_pre, delta_vars, route.alpha_vars, gates);
    Var logits = protonet_logits_t(tape, theta_i, tiny_net(), ep, cfg.metric);
    if (frozen_teacher_logits.empty()) {
      ParamSet teacher = make_teacher(gather_values(tape, theta_i), ep, 1, cfg.lr_teacher, tiny_net(), cfg.metric);
      frozen_teacher_logits.push_back(protonet_logits(teacher, tiny_net(), ep, cfg.metric));
    }
    Var loss = episode_meta_loss_t(tape, logits, frozen_teacher_logits[0], ep.query_y, cfg.beta_w, cfg.kd_temp);
    for (int m = 0; m < 2; ++m) {
      Var dens = expected_density_var(tape, mask_vars[static_cast<size_t>(m)], cfg.hc);
      loss = tape.add(loss, tape.scale(tape.sub(dens, tape.constant_scalar(1.0 - cfg.tau)),
                                       base.pool.lambdas[static_cast<size_t>(m)]));
    }
    double v = tape.val(loss).scalar_value();
    if (grads_out) {
      std::vector<Var> wrt = delta_vars.vars;
      wrt.insert(wrt.end(), router_vars.vars.begin(), router_vars.vars.end());
      wrt.insert(wrt.end(), mask_vars[0].vars.begin(), mask_vars[0].vars.end());
      wrt.insert(wrt.end(), mask_vars[1].vars.begin(), mask_vars[1].vars.end());
      auto g = tape.grad(loss, wrt);
      size_t off = 0;
      for (const auto& grp : groups) {
        grads_out->push_back(ParamSet(grp.specs(), std::vector<Tensor>(g.begin() + static_cast<long>(off),
                                                                       g.begin() + static_cast<long>(off + grp.n_layers()))));
        off += grp.n_layers();
      }
    }
    return v;
  };

  auto groups = flatten_groups(base);
  std::vector<ParamSet> analytic;
  eval_at(groups, &analytic);

  // gate noise is fixed, so the only FD-hostile entries are clamp kinks
  const double h = 1e-5;
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    std::vector<char> exclude(groups[gi].flatten_view().size(), 0);
    if (gi >= 2) {
      int m = static_cast<int>(gi) - 2;
      RngStream grng = RngStream(cfg.seed).child("meta", 0).child("ep", 0).child("gate", static_cast<uint64_t>(m));
      std::vector<double> la = groups[gi].flatten_view();
      for (size_t i = 0; i < la.size(); ++i) {
        double u = grng.uniform_open(1e-6);
        double sx = 1.0 / (1.0 + std::exp(-(std::log(u) - std::log(1 - u) + la[i]) / cfg.hc.beta));
        double sbar = sx * (cfg.hc.zeta_s - cfg.hc.gamma) + cfg.hc.gamma;
        if (std::fabs(sbar) < 10 * h || std::fabs(sbar - 1.0) < 10 * h) exclude[i] = 1;
      }
    }
    auto res = finite_difference_check(
        [&](const ParamSet& q) {
          auto g2 = groups;
          g2[gi] = q;
          return eval_at(g2, nullptr);
        },
        groups[gi], analytic[gi], h, &exclude);
    INFO("group " << gi << " worst " << res.worst_index << " fd " << res.fd_at_worst << " an "
                  << res.analytic_at_worst);
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("zero-step training returns the initialization and merged equals theta_pre") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  cfg.max_steps = 0;
  ParamSet pre = pre_params();
  TrainResult res = train(cfg, tiny_net(), pre, source_of(s));
  CHECK(res.best.pool.theta_delta == zeros_like(pre));
  CHECK(res.best.step == 0);
  // any routing yields theta_pre exactly because the modulation is zero
  auto gates = episode_gates(res.best.pool, false, RngStream(0));
  Episode ep = sample_episode(s, Split::kTest, false, 0);
  DirectInference inf = direct_inference(res.best, tiny_net(), ep, cfg.metric, gates);
  CHECK(inf.theta_i == pre);
}

TEST_CASE("training twice with one seed gives identical metric logs") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  cfg.max_steps = 6;
  ParamSet pre = pre_params();
  TrainResult a = train(cfg, tiny_net(), pre, source_of(s));
  TrainResult b = train(cfg, tiny_net(), pre, source_of(s));
  REQUIRE(a.metrics_rows.size() == b.metrics_rows.size());
  for (size_t i = 0; i < a.metrics_rows.size(); ++i) CHECK(a.metrics_rows[i] == b.metrics_rows[i]);
}

TEST_CASE("diverging teacher reports a numeric error") {
  SuiteSpec s = tiny_suite();
  TrainConfig cfg = tiny_cfg();
  cfg.lr_teacher = 1e200;
  TrainState st = init_train_state(cfg, tiny_net(), pre_params());
  CHECK_THROWS_AS((void)meta_step(st, batch_of(s, 2), cfg, tiny_net()), NumericError);
}

TEST_CASE("fit_domain_mask with zero modulation leaves the loss unchanged") {
  SuiteSpec s = tiny_suite();
  ParamSet pre = pre_params();
  FitDomainConfig cfg;
  cfg.tau = 0.0;  // no constraint pressure either
  cfg.steps = 6;
  cfg.batch_tasks = 2;
  auto eps = [&](uint64_t i) { return sample_episode(s, Split::kTrain, false, i % 4); };
  FitDomainResult res = fit_domain_mask(pre, pre, eps, tiny_net(), cfg);
  REQUIRE(res.history_rows.size() == 6);
  // columns: step,loss,density,lambda; the loss depends only on theta_pre here
  auto loss_of = [](const std::string& row) {
    size_t a = row.find(','), b = row.find(',', a + 1);
    return row.substr(a + 1, b - a - 1);
  };
  // same episodes repeat every 2 steps, so losses repeat too
  CHECK(loss_of(res.history_rows[0]) == loss_of(res.history_rows[2]));
  CHECK(loss_of(res.history_rows[1]) == loss_of(res.history_rows[3]));
  CHECK(res.reset_rule_held);
}

TEST_CASE("fit_domain_mask at full sparsity drives density toward zero") {
  SuiteSpec s = tiny_suite();
  ParamSet pre = pre_params();
  ParamSet tuned = axpy(0.05, ones_like(pre), pre);
  FitDomainConfig cfg;
  cfg.tau = 1.0;
  cfg.steps = 300;
  cfg.batch_tasks = 1;
  cfg.lr_log_alpha = 0.1;
  auto eps = [&](uint64_t i) { return sample_episode(s, Split::kTrain, false, i % 8); };
  FitDomainResult res = fit_domain_mask(pre, tuned, eps, tiny_net(), cfg);
  CHECK(res.final_density < 0.05);
  CHECK(res.reset_rule_held);
}
