#include "smelt/metaopt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace smelt {

namespace {

std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double effective_gumbel_temp(const TrainConfig& cfg, int64_t step) {
  if (cfg.gumbel_temp_final == cfg.gumbel_temp || cfg.max_steps <= 1) return cfg.gumbel_temp;
  double t = static_cast<double>(step) / static_cast<double>(cfg.max_steps - 1);
  t = std::min(1.0, std::max(0.0, t));
  return cfg.gumbel_temp + (cfg.gumbel_temp_final - cfg.gumbel_temp) * t;
}

ParamSet uniform_noise_like(const ParamSet& shape_src, RngStream& rng) {
  std::vector<Tensor> vals;
  vals.reserve(shape_src.n_layers());
  for (size_t i = 0; i < shape_src.n_layers(); ++i) {
    Tensor t = Tensor::zeros(shape_src.value(i).shape());
    for (auto& v : t.data()) v = rng.uniform_open(1e-6);
    vals.push_back(std::move(t));
  }
  return ParamSet(shape_src.specs(), std::move(vals));
}

}  // namespace

void TrainConfig::validate() const {
  if (experts < 1) throw ConfigError("train: experts must be >= 1");
  if (tau < 0.0 || tau > 1.0) throw ConfigError("train: tau must be in [0,1]");
  if (beta_w < 0.0 || beta_w > 1.0) throw ConfigError("train: beta_w must be in [0,1]");
  if (kd_temp <= 0.0) throw ConfigError("train: kd_temp must be positive");
  if (teacher_steps < 1) throw ConfigError("train: teacher_steps must be >= 1");
  if (lr_main <= 0.0 || lr_lambda <= 0.0 || lr_teacher <= 0.0)
    throw ConfigError("train: learning rates must be positive");
  if (batch_tasks < 1) throw ConfigError("train: batch_tasks must be >= 1");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (gumbel_temp <= 0.0 || gumbel_temp_final <= 0.0)
    throw ConfigError("train: gumbel temperatures must be positive");
  hc.validate();
}

std::string metrics_csv_header(int experts) {
  std::string h = "step,mean_ce,mean_kd";
  for (int m = 1; m <= experts; ++m) h += ",density_" + std::to_string(m);
  for (int m = 1; m <= experts; ++m) h += ",lambda_" + std::to_string(m);
  for (int m = 1; m <= experts; ++m) h += ",mean_alpha_" + std::to_string(m);
  h += ",val_id_acc,val_ood_acc";
  return h;
}

TrainState init_train_state(const TrainConfig& cfg, const NetConfig& net_cfg, ParamSet theta_pre) {
  cfg.validate();
  TrainState st;
  RngStream root(cfg.seed);
  st.pool = make_pool(std::move(theta_pre), cfg.experts, cfg.tau, cfg.hc, cfg.mask_init_density,
                      cfg.mask_init_std, root.child("pool"));
  RouterConfig rc;
  rc.embed_dim = net_cfg.embed_dim;
  rc.experts = cfg.experts;
  rc.gumbel_temp = cfg.gumbel_temp;
  st.router = init_router(rc, root.child("router"));
  st.opt_delta = Adam(st.pool.theta_delta.specs());
  st.opt_router = Adam(st.router.params.specs());
  for (int m = 0; m < cfg.experts; ++m) st.opt_masks.emplace_back(st.pool.theta_pre.specs());
  return st;
}

ParamSet make_teacher(const ParamSet& theta_i, const Episode& episode, int steps, double lr,
                      const NetConfig& net_cfg, Metric metric) {
  if (!episode.query_labeled()) throw ConfigError("make_teacher: query labels required");
  ParamSet teacher = theta_i;  // detached copy
  for (int k = 0; k < steps; ++k) {
    Tape tape;
    TapedParams tp = lift(tape, teacher, true);
    Var logits = protonet_logits_t(tape, tp, net_cfg, episode, metric);
    Var loss = ce_loss_t(tape, logits, episode.query_y);
    if (!std::isfinite(tape.val(loss).scalar_value()))
      throw NumericError("teacher loss non-finite at inner step " + std::to_string(k));
    ParamSet grads = gather_grads(tape, loss, tp);
    teacher = sgd_step(teacher, grads, lr);
  }
  return teacher;
}

std::vector<double> sparsity_violation(const ExpertPool& pool) {
  std::vector<double> v;
  v.reserve(pool.masks.size());
  for (const auto& m : pool.masks) v.push_back(expected_density(m) - (1.0 - pool.tau));
  return v;
}

StepMetrics meta_step(TrainState& state, std::span<const Episode> batch, const TrainConfig& cfg,
                      const NetConfig& net_cfg) {
  if (batch.empty()) throw ConfigError("meta_step: empty batch");
  const int m_count = state.pool.expert_count();
  RngStream step_rng = RngStream(cfg.seed).child("meta", static_cast<uint64_t>(state.step));

  Tape tape;
  TapedParams delta_vars = lift(tape, state.pool.theta_delta, true);
  TapedParams router_vars = lift(tape, state.router.params, true);
  std::vector<TapedParams> mask_vars;
  mask_vars.reserve(static_cast<size_t>(m_count));
  for (const auto& m : state.pool.masks) mask_vars.push_back(lift(tape, m.log_alpha, true));

  RouterConfig route_cfg = state.router.cfg;
  route_cfg.gumbel_temp = effective_gumbel_temp(cfg, state.step);

  StepMetrics metrics;
  metrics.mean_alpha.assign(static_cast<size_t>(m_count), 0.0);
  Var total{};
  for (size_t e = 0; e < batch.size(); ++e) {
    const Episode& ep = batch[e];
    RngStream ep_rng = step_rng.child("ep", e);

    Tensor protos = encode_prototypes(state.pool.theta_pre, net_cfg, ep);
    RngStream gumbel_rng = ep_rng.child("gumbel");
    RouteResult route = route_train(tape, router_vars, route_cfg, protos, gumbel_rng);

    std::vector<std::vector<Var>> gates;
    gates.reserve(static_cast<size_t>(m_count));
    for (int m = 0; m < m_count; ++m) {
      RngStream gate_rng = ep_rng.child("gate", static_cast<uint64_t>(m));
      ParamSet noise = uniform_noise_like(state.pool.theta_pre, gate_rng);
      gates.push_back(gate_vars(tape, mask_vars[static_cast<size_t>(m)], noise, cfg.hc));
    }

    TapedParams theta_i = merge_vars(tape, state.pool.theta_pre, delta_vars, route.alpha_vars, gates);
    Var student_logits = protonet_logits_t(tape, theta_i, net_cfg, ep, cfg.metric);
    Var ce = ce_loss_t(tape, student_logits, ep.query_y);

    Var loss_e;
    if (cfg.beta_w == 1.0) {
      loss_e = ce;
    } else {
      ParamSet teacher = make_teacher(gather_values(tape, theta_i), ep, cfg.teacher_steps,
                                      cfg.lr_teacher, net_cfg, cfg.metric);
      Tensor teacher_logits = protonet_logits(teacher, net_cfg, ep, cfg.metric);
      Var kd = kd_loss_t(tape, student_logits, teacher_logits, cfg.kd_temp);
      metrics.mean_kd += tape.val(kd).scalar_value();
      loss_e = cfg.beta_w == 0.0
                   ? kd
                   : tape.add(tape.scale(ce, cfg.beta_w), tape.scale(kd, 1.0 - cfg.beta_w));
    }
    metrics.mean_ce += tape.val(ce).scalar_value();
    for (int m = 0; m < m_count; ++m)
      metrics.mean_alpha[static_cast<size_t>(m)] += route.weights.alpha[static_cast<size_t>(m)];

    total = total.valid() ? tape.add(total, loss_e) : loss_e;
  }
  double inv_b = 1.0 / static_cast<double>(batch.size());
  metrics.mean_ce *= inv_b;
  metrics.mean_kd *= inv_b;
  for (auto& a : metrics.mean_alpha) a *= inv_b;
  total = tape.scale(total, inv_b);

  // sparsity penalty: + sum_m lambda_m * (density_m - (1 - tau)), with lambda
  // constant under the descent
  std::vector<double> density_values(static_cast<size_t>(m_count));
  for (int m = 0; m < m_count; ++m) {
    Var dens = expected_density_var(tape, mask_vars[static_cast<size_t>(m)], cfg.hc);
    density_values[static_cast<size_t>(m)] = tape.val(dens).scalar_value();
    double lam = state.pool.lambdas[static_cast<size_t>(m)];
    if (lam != 0.0) {
      Var viol = tape.sub(dens, tape.constant_scalar(1.0 - state.pool.tau));
      total = tape.add(total, tape.scale(viol, lam));
    }
  }
  metrics.density = density_values;

  double loss_value = tape.val(total).scalar_value();
  metrics.objective = loss_value;
  if (!std::isfinite(loss_value))
    throw NumericError("meta_step: non-finite objective at step " + std::to_string(state.step) +
                       " (mean_ce " + std::to_string(metrics.mean_ce) + ", mean_kd " +
                       std::to_string(metrics.mean_kd) + ", domain " +
                       (batch.empty() ? "?" : batch[0].domain) + ")");

  // one backward sweep for all trainable groups
  std::vector<Var> wrt = delta_vars.vars;
  wrt.insert(wrt.end(), router_vars.vars.begin(), router_vars.vars.end());
  for (const auto& mv : mask_vars) wrt.insert(wrt.end(), mv.vars.begin(), mv.vars.end());
  auto grads = tape.grad(total, wrt);

  size_t off = 0;
  auto take = [&](const SpecsPtr& specs, size_t n) {
    ParamSet g(specs, std::vector<Tensor>(grads.begin() + static_cast<long>(off),
                                          grads.begin() + static_cast<long>(off + n)));
    off += n;
    return g;
  };
  ParamSet g_delta = take(state.pool.theta_delta.specs(), delta_vars.vars.size());
  ParamSet g_router = take(state.router.params.specs(), router_vars.vars.size());
  state.pool.theta_delta = state.opt_delta.step(state.pool.theta_delta, g_delta, cfg.lr_main);
  state.router.params = state.opt_router.step(state.router.params, g_router, cfg.lr_main);
  for (int m = 0; m < m_count; ++m) {
    ParamSet g_mask = take(state.pool.theta_pre.specs(), mask_vars[static_cast<size_t>(m)].vars.size());
    state.pool.masks[static_cast<size_t>(m)].log_alpha =
        state.opt_masks[static_cast<size_t>(m)].step(state.pool.masks[static_cast<size_t>(m)].log_alpha,
                                                     g_mask, cfg.lr_main);
  }

  // projected ascent with reset-on-satisfaction
  metrics.lambda.assign(static_cast<size_t>(m_count), 0.0);
  for (int m = 0; m < m_count; ++m) {
    double v = density_values[static_cast<size_t>(m)] - (1.0 - state.pool.tau);
    double& lam = state.pool.lambdas[static_cast<size_t>(m)];
    if (v > 0.0) {
      double factor = cfg.alpha_weighted_ascent ? metrics.mean_alpha[static_cast<size_t>(m)] : 1.0;
      lam = std::max(0.0, lam + cfg.lr_lambda * v * factor);
    } else {
      lam = 0.0;
    }
    metrics.lambda[static_cast<size_t>(m)] = lam;
  }

  ++state.step;
  return metrics;
}

namespace {

double mean_direct_accuracy(const TrainState& state, const NetConfig& net_cfg,
                            const std::function<Episode(uint64_t)>& source, int n, Metric metric) {
  if (!source || n <= 0) return 0.0;
  double acc = 0.0;
  auto gates = episode_gates(state.pool, false, RngStream(0));
  for (int i = 0; i < n; ++i) {
    Episode ep = source(static_cast<uint64_t>(i));
    DirectInference inf = direct_inference(state, net_cfg, ep, metric, gates);
    acc += accuracy(inf.query_logits, ep.query_y);
  }
  return acc / n;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const NetConfig& net_cfg, ParamSet theta_pre,
                  const EpisodeSource& source) {
  cfg.validate();
  if (!source.train_episode) throw ConfigError("train: missing train episode source");
  TrainResult result;
  TrainState state = init_train_state(cfg, net_cfg, std::move(theta_pre));
  result.metrics_rows.reserve(static_cast<size_t>(cfg.max_steps));

  bool have_best = false;
  TrainState best = state;
  int64_t best_step = 0;
  double best_acc = -1.0;

  for (int64_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<Episode> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_tasks));
    for (int b = 0; b < cfg.batch_tasks; ++b)
      batch.push_back(source.train_episode(static_cast<uint64_t>(step) * cfg.batch_tasks +
                                           static_cast<uint64_t>(b)));
    StepMetrics m = meta_step(state, batch, cfg, net_cfg);

    std::string row = std::to_string(step) + "," + fmt_g17(m.mean_ce) + "," + fmt_g17(m.mean_kd);
    for (double d : m.density) row += "," + fmt_g17(d);
    for (double l : m.lambda) row += "," + fmt_g17(l);
    for (double a : m.mean_alpha) row += "," + fmt_g17(a);

    bool eval_now = cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps);
    if (eval_now && source.val_id) {
      double id_acc = mean_direct_accuracy(state, net_cfg, source.val_id, cfg.eval_episodes, cfg.metric);
      double ood_acc = source.val_ood ? mean_direct_accuracy(state, net_cfg, source.val_ood,
                                                             cfg.eval_episodes, cfg.metric)
                                      : 0.0;
      row += "," + fmt_g17(id_acc) + "," + fmt_g17(ood_acc);
      if (id_acc > best_acc) {
        best_acc = id_acc;
        best = state;
        best_step = step + 1;
        have_best = true;
      }
    } else {
      row += ",,";
    }
    result.metrics_rows.push_back(std::move(row));
  }

  result.final_state = state;
  result.best = have_best ? std::move(best) : std::move(state);
  result.best_step = have_best ? best_step : cfg.max_steps;
  result.best_val_acc = have_best ? best_acc : 0.0;
  return result;
}

std::vector<GateSample> episode_gates(const ExpertPool& pool, bool stochastic, RngStream rng) {
  std::vector<GateSample> gates;
  gates.reserve(pool.masks.size());
  for (size_t m = 0; m < pool.masks.size(); ++m) {
    if (stochastic) {
      RngStream r = rng.child("gate", m);
      gates.push_back(sample_gate(pool.masks[m], r));
    } else {
      gates.push_back(deterministic_gate(pool.masks[m]));
    }
  }
  return gates;
}

DirectInference direct_inference(const TrainState& state, const NetConfig& net_cfg,
                                 const Episode& episode, Metric metric,
                                 const std::vector<GateSample>& gates) {
  DirectInference out;
  Tensor protos = encode_prototypes(state.pool.theta_pre, net_cfg, episode);
  out.weights = route_hard(state.router, protos);
  out.theta_i = merge(state.pool, out.weights, gates);
  out.query_logits = protonet_logits(out.theta_i, net_cfg, episode, metric);
  return out;
}

DenseTuneResult dense_meta_tune(const ParamSet& theta_pre, const NetConfig& net_cfg,
                                const std::function<Episode(uint64_t)>& episodes, int steps,
                                int batch, double lr, Metric metric) {
  if (!episodes) throw ConfigError("dense_meta_tune: missing episode source");
  if (batch < 1) throw ConfigError("dense_meta_tune: batch must be >= 1");
  DenseTuneResult res;
  res.theta = theta_pre;
  Adam opt(theta_pre.specs());
  for (int step = 0; step < steps; ++step) {
    Tape tape;
    TapedParams tp = lift(tape, res.theta, true);
    Var total{};
    for (int b = 0; b < batch; ++b) {
      Episode ep = episodes(static_cast<uint64_t>(step) * batch + static_cast<uint64_t>(b));
      Var logits = protonet_logits_t(tape, tp, net_cfg, ep, metric);
      Var ce = ce_loss_t(tape, logits, ep.query_y);
      total = total.valid() ? tape.add(total, ce) : ce;
    }
    total = tape.scale(total, 1.0 / batch);
    double lv = tape.val(total).scalar_value();
    if (!std::isfinite(lv)) throw NumericError("dense_meta_tune diverged at step " + std::to_string(step));
    ParamSet grads = gather_grads(tape, total, tp);
    res.theta = opt.step(res.theta, grads, lr);
    res.metrics_rows.push_back(std::to_string(step) + "," + fmt_g17(lv));
  }
  return res;
}

void FitDomainConfig::validate() const {
  if (tau < 0.0 || tau > 1.0) throw ConfigError("fit: tau must be in [0,1]");
  if (steps < 0 || batch_tasks < 1) throw ConfigError("fit: bad step/batch counts");
  if (lr_log_alpha <= 0.0 || lr_lambda <= 0.0) throw ConfigError("fit: learning rates must be positive");
  hc.validate();
}

FitDomainResult fit_domain_mask(const ParamSet& theta_pre, const ParamSet& theta_tuned,
                                const std::function<Episode(uint64_t)>& episodes,
                                const NetConfig& net_cfg, const FitDomainConfig& cfg) {
  cfg.validate();
  if (!theta_pre.same_specs(theta_tuned)) throw ShapeError("fit_domain_mask: spec mismatch");
  ParamSet delta = axpy(-1.0, theta_pre, theta_tuned);  // frozen modulation

  FitDomainResult res;
  res.mask = init_mask(theta_pre.specs(), cfg.hc, cfg.init_density, cfg.init_std,
                       RngStream(cfg.seed).child("fit_mask"));
  Adam opt(theta_pre.specs());
  double lambda = 0.0;

  for (int step = 0; step < cfg.steps; ++step) {
    Tape tape;
    TapedParams la = lift(tape, res.mask.log_alpha, true);
    TapedParams delta_c = lift(tape, delta, false);
    RngStream step_rng = RngStream(cfg.seed).child("fit", static_cast<uint64_t>(step));

    Var total{};
    for (int b = 0; b < cfg.batch_tasks; ++b) {
      Episode ep = episodes(static_cast<uint64_t>(step) * cfg.batch_tasks + static_cast<uint64_t>(b));
      RngStream gate_rng = step_rng.child("gate", static_cast<uint64_t>(b));
      ParamSet noise = uniform_noise_like(theta_pre, gate_rng);
      std::vector<std::vector<Var>> gates{gate_vars(tape, la, noise, cfg.hc)};
      std::vector<Var> ones{tape.constant_scalar(1.0)};
      TapedParams theta = merge_vars(tape, theta_pre, delta_c, ones, gates);
      Var logits = protonet_logits_t(tape, theta, net_cfg, ep, cfg.metric);
      Var ce = ce_loss_t(tape, logits, ep.query_y);
      total = total.valid() ? tape.add(total, ce) : ce;
    }
    total = tape.scale(total, 1.0 / cfg.batch_tasks);

    Var dens = expected_density_var(tape, la, cfg.hc);
    double dens_value = tape.val(dens).scalar_value();
    if (lambda != 0.0)
      total = tape.add(total, tape.scale(tape.sub(dens, tape.constant_scalar(1.0 - cfg.tau)), lambda));

    double loss_value = tape.val(total).scalar_value();
    if (!std::isfinite(loss_value))
      throw NumericError("fit_domain_mask diverged at step " + std::to_string(step));

    ParamSet grads = gather_grads(tape, total, la);
    res.mask.log_alpha = opt.step(res.mask.log_alpha, grads, cfg.lr_log_alpha);

    double v = dens_value - (1.0 - cfg.tau);
    lambda = v > 0.0 ? std::max(0.0, lambda + cfg.lr_lambda * v) : 0.0;
    if (v <= 0.0 && lambda != 0.0) res.reset_rule_held = false;

    res.history_rows.push_back(std::to_string(step) + "," + fmt_g17(loss_value) + "," +
                               fmt_g17(dens_value) + "," + fmt_g17(lambda));
  }
  res.lambda = lambda;
  res.final_density = expected_density(res.mask);
  return res;
}

}  // namespace smelt
