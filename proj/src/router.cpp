#include "smelt/router.hpp"

#include <cmath>

namespace smelt {

void RouterConfig::validate() const {
  if (embed_dim <= 0 || experts <= 0) throw ConfigError("router: dims must be positive");
  if (heads <= 0 || embed_dim % heads != 0) throw ConfigError("router: heads must divide embed_dim");
  if (ffn_mult <= 0) throw ConfigError("router: ffn_mult must be positive");
  if (gumbel_temp <= 0.0) throw ConfigError("router: gumbel_temp must be positive");
}

SpecsPtr router_specs(const RouterConfig& cfg) {
  cfg.validate();
  int e = cfg.embed_dim, dh = cfg.embed_dim / cfg.heads, f = cfg.ffn_mult * cfg.embed_dim;
  Specs s;
  s.push_back({"ln1.scale", LayerKind::kNormScale, {e}, 0});
  s.push_back({"ln1.shift", LayerKind::kNormShift, {e}, 0});
  for (int h = 0; h < cfg.heads; ++h) {
    std::string p = "attn.h" + std::to_string(h) + ".";
    s.push_back({p + "wq", LayerKind::kLinearWeight, {e, dh}, 0});
    s.push_back({p + "wk", LayerKind::kLinearWeight, {e, dh}, 0});
    s.push_back({p + "wv", LayerKind::kLinearWeight, {e, dh}, 0});
  }
  s.push_back({"attn.wo", LayerKind::kLinearWeight, {e, e}, 0});
  s.push_back({"attn.bo", LayerKind::kLinearBias, {e}, 0});
  s.push_back({"ln2.scale", LayerKind::kNormScale, {e}, 1});
  s.push_back({"ln2.shift", LayerKind::kNormShift, {e}, 1});
  s.push_back({"ffn.w1", LayerKind::kLinearWeight, {e, f}, 1});
  s.push_back({"ffn.b1", LayerKind::kLinearBias, {f}, 1});
  s.push_back({"ffn.w2", LayerKind::kLinearWeight, {f, e}, 1});
  s.push_back({"ffn.b2", LayerKind::kLinearBias, {e}, 1});
  s.push_back({"head.weight", LayerKind::kLinearWeight, {e, cfg.experts}, 2});
  s.push_back({"head.bias", LayerKind::kLinearBias, {cfg.experts}, 2});
  return make_specs(std::move(s));
}

RouterParams init_router(const RouterConfig& cfg, RngStream rng) {
  auto specs = router_specs(cfg);
  std::vector<Tensor> vals;
  for (const auto& s : *specs) {
    Tensor t = Tensor::zeros(s.shape);
    switch (s.kind) {
      case LayerKind::kEmbedding:
      case LayerKind::kLinearWeight: {
        double std = 1.0 / std::sqrt(static_cast<double>(s.shape[0]));
        for (auto& v : t.data()) v = std * rng.normal();
        break;
      }
      case LayerKind::kNormScale:
        for (auto& v : t.data()) v = 1.0;
        break;
      default:
        break;
    }
    vals.push_back(std::move(t));
  }
  return RouterParams{ParamSet(std::move(specs), std::move(vals)), cfg};
}

Tensor encode_prototypes(const ParamSet& encoder, const NetConfig& net_cfg,
                         const Episode& episode) {
  episode.validate();
  Tensor emb = backbone_embed_values(encoder, net_cfg, episode.support_x);
  int e = emb.cols();
  Tensor protos = Tensor::zeros({episode.n_way, e});
  std::vector<int> counts(static_cast<size_t>(episode.n_way), 0);
  for (size_t j = 0; j < episode.support_y.size(); ++j) {
    int k = episode.support_y[j];
    ++counts[static_cast<size_t>(k)];
    for (int c = 0; c < e; ++c) protos.at(k, c) += emb.at(static_cast<int>(j), c);
  }
  for (int k = 0; k < episode.n_way; ++k)
    for (int c = 0; c < e; ++c) protos.at(k, c) /= counts[static_cast<size_t>(k)];
  return protos;
}

Var router_logits_t(Tape& tape, const TapedParams& router_vars, const RouterConfig& cfg,
                    const Tensor& prototypes) {
  if (prototypes.rows() < 1 || prototypes.cols() != cfg.embed_dim)
    throw ShapeError("router: prototype matrix must be [n x embed_dim]");
  const auto& v = router_vars.vars;
  size_t i = 0;
  Var ln1_g = v[i++], ln1_s = v[i++];
  int dh = cfg.embed_dim / cfg.heads;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Var x = tape.constant(prototypes);
  Var u = tape.add(tape.mul(tape.norm_rows(x), ln1_g), ln1_s);

  Var heads{};
  for (int h = 0; h < cfg.heads; ++h) {
    Var wq = v[i++], wk = v[i++], wv = v[i++];
    Var q = tape.matmul(u, wq);
    Var k = tape.matmul(u, wk);
    Var scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_dh);
    Var attn = tape.matmul(tape.softmax(scores), tape.matmul(u, wv));
    heads = heads.valid() ? tape.concat(heads, attn, 1) : attn;
  }
  Var wo = v[i++], bo = v[i++];
  Var x1 = tape.add(x, tape.add(tape.matmul(heads, wo), bo));

  Var ln2_g = v[i++], ln2_s = v[i++];
  Var u2 = tape.add(tape.mul(tape.norm_rows(x1), ln2_g), ln2_s);
  Var w1 = v[i++], b1 = v[i++], w2 = v[i++], b2 = v[i++];
  Var ffn = tape.add(tape.matmul(tape.tanh(tape.add(tape.matmul(u2, w1), b1)), w2), b2);
  Var x2 = tape.add(x1, ffn);

  int n = prototypes.rows();
  Tensor pool_w = Tensor::full({1, n}, 1.0 / static_cast<double>(n));
  Var pooled = tape.matmul(tape.constant(std::move(pool_w)), x2);  // [1 x E]

  Var hw = v[i++], hb = v[i++];
  return tape.add(tape.matmul(pooled, hw), hb);  // [1 x M]
}

Tensor router_logits(const RouterParams& router, const Tensor& prototypes) {
  Tape tape;
  TapedParams tp = lift(tape, router.params, false);
  return tape.val(router_logits_t(tape, tp, router.cfg, prototypes));
}

RouteResult route_train(Tape& tape, const TapedParams& router_vars, const RouterConfig& cfg,
                        const Tensor& prototypes, RngStream& rng,
                        const std::vector<double>* noise_override) {
  int m_count = cfg.experts;
  Var logits = router_logits_t(tape, router_vars, cfg, prototypes);

  std::vector<double> noise(static_cast<size_t>(m_count));
  if (noise_override) {
    if (static_cast<int>(noise_override->size()) != m_count)
      throw ConfigError("route_train: noise override size mismatch");
    noise = *noise_override;
  } else {
    for (auto& g : noise) {
      double u = rng.uniform_open(1e-6);
      g = std::log(u) - std::log(1.0 - u);
    }
  }
  Var noisy = tape.add(logits, tape.constant(Tensor({1, m_count}, std::vector<double>(noise))));
  Var raw = tape.sigmoid(tape.scale(noisy, 1.0 / cfg.gumbel_temp));
  Var raw_sum = tape.sum(raw);
  Var alpha_row = tape.div(raw, raw_sum);

  RouteResult out;
  out.noise = std::move(noise);
  out.alpha_vars.reserve(static_cast<size_t>(m_count));
  for (int m = 0; m < m_count; ++m) {
    Tensor pick = Tensor::zeros({m_count, 1});
    pick[m] = 1.0;
    out.alpha_vars.push_back(tape.matmul(alpha_row, tape.constant(std::move(pick))));
  }
  std::vector<double> raw_vals(tape.val(raw).data());
  out.weights = MergeWeights::from_raw(std::move(raw_vals));
  return out;
}

MergeWeights route_hard(const RouterParams& router, const Tensor& prototypes) {
  Tensor logits = router_logits(router, prototypes);
  std::vector<double> raw(static_cast<size_t>(logits.numel()));
  for (int64_t j = 0; j < logits.numel(); ++j) raw[static_cast<size_t>(j)] = logits[j] > 0.0 ? 1.0 : 0.0;
  return MergeWeights::from_raw(std::move(raw));
}

Tensor selection_similarity(const Tensor& per_domain_mean_alpha) {
  int d = per_domain_mean_alpha.rows(), m = per_domain_mean_alpha.cols();
  Tensor sim = Tensor::zeros({d, d});
  std::vector<double> norms(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    double s = 0;
    for (int j = 0; j < m; ++j) s += per_domain_mean_alpha.at(i, j) * per_domain_mean_alpha.at(i, j);
    norms[static_cast<size_t>(i)] = std::sqrt(s);
  }
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double ni = norms[static_cast<size_t>(i)], nj = norms[static_cast<size_t>(j)];
      if (ni == 0.0 || nj == 0.0) continue;
      double dotv = 0;
      for (int k = 0; k < m; ++k) dotv += per_domain_mean_alpha.at(i, k) * per_domain_mean_alpha.at(j, k);
      sim.at(i, j) = dotv / (ni * nj);
    }
  return sim;
}

}  // namespace smelt
