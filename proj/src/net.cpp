#include "smelt/net.hpp"

#include <cmath>

namespace smelt {

SpecsPtr backbone_specs(const NetConfig& cfg) {
  Specs specs;
  specs.push_back({"embed", LayerKind::kEmbedding, {cfg.input_dim, cfg.width}, 0});
  for (int d = 1; d <= cfg.depth; ++d) {
    std::string p = "block" + std::to_string(d) + ".";
    specs.push_back({p + "norm_scale", LayerKind::kNormScale, {cfg.width}, d});
    specs.push_back({p + "norm_shift", LayerKind::kNormShift, {cfg.width}, d});
    specs.push_back({p + "weight", LayerKind::kLinearWeight, {cfg.width, cfg.width}, d});
    specs.push_back({p + "bias", LayerKind::kLinearBias, {cfg.width}, d});
  }
  int d = cfg.depth + 1;
  specs.push_back({"proj.norm_scale", LayerKind::kNormScale, {cfg.width}, d});
  specs.push_back({"proj.norm_shift", LayerKind::kNormShift, {cfg.width}, d});
  specs.push_back({"proj.weight", LayerKind::kLinearWeight, {cfg.width, cfg.embed_dim}, d});
  specs.push_back({"proj.bias", LayerKind::kLinearBias, {cfg.embed_dim}, d});
  return make_specs(std::move(specs));
}

ParamSet init_backbone(const NetConfig& cfg, RngStream rng) {
  auto specs = backbone_specs(cfg);
  std::vector<Tensor> vals;
  vals.reserve(specs->size());
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
      case LayerKind::kLinearBias:
      case LayerKind::kNormShift:
        break;  // zeros
    }
    vals.push_back(std::move(t));
  }
  return ParamSet(std::move(specs), std::move(vals));
}

Var backbone_embed(Tape& tape, const TapedParams& params, const NetConfig& cfg, Var x) {
  const auto& v = params.vars;
  size_t i = 0;
  Var h = tape.matmul(x, v[i++]);
  for (int d = 1; d <= cfg.depth; ++d) {
    Var g = v[i++], s = v[i++], w = v[i++], b = v[i++];
    Var u = tape.add(tape.mul(tape.norm_rows(h), g), s);
    Var a = tape.tanh(tape.add(tape.matmul(u, w), b));
    h = tape.add(h, a);
  }
  Var pg = v[i++], ps = v[i++], pw = v[i++], pb = v[i++];
  Var hn = tape.add(tape.mul(tape.norm_rows(h), pg), ps);
  return tape.add(tape.matmul(hn, pw), pb);
}

Tensor backbone_embed_values(const ParamSet& params, const NetConfig& cfg, const Tensor& x) {
  Tape tape;
  TapedParams tp = lift(tape, params, false);
  Var e = backbone_embed(tape, tp, cfg, tape.constant(x));
  return tape.val(e);
}

}  // namespace smelt
