#include "smelt/params.hpp"

#include <cstring>
#include <unordered_set>

namespace smelt {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kEmbedding: return "embedding";
    case LayerKind::kLinearWeight: return "linear_weight";
    case LayerKind::kLinearBias: return "linear_bias";
    case LayerKind::kNormScale: return "norm_scale";
    case LayerKind::kNormShift: return "norm_shift";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "embedding") return LayerKind::kEmbedding;
  if (s == "linear_weight") return LayerKind::kLinearWeight;
  if (s == "linear_bias") return LayerKind::kLinearBias;
  if (s == "norm_scale") return LayerKind::kNormScale;
  if (s == "norm_shift") return LayerKind::kNormShift;
  throw ShapeError("unknown layer kind: " + s);
}

SpecsPtr make_specs(Specs specs) {
  std::unordered_set<std::string> names;
  int last_depth = 0;
  for (const auto& s : specs) {
    if (!names.insert(s.name).second) throw ShapeError("duplicate layer name: " + s.name);
    if (s.depth_index < last_depth)
      throw ShapeError("layer depth_index not consistent with declaration order at " + s.name);
    last_depth = s.depth_index;
    if (shape_numel(s.shape) <= 0) throw ShapeError("empty layer shape: " + s.name);
  }
  return std::make_shared<const Specs>(std::move(specs));
}

ParamSet::ParamSet(SpecsPtr specs, std::vector<Tensor> values)
    : specs_(std::move(specs)), values_(std::move(values)) {
  if (!specs_) throw ShapeError("ParamSet: null specs");
  if (specs_->size() != values_.size())
    throw ShapeError("ParamSet: value count does not match spec count");
  for (size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].shape() != (*specs_)[i].shape)
      throw ShapeError("ParamSet: shape mismatch at layer " + (*specs_)[i].name);
    total_dim_ += values_[i].numel();
  }
}

ParamSet ParamSet::zeros(SpecsPtr specs) {
  std::vector<Tensor> vals;
  vals.reserve(specs->size());
  for (const auto& s : *specs) vals.push_back(Tensor::zeros(s.shape));
  return ParamSet(std::move(specs), std::move(vals));
}

bool ParamSet::values_same(const ParamSet& o) const {
  for (size_t i = 0; i < values_.size(); ++i)
    if (values_[i].data() != o.values_[i].data()) return false;
  return true;
}

std::vector<double> ParamSet::flatten_view() const {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(total_dim_));
  for (const auto& v : values_) flat.insert(flat.end(), v.data().begin(), v.data().end());
  return flat;
}

ParamSet ParamSet::unflatten(const std::vector<double>& flat) const {
  if (static_cast<int64_t>(flat.size()) != total_dim_)
    throw ShapeError("unflatten: length " + std::to_string(flat.size()) + " != total_dim " +
                     std::to_string(total_dim_));
  std::vector<Tensor> vals;
  vals.reserve(values_.size());
  size_t off = 0;
  for (const auto& s : *specs_) {
    size_t n = static_cast<size_t>(shape_numel(s.shape));
    vals.emplace_back(s.shape, std::vector<double>(flat.begin() + off, flat.begin() + off + n));
    off += n;
  }
  return ParamSet(specs_, std::move(vals));
}

namespace {
void require_same_specs(const ParamSet& x, const ParamSet& y, const char* opname) {
  if (!x.same_specs(y)) throw ShapeError(std::string(opname) + ": parameter sets have different specs");
}
}  // namespace

ParamSet axpy(double a, const ParamSet& x, const ParamSet& y) {
  require_same_specs(x, y, "axpy");
  std::vector<Tensor> vals;
  vals.reserve(x.n_layers());
  for (size_t i = 0; i < x.n_layers(); ++i) {
    Tensor t = y.value(i);
    const auto& xd = x.value(i).data();
    for (size_t j = 0; j < t.data().size(); ++j) t.data()[j] += a * xd[j];
    vals.push_back(std::move(t));
  }
  return ParamSet(x.specs(), std::move(vals));
}

ParamSet hadamard(const ParamSet& x, const ParamSet& y) {
  require_same_specs(x, y, "hadamard");
  std::vector<Tensor> vals;
  vals.reserve(x.n_layers());
  for (size_t i = 0; i < x.n_layers(); ++i) {
    Tensor t = x.value(i);
    const auto& yd = y.value(i).data();
    for (size_t j = 0; j < t.data().size(); ++j) t.data()[j] *= yd[j];
    vals.push_back(std::move(t));
  }
  return ParamSet(x.specs(), std::move(vals));
}

ParamSet zeros_like(const ParamSet& x) { return ParamSet::zeros(x.specs()); }

ParamSet ones_like(const ParamSet& x) { return full_like(x, 1.0); }

ParamSet full_like(const ParamSet& x, double v) {
  std::vector<Tensor> vals;
  vals.reserve(x.n_layers());
  for (const auto& s : x.layers()) vals.push_back(Tensor::full(s.shape, v));
  return ParamSet(x.specs(), std::move(vals));
}

double dot(const ParamSet& x, const ParamSet& y) {
  require_same_specs(x, y, "dot");
  double s = 0.0;
  for (size_t i = 0; i < x.n_layers(); ++i) {
    const auto& a = x.value(i).data();
    const auto& b = y.value(i).data();
    for (size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  }
  return s;
}

double squared_norm(const ParamSet& x) { return dot(x, x); }

TapedParams lift(Tape& tape, const ParamSet& p, bool trainable) {
  TapedParams tp;
  tp.specs = p.specs();
  tp.vars.reserve(p.n_layers());
  for (size_t i = 0; i < p.n_layers(); ++i)
    tp.vars.push_back(trainable ? tape.leaf(p.value(i)) : tape.constant(p.value(i)));
  return tp;
}

ParamSet gather_values(const Tape& tape, const TapedParams& tp) {
  std::vector<Tensor> vals;
  vals.reserve(tp.vars.size());
  for (Var v : tp.vars) vals.push_back(tape.val(v));
  return ParamSet(tp.specs, std::move(vals));
}

ParamSet gather_grads(Tape& tape, Var loss, const TapedParams& tp) {
  auto grads = tape.grad(loss, tp.vars);
  return ParamSet(tp.specs, std::move(grads));
}

}  // namespace smelt
