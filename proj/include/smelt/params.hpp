#pragma once

#include <memory>
#include <string>
#include <vector>

#include "smelt/tape.hpp"
#include "smelt/tensor.hpp"

namespace smelt {

enum class LayerKind : uint8_t {
  kEmbedding,
  kLinearWeight,
  kLinearBias,
  kNormScale,
  kNormShift,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& s);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kLinearWeight;
  Shape shape;
  int depth_index = 0;

  int64_t numel() const { return shape_numel(shape); }
  bool operator==(const LayerSpec& o) const = default;
};

using Specs = std::vector<LayerSpec>;
using SpecsPtr = std::shared_ptr<const Specs>;

SpecsPtr make_specs(Specs specs);  // validates unique names / depth order

// A structured, layer-addressed parameter vector. Values are immutable by
// convention; all arithmetic returns new sets.
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(SpecsPtr specs, std::vector<Tensor> values);

  static ParamSet zeros(SpecsPtr specs);

  const SpecsPtr& specs() const { return specs_; }
  const Specs& layers() const { return *specs_; }
  size_t n_layers() const { return values_.size(); }
  int64_t total_dim() const { return total_dim_; }

  const Tensor& value(size_t i) const { return values_[i]; }
  Tensor& value(size_t i) { return values_[i]; }
  const std::vector<Tensor>& values() const { return values_; }

  bool same_specs(const ParamSet& o) const { return specs_ == o.specs_ || *specs_ == *o.specs_; }

  std::vector<double> flatten_view() const;
  ParamSet unflatten(const std::vector<double>& flat) const;  // same specs, new values

  bool operator==(const ParamSet& o) const { return same_specs(o) && values_same(o); }

 private:
  bool values_same(const ParamSet& o) const;

  SpecsPtr specs_;
  std::vector<Tensor> values_;
  int64_t total_dim_ = 0;
};

// a*x + y
ParamSet axpy(double a, const ParamSet& x, const ParamSet& y);
ParamSet hadamard(const ParamSet& x, const ParamSet& y);
ParamSet zeros_like(const ParamSet& x);
ParamSet ones_like(const ParamSet& x);
ParamSet full_like(const ParamSet& x, double v);

double dot(const ParamSet& x, const ParamSet& y);
double squared_norm(const ParamSet& x);

// Per-layer handles for a ParamSet lifted onto a tape.
struct TapedParams {
  SpecsPtr specs;
  std::vector<Var> vars;
};

TapedParams lift(Tape& tape, const ParamSet& p, bool trainable);
ParamSet gather_values(const Tape& tape, const TapedParams& tp);
ParamSet gather_grads(Tape& tape, Var loss, const TapedParams& tp);

}  // namespace smelt
