#pragma once

#include "smelt/params.hpp"

namespace smelt {

// Adam with bias correction. One instance per parameter group.
class Adam {
 public:
  Adam() = default;
  explicit Adam(SpecsPtr specs, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  ParamSet step(const ParamSet& params, const ParamSet& grads, double lr);

  const ParamSet& m() const { return m_; }
  const ParamSet& v() const { return v_; }
  int64_t t() const { return t_; }
  void restore(ParamSet m, ParamSet v, int64_t t);

 private:
  ParamSet m_, v_;
  int64_t t_ = 0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

// One plain gradient-descent step.
ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr);

}  // namespace smelt
