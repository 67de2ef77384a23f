#include "smelt/optim.hpp"

#include <cmath>

namespace smelt {

Adam::Adam(SpecsPtr specs, double beta1, double beta2, double eps)
    : m_(ParamSet::zeros(specs)), v_(ParamSet::zeros(std::move(specs))), beta1_(beta1), beta2_(beta2), eps_(eps) {}

ParamSet Adam::step(const ParamSet& params, const ParamSet& grads, double lr) {
  if (!params.same_specs(m_) || !grads.same_specs(m_)) throw ShapeError("adam: spec mismatch");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::vector<Tensor> out;
  out.reserve(params.n_layers());
  for (size_t l = 0; l < params.n_layers(); ++l) {
    Tensor p = params.value(l);
    auto& md = m_.value(l).data();
    auto& vd = v_.value(l).data();
    const auto& gd = grads.value(l).data();
    for (size_t j = 0; j < p.data().size(); ++j) {
      md[j] = beta1_ * md[j] + (1.0 - beta1_) * gd[j];
      vd[j] = beta2_ * vd[j] + (1.0 - beta2_) * gd[j] * gd[j];
      double mhat = md[j] / bc1;
      double vhat = vd[j] / bc2;
      p.data()[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    out.push_back(std::move(p));
  }
  return ParamSet(params.specs(), std::move(out));
}

void Adam::restore(ParamSet m, ParamSet v, int64_t t) {
  if (!m.same_specs(v)) throw ShapeError("adam restore: spec mismatch");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr) {
  return axpy(-lr, grads, params);
}

}  // namespace smelt
