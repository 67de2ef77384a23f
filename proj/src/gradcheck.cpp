#include "smelt/gradcheck.hpp"

#include <cmath>

namespace smelt {

FdResult finite_difference_check(const std::function<double(const ParamSet&)>& f,
                                 const ParamSet& point, const ParamSet& analytic, double h,
                                 const std::vector<char>* exclude, double floor) {
  if (!point.same_specs(analytic))
    throw ShapeError("finite_difference_check: point and analytic gradient have different specs");
  std::vector<double> flat = point.flatten_view();
  std::vector<double> aflat = analytic.flatten_view();
  FdResult res;
  for (size_t i = 0; i < flat.size(); ++i) {
    if (exclude && (*exclude)[i]) continue;
    double orig = flat[i];
    flat[i] = orig + h;
    double fp = f(point.unflatten(flat));
    flat[i] = orig - h;
    double fm = f(point.unflatten(flat));
    flat[i] = orig;
    double fd = (fp - fm) / (2.0 * h);
    double a = aflat[i];
    double denom = std::max({std::fabs(fd), std::fabs(a), floor});
    double rel = std::fabs(fd - a) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = static_cast<int64_t>(i);
      res.fd_at_worst = fd;
      res.analytic_at_worst = a;
    }
    ++res.n_checked;
  }
  return res;
}

}  // namespace smelt
