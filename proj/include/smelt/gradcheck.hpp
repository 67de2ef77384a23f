#pragma once

#include <functional>
#include <vector>

#include "smelt/params.hpp"

namespace smelt {

struct FdResult {
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double fd_at_worst = 0.0;
  double analytic_at_worst = 0.0;
  int64_t n_checked = 0;
};

// Central-difference gradient of f at `point`, compared elementwise against
// `analytic`. Entries with exclude[i]!=0 are skipped (flat indexing over the
// set). Relative error is |fd-a| / max(|fd|,|a|,floor).
FdResult finite_difference_check(const std::function<double(const ParamSet&)>& f,
                                 const ParamSet& point, const ParamSet& analytic, double h,
                                 const std::vector<char>* exclude = nullptr,
                                 double floor = 1e-6);

}  // namespace smelt
