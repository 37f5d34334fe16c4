#pragma once

// Interface between the acceptance driver (float build) and the
// finite-difference checks (double build). Kept free of library types so
// each side can include it.

#include <string>

namespace acceptance {

struct FdSummary {
  double max_rel_error = 0;
  std::string worst;  // operation with the largest error
  long checked = 0;   // scalar coordinates compared
};

FdSummary run_fd_checks(int seeds, double eps);

}  // namespace acceptance
