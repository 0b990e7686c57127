#pragma once

// Pass/fail checks shared by the acceptance test and `fvi selftest`.

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace fvi::checks {

struct CheckResult {
  bool passed = false;
  std::string detail;
};

struct NamedCheck {
  std::string id;
  std::string title;
  std::function<CheckResult()> run;
};

CheckResult check_structured_inversion();
CheckResult check_inversion_scaling();
CheckResult check_kl();
CheckResult check_kernel_mc();
CheckResult check_berhu();
CheckResult check_gradients();
CheckResult check_toy_regression();
CheckResult check_toy_segmentation();
CheckResult check_single_forward();
CheckResult check_determinism();

/// All ten acceptance criteria, in order.
std::vector<NamedCheck> acceptance_checks();
/// The oracle subset that needs no training runs.
std::vector<NamedCheck> selftest_checks();

/// Runs each check, printing one `PASS`/`FAIL` line per check. Exceptions
/// count as failures. Returns true when every check passed.
bool run_checks(const std::vector<NamedCheck>& checks, std::ostream& out);

}  // namespace fvi::checks
