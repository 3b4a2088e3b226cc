#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Finite-difference audit of every differentiable operation plus the full
// four-term loss on a fixed two-object scenario. Deterministic given the
// seed; the CLI surfaces this as the `gradcheck` subcommand.

namespace bevref::diag {

struct CheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

std::vector<CheckRow> op_gradient_checks(std::uint64_t seed);
CheckRow loss_gradient_check(std::uint64_t seed);

std::string check_table(const std::vector<CheckRow>& rows);
bool all_pass(const std::vector<CheckRow>& rows);

}  // namespace bevref::diag
