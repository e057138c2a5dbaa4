#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace protodist {

struct CheckResult {
  std::string name;
  bool passed;
  std::string detail;
};

// Gradient and oracle property suites behind the `selftest` subcommand.
// Each check recomputes its expectation independently of the code under
// test (finite differences, brute-force loops, exhaustive enumeration).
std::vector<CheckResult> run_selftests(std::uint64_t seed);

}  // namespace protodist
