#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace protofed {

struct SuiteResult {
  bool passed = false;
  std::string detail;
};

struct PropertySuite {
  std::string id;
  std::string name;
  std::function<SuiteResult()> run;
};

/// The oracle and property checks shared by `selftest` and the acceptance run.
const std::vector<PropertySuite>& property_suites();

/// Runs every suite, printing one PASS/FAIL line each. True when all pass.
bool run_property_suites(std::ostream& out);

}  // namespace protofed
