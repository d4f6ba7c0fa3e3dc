#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cmb {

struct CheckResult {
    std::string name;
    bool pass = false;
    double metric = 0.0;    // worst observed value
    double tolerance = 0.0; // pass bound on the metric
};

// Runs the module invariant suite: gradient checks, coupling invertibility,
// KNN and KL oracle agreement, softmax/shape properties, serialization.
std::vector<CheckResult> run_verification(uint64_t seed);

// One JSON object per check: {"name", "status", "metric", "tolerance"}.
// Returns the number of failed checks.
int print_report(const std::vector<CheckResult>& checks, std::ostream& os);

} // namespace cmb
