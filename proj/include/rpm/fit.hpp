#pragma once

#include <map>
#include <string>
#include <vector>

namespace rpm {

struct FitOptions {
  int iters = 100;
  int msteps_per_estep = 1;
  double lr = 1e-3;
  int mc_samples = 20;       // reparametrised draws for Monte-Carlo E-steps
  int estep_sweeps = 200;    // coordinate-ascent budget for closed-form E-steps
  double estep_tol = 1e-8;
  std::uint64_t seed = 0;
};

struct TracePoint {
  int iteration = 0;
  char phase = 'E';  // 'E' or 'M'
  double value = 0.0;
  double seconds = 0.0;  // wall time since fit start
};

struct FitReport {
  std::vector<TracePoint> trace;
  std::map<std::string, double> metrics;
  std::vector<std::string> warnings;
  bool aborted = false;
  std::string abort_reason;

  double final_free_energy() const { return trace.empty() ? 0.0 : trace.back().value; }
};

}  // namespace rpm
