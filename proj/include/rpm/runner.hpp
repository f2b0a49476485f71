#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "rpm/config.hpp"

namespace rpm::runner {

/* Executes one resolved experiment, writing resolved.cfg, report.json,
   free_energy.csv, checkpoints and (for the GP model) latents.csv under
   cfg.out_dir. Returns the process exit code: 0 success, 2 config or
   input-file error, 3 numerical abort (artifacts are still written). */
int run_experiment(const config::ExperimentConfig& cfg, std::ostream& out, std::ostream& err);

/* argv-style entry without the program name: run/validate/datagen take a
   config path, selftest takes none; --seed, --out and --iters override the
   corresponding config fields. Exit codes as above, plus 1 for a selftest
   failure. */
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rpm::runner
