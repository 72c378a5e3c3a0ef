#pragma once

// The command surface behind the flexdit tool. Every command reads a
// resolved Config, writes its artifacts into run.out under an exclusive lock
// and finishes with manifest.json there.

#include "flexdit/config.hpp"
#include "flexdit/io.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace flexdit::cli {

// Built-in defaults for every key a command may read.
Config make_config();

// "train", "flexify", "sample", "flops", "pack-plan", "analyze filter-step",
// "analyze divergence", "analyze activation-distance", "analyze diversity",
// "dataset generate", "dataset inspect".
const std::vector<std::string>& command_names();

// Runs one command. `out` receives the report, `log` progress lines.
RunManifest run_command(const std::string& command, const Config& cfg, std::ostream& out, std::ostream& log);

struct ReplayReport {
    std::vector<std::string> matched;
    std::vector<std::string> mismatched;  // artifact differs or is missing
    bool metrics_match = true;
    bool ok() const { return mismatched.empty() && metrics_match; }
};

// Reruns a manifest into `out_dir` after checking that its inputs are
// unchanged, then compares every artifact hash and the metrics.
ReplayReport replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out,
                    std::ostream& log);

// 2 for configuration errors, 3 for data errors, 1 otherwise.
int exit_code(const std::exception& e);

}  // namespace flexdit::cli
