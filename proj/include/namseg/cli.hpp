#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace namseg::cli {

enum ExitCode : int { ok = 0, failure = 1, usage = 2 };

// Runs one subcommand (synth, train, segment, eval). `args` excludes the
// program name. Messages go to `out`, errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// key=value lines in the given order.
void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace namseg::cli
