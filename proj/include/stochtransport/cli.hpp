#pragma once
// Experiment front end: strict JSON configuration, orchestration of the
// library modules, and reproducible artifacts (manifest, data, summary).
//
// Exit codes: 0 all checks passed, 1 a check failed, 2 invalid configuration,
// 3 numerical failure.
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace stochtransport::cli {

using nlohmann::json;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kInvalidConfig = 2, kNumericalFailure = 3 };

/// Validates a raw configuration and returns it with every default filled
/// in. A manifest written by run() is accepted as well (its "config" member
/// is used). Throws ConfigError naming the offending field.
json resolve_config(const json& raw);

struct Outcome {
    std::map<std::string, std::string> files;  // data files by name
    json summary;
    bool pass = true;
    std::string table;  // name of the file that feeds a sweep's combined CSV
};

/// Runs the experiment of a resolved configuration. Output is independent of
/// `workers`.
Outcome execute(const json& resolved, unsigned workers, bool emit_paths);

/// Git blob hash: SHA-1 of "blob <size>\0<content>", lowercase hex.
std::string git_blob_sha1(std::string_view content);

struct RunRequest {
    std::filesystem::path config;
    std::filesystem::path out;
    std::optional<std::uint64_t> seed;
    unsigned workers = 1;
    bool emit_paths = false;
    std::optional<std::string> sweep;  // key=v1,v2,...
};

/// Reads, runs, writes manifest.json, summary.json and the data files.
/// Returns one of ExitCode; diagnostics go to `log`.
int run(const RunRequest& req, std::ostream& log);

/// Command-line entry point.
int main_entry(int argc, char** argv);

}  // namespace stochtransport::cli
