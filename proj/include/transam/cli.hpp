// Command-line front end: generate | train | eval | inspect | gradcheck.
//
// Runs are described by an INI-style config file (see README) whose keys
// can be overridden on the command line as --section.key=value.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "transam/eval.hpp"
#include "transam/model.hpp"
#include "transam/synthetic.hpp"
#include "transam/train.hpp"

namespace transam::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kInputError = 2, kNumericAbort = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataPaths {
  std::filesystem::path triples;
  std::filesystem::path train_tasks;
  std::filesystem::path valid_tasks;
  std::filesystem::path test_tasks;
  std::filesystem::path candidates;
  std::filesystem::path pretrained;
  std::size_t max_neighbors = 50;
  std::size_t max_candidates = 500;  // when no candidates file is given
};

struct RunConfig {
  DataPaths data;
  std::optional<SyntheticSpec> synthetic;
  ModelConfig model;
  TrainConfig train;
  std::optional<std::int64_t> warmup_steps;  // default: a tenth of total_steps
  std::optional<std::int64_t> total_steps;   // default: train.steps
  std::filesystem::path out = "out";
  std::uint64_t seed = 1;

  /// Fills the schedule from steps/warmup/total and the seed into train.
  void finalize();
  /// Exactly one data source; referenced files exist; sub-configs valid.
  void validate() const;
};

struct IniDocument {
  std::vector<std::pair<std::string, std::string>> entries;  // "section.key", value
  std::set<std::string> sections;
};

IniDocument parse_ini(std::istream& in, const std::string& source);
IniDocument read_ini(const std::filesystem::path& path);

/// Applies one "section.key" setting. Relative data paths resolve against
/// `base_dir`.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value,
                   const std::filesystem::path& base_dir = {});
void apply_ini(RunConfig& config, const IniDocument& doc, const std::filesystem::path& base_dir);

nlohmann::json metrics_to_json(const RankingMetrics& metrics);
nlohmann::json report_to_json(const RankingReport& report);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace transam::cli
