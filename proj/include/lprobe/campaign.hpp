#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lprobe/analysis.hpp"
#include "lprobe/attack.hpp"
#include "lprobe/sigma.hpp"

namespace lprobe {

struct ClassifierEntry {
  std::string name;
  std::filesystem::path path;
};

struct AnalysisOptions {
  std::size_t group_size = kDefaultGroupSize;
  std::optional<std::filesystem::path> dispositions;
  std::vector<double> bound_grid;
  std::optional<double> magnitude_cap;
  /// Allow records produced under different config hashes.
  bool force_mix = false;
  /// Extra record files; the campaign's own records file is always read.
  std::vector<std::filesystem::path> records;
};

struct RenderOptions {
  float difference_scale = 10.0f;
  std::optional<std::size_t> limit;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t panel_size = 5;
  std::vector<std::string> judges;
  std::filesystem::path vote_log;
  std::filesystem::path manifest;
};

/// Everything a campaign needs, parsed from a JSON file. Relative paths are
/// resolved against the config file's directory.
struct CampaignConfig {
  std::filesystem::path generator;
  std::vector<ClassifierEntry> classifiers;
  std::size_t tuple_count = 0;
  std::uint64_t tuple_seed = 0;
  AttackConfig attack;
  /// Named injection-boundary subsets, e.g. "first-half" -> {1, 4}.
  std::map<std::string, std::vector<std::size_t>> layer_subsets;
  CalibrationOptions calibration;
  std::vector<std::string> label_names;
  std::filesystem::path output_dir = "out";
  std::size_t workers = 1;
  AnalysisOptions analysis;
  RenderOptions render;
  ServeOptions serve;

  static CampaignConfig load(const std::filesystem::path& path);
  static CampaignConfig parse(const std::string& json_text, const std::filesystem::path& base_dir);

  std::string label_name(std::size_t label) const;
};

/// FNV-1a over the canonical attack-relevant configuration and the archive contents.
std::string config_hash(const CampaignConfig& config);

std::string record_to_json(const AttackRecord& record);
AttackRecord record_from_json(const std::string& line);

/// Reads a JSONL record file. A torn final line (interrupted write) is dropped
/// and, when `repair` is set, removed from the file.
std::vector<AttackRecord> read_records(const std::filesystem::path& path, bool repair = false);

std::filesystem::path records_path(const CampaignConfig& config);

struct CampaignSummary {
  std::size_t attempted = 0;
  std::size_t resumed = 0;
  std::size_t success = 0;
  std::size_t exhausted = 0;
  std::size_t skipped = 0;
};

/// Writes sigma into the generator archive in place.
SigmaProfile run_calibration(const CampaignConfig& config);

/// Attacks every (classifier, layer subset, tuple) job not already present in
/// the records file, appending one JSONL line per job.
CampaignSummary run_attack_campaign(const CampaignConfig& config);

struct AnalysisOutputs {
  std::filesystem::path curves_csv, table_csv, tradeoff_csv, summary_json;
};

AnalysisOutputs run_analysis(const CampaignConfig& config, const std::filesystem::path& out_dir);
/// One CSV per (classifier, layer subset) series: magnitude, mean, std.
std::vector<std::filesystem::path> write_plot_data(const CampaignConfig& config, const std::filesystem::path& out_dir);
/// Replays successes and writes PNGs plus a labeling manifest.
std::filesystem::path run_render(const CampaignConfig& config, const std::filesystem::path& out_dir);

DispositionMap read_dispositions(const std::filesystem::path& path);

}  // namespace lprobe
