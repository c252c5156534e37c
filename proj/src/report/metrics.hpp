#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

namespace xnn::report {

using json = nlohmann::json;

inline constexpr const char* kMetricsSchema = "xnn-metrics/1";

// One benchmark/run result document. Named sub-objects hold the typed
// reports emitted elsewhere (UtilityReport, LeakageReport, TrainRun JSON);
// scalars carry derived summaries. Self-describing via the schema string.
struct MetricsRecord {
  std::string run_id;
  uint64_t config_hash = 0;
  json config = json::object();  // fully materialized experiment config
  std::vector<uint64_t> seeds;
  json utilities = json::object();  // name -> UtilityReport
  json leakages = json::object();   // name -> LeakageReport
  json curves = json::object();     // name -> TrainRun
  json scalars = json::object();    // name -> number
  double wall_time_sec = 0.0;

  json to_json() const;
  static MetricsRecord from_json(const json& j);
};

// Atomic write (temp + rename); read validates the schema version.
void write_metrics(const MetricsRecord& rec,
                   const std::filesystem::path& path);
MetricsRecord read_metrics(const std::filesystem::path& path);

// All *.json metrics files in a directory, sorted by filename.
std::vector<MetricsRecord> read_metrics_dir(
    const std::filesystem::path& dir);

// Re-derives every stored total from its per-probe evidence: leakage hits
// must equal the hit-flag sum, utility accuracy must equal hits/probes.
// Returns false and explains via *why on the first mismatch.
bool verify_totals(const MetricsRecord& rec, std::string* why);

// Fixed-width comparison table, one row per record; columns are the union of
// utility and leakage names across records.
std::string report_table(const std::vector<MetricsRecord>& records);

// Copy with volatile fields (any "wall_time_sec") removed at every depth;
// determinism checks compare these forms.
json strip_volatile(json value);

}  // namespace xnn::report
