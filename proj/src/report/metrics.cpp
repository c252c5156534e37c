#include "report/metrics.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace xnn::report {

json MetricsRecord::to_json() const {
  return json{{"schema", kMetricsSchema},
              {"run_id", run_id},
              {"config_hash", config_hash},
              {"config", config},
              {"seeds", seeds},
              {"utilities", utilities},
              {"leakages", leakages},
              {"curves", curves},
              {"scalars", scalars},
              {"wall_time_sec", wall_time_sec}};
}

MetricsRecord MetricsRecord::from_json(const json& j) {
  if (!j.is_object())
    throw ParseError(ParseError::Kind::Malformed, "metrics: expected object");
  if (!j.contains("schema") || !j["schema"].is_string())
    throw ParseError(ParseError::Kind::Malformed, "metrics: missing schema");
  if (j["schema"].get<std::string>() != kMetricsSchema)
    throw ParseError(ParseError::Kind::BadVersion,
                     "metrics: unsupported schema \"" +
                         j["schema"].get<std::string>() + "\"");
  MetricsRecord r;
  try {
    r.run_id = j.value("run_id", std::string{});
    r.config_hash = j.value("config_hash", uint64_t{0});
    r.config = j.value("config", json::object());
    r.seeds = j.value("seeds", std::vector<uint64_t>{});
    r.utilities = j.value("utilities", json::object());
    r.leakages = j.value("leakages", json::object());
    r.curves = j.value("curves", json::object());
    r.scalars = j.value("scalars", json::object());
    r.wall_time_sec = j.value("wall_time_sec", 0.0);
  } catch (const json::exception& e) {
    throw ParseError(ParseError::Kind::Malformed,
                     std::string("metrics: bad field: ") + e.what());
  }
  return r;
}

void write_metrics(const MetricsRecord& rec,
                   const std::filesystem::path& path) {
  atomic_write_text(path, rec.to_json().dump(2) + "\n");
}

MetricsRecord read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("metrics: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(ParseError::Kind::Malformed,
                     "metrics: invalid JSON in " + path.string() + ": " +
                         e.what());
  }
  return MetricsRecord::from_json(j);
}

std::vector<MetricsRecord> read_metrics_dir(
    const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw IoError("metrics: not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<MetricsRecord> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_metrics(f));
  return out;
}

namespace {

bool close(double a, double b) { return std::abs(a - b) <= 1e-12; }

}  // namespace

bool verify_totals(const MetricsRecord& rec, std::string* why) {
  auto fail = [&](const std::string& msg) {
    if (why != nullptr) *why = msg;
    return false;
  };
  for (const auto& [name, rep] : rec.leakages.items()) {
    if (!rep.is_object() || !rep.contains("hit_flags"))
      return fail("leakage \"" + name + "\": missing hit_flags");
    const auto& flags = rep["hit_flags"];
    int hits = 0;
    for (const auto& f : flags) hits += f.get<int>() != 0 ? 1 : 0;
    if (rep.value("hits", -1) != hits)
      return fail("leakage \"" + name + "\": hits != hit-flag sum");
    int probes = rep.value("probes", -1);
    if (probes != static_cast<int>(flags.size()))
      return fail("leakage \"" + name + "\": probes != flag count");
    if (probes > 0 &&
        !close(rep.value("leakage", -1.0),
               static_cast<double>(hits) / static_cast<double>(probes)))
      return fail("leakage \"" + name + "\": rate != hits/probes");
  }
  for (const auto& [name, rep] : rec.utilities.items()) {
    if (!rep.is_object()) return fail("utility \"" + name + "\": not object");
    int hits = rep.value("hits", -1);
    int probes = rep.value("probes", -1);
    if (hits < 0 || probes <= 0)
      return fail("utility \"" + name + "\": missing counts");
    if (!close(rep.value("accuracy", -1.0),
               static_cast<double>(hits) / static_cast<double>(probes)))
      return fail("utility \"" + name + "\": accuracy != hits/probes");
  }
  if (why != nullptr) why->clear();
  return true;
}

std::string report_table(const std::vector<MetricsRecord>& records) {
  std::set<std::string> util_names, leak_names;
  for (const auto& r : records) {
    for (const auto& [k, v] : r.utilities.items()) {
      (void)v;
      util_names.insert(k);
    }
    for (const auto& [k, v] : r.leakages.items()) {
      (void)v;
      leak_names.insert(k);
    }
  }
  std::vector<std::string> cols{"run"};
  for (const auto& n : util_names) cols.push_back("util:" + n);
  for (const auto& n : leak_names) cols.push_back("asr:" + n);

  std::vector<std::vector<std::string>> rows;
  for (const auto& r : records) {
    std::vector<std::string> row{r.run_id};
    auto fmt = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", v);
      return std::string(buf);
    };
    for (const auto& n : util_names)
      row.push_back(r.utilities.contains(n)
                        ? fmt(r.utilities[n].value("accuracy", 0.0))
                        : "-");
    for (const auto& n : leak_names)
      row.push_back(r.leakages.contains(n)
                        ? fmt(r.leakages[n].value("leakage", 0.0))
                        : "-");
    rows.push_back(std::move(row));
  }

  std::vector<size_t> width(cols.size());
  for (size_t c = 0; c < cols.size(); ++c) {
    width[c] = cols[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  auto emit_row = [&](const std::vector<std::string>& row) {
    for (size_t c = 0; c < row.size(); ++c) {
      out << (c == 0 ? "" : "  ");
      out << row[c] << std::string(width[c] - row[c].size(), ' ');
    }
    out << "\n";
  };
  emit_row(cols);
  for (size_t c = 0; c < cols.size(); ++c)
    out << (c == 0 ? "" : "  ") << std::string(width[c], '-');
  out << "\n";
  for (const auto& row : rows) emit_row(row);
  return out.str();
}

json strip_volatile(json value) {
  if (value.is_object()) {
    value.erase("wall_time_sec");
    for (auto& [k, v] : value.items()) {
      (void)k;
      v = strip_volatile(v);
    }
  } else if (value.is_array()) {
    for (auto& v : value) v = strip_volatile(v);
  }
  return value;
}

}  // namespace xnn::report
