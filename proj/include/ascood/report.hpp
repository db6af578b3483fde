#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ascood/error.hpp"
#include "ascood/metrics.hpp"
#include "ascood/training.hpp"

namespace ascood {

/// Fixed CSV column order for report entries.
inline constexpr const char* kReportCsvHeader = "id_set,ood_set,postprocessor,fpr_at_95,auroc,n_id,n_ood";
inline constexpr const char* kScoresHeader = "sample_id\tlabel\tpostprocessor\tscore\tset";
inline constexpr const char* kTrainLogHeader = "epoch,ce,kl,total,accuracy,alpha,lr";

struct ScoreRecord {
  std::string sample_id;
  bool in_distribution = true;
  std::string postprocessor;
  double score = 0.0;
  std::string set;
  bool operator==(const ScoreRecord&) const = default;
};

namespace detail {

inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["config_digest"] = r.config_digest;
  j["id_accuracy"] = r.id_accuracy;
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"id_set", e.id_set},
                       {"ood_set", e.ood_set},
                       {"postprocessor", e.postprocessor},
                       {"fpr_at_95", e.fpr_at_95},
                       {"auroc", e.auroc},
                       {"n_id", e.n_id},
                       {"n_ood", e.n_ood}});
  }
  j["entries"] = entries;
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_digest = j.at("config_digest").get<std::string>();
    r.id_accuracy = j.at("id_accuracy").get<double>();
    for (const auto& e : j.at("entries")) {
      r.entries.push_back({e.at("id_set").get<std::string>(), e.at("ood_set").get<std::string>(),
                           e.at("postprocessor").get<std::string>(), e.at("fpr_at_95").get<double>(),
                           e.at("auroc").get<double>(), e.at("n_id").get<std::size_t>(),
                           e.at("n_ood").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

inline void write_report_json(const EvalReport& r, const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  out << to_json(r).dump(2) << '\n';
}

inline EvalReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("report " + path.string() + ": " + e.what());
  }
  return eval_report_from_json(j);
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << kReportCsvHeader << '\n';
  for (const auto& e : r.entries) {
    os << e.id_set << ',' << e.ood_set << ',' << e.postprocessor << ',' << detail::fmt(e.fpr_at_95, 4) << ','
       << detail::fmt(e.auroc, 4) << ',' << e.n_id << ',' << e.n_ood << '\n';
  }
  return os.str();
}

inline void write_report_csv(const EvalReport& r, const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  out << report_csv(r);
}

/// Human-readable table, one line per entry.
inline std::string report_summary(const EvalReport& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-16s %-14s %9s %9s\n", "id_set", "ood_set", "postprocessor", "FPR@95",
                "AUROC");
  os << line;
  for (const auto& e : r.entries) {
    std::snprintf(line, sizeof line, "%-16s %-16s %-14s %9.2f %9.2f\n", e.id_set.c_str(), e.ood_set.c_str(),
                  e.postprocessor.c_str(), e.fpr_at_95, e.auroc);
    os << line;
  }
  if (r.id_accuracy >= 0.0) os << "ID accuracy: " << detail::fmt(r.id_accuracy, 2) << "%\n";
  return os.str();
}

inline void write_scores(const std::vector<ScoreRecord>& rows, const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  out << kScoresHeader << '\n';
  for (const auto& r : rows) {
    out << r.sample_id << '\t' << (r.in_distribution ? "ID" : "OOD") << '\t' << r.postprocessor << '\t'
        << detail::exact(r.score) << '\t' << r.set << '\n';
  }
}

inline std::vector<ScoreRecord> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open score file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kScoresHeader) {
    throw FormatError(path.string() + ": missing score header '" + std::string(kScoresHeader) + "'");
  }
  std::vector<ScoreRecord> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split(line, '\t');
    if (f.size() != 5 || (f[1] != "ID" && f[1] != "OOD")) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed score row");
    }
    ScoreRecord r{f[0], f[1] == "ID", f[2], 0.0, f[4]};
    try {
      std::size_t used = 0;
      r.score = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad score '" + f[3] + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_train_log(const std::vector<EpochStats>& history, const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  out << kTrainLogHeader << '\n';
  for (const auto& s : history) {
    out << s.epoch << ',' << detail::fmt(s.ce) << ',' << detail::fmt(s.kl) << ',' << detail::fmt(s.total) << ','
        << detail::fmt(s.accuracy, 3) << ',' << detail::fmt(s.alpha, 4) << ',' << detail::fmt(s.lr, 6) << '\n';
  }
}

}  // namespace ascood
