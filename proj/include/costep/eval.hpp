#pragma once

// Experiment harness: step-weight sweeps, scaling curves, PRM accuracy,
// reasoning-length statistics, and deterministic CSV/JSON reports.

#include "costep/annotate.hpp"
#include "costep/core.hpp"
#include "costep/reward.hpp"
#include "costep/scale.hpp"
#include "costep/trace.hpp"

#include <json.hpp>

#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace costep {

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Wilson score interval, z = 1.96.
inline Interval wilson_interval(std::int64_t successes, std::int64_t trials, double z = 1.959963984540054) {
  if (trials <= 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double center = (p + z2 / (2 * n)) / (1 + z2 / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n);
  return {std::max(0.0, std::min(p, center - half)), std::min(1.0, std::max(p, center + half))};
}

struct CurvePoint {
  double x = 0.0;
  std::string tag;
  double accuracy = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::int64_t items = 0;
  SampleBudget budget;

  bool operator==(const CurvePoint&) const = default;
};

inline CurvePoint make_point(double x, std::string tag, std::int64_t correct, std::int64_t items, SampleBudget budget) {
  const auto ci = wilson_interval(correct, items);
  const double acc = items == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(items);
  return {x, std::move(tag), acc, ci.low, ci.high, items, budget};
}

inline std::vector<CurvePoint> scaling_curve(const std::vector<SuiteRow>& rows) {
  std::vector<CurvePoint> out;
  for (const auto& r : rows) out.push_back(make_point(r.n, r.strategy, r.correct, r.questions, r.budget));
  return out;
}

// Best-of-N accuracy per step weight. Candidates and their scores are drawn
// once per question; weights only change the ranking.
inline std::vector<CurvePoint> weight_sweep(const Policy& policy, const Scorer& scorer,
                                            const std::vector<Question>& questions, const std::vector<double>& grid,
                                            int n = 16, const ScaleOptions& opt = {}, unsigned jobs = 1) {
  for (double w : grid) RewardWeights{w}.validate();
  std::vector<ScoredTraces> scored(questions.size());
  std::vector<SampleBudget> budgets(questions.size());
  parallel_for(questions.size(), jobs, [&](std::size_t i) {
    scored[i] = sample_and_score(policy, scorer, questions[i], n, opt, budgets[i]);
  });
  SampleBudget total;
  for (const auto& b : budgets) total += b;
  std::vector<CurvePoint> out;
  for (double w : grid) {
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < questions.size(); ++i) {
      const auto& t = scored[i].traces[best_index(scored[i].scores, RewardWeights{w})];
      correct += match_answer(t.answer, questions[i].golden, opt.matcher) ? 1 : 0;
    }
    out.push_back(make_point(w, "best_of_n", correct, static_cast<std::int64_t>(questions.size()), total));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PRM accuracy
// ---------------------------------------------------------------------------

struct PrmAccuracyReport {
  double step_accuracy = 0.0;
  double answer_accuracy = 0.0;
  std::string split = "seen";
  double threshold = 0.5;
  std::int64_t steps = 0;
  std::int64_t answers = 0;
};

// A score at or above the threshold predicts a positive label. Step labels
// come from the records' step values at 0.5 (ties positive).
inline PrmAccuracyReport prm_accuracy(const std::vector<ProcessRecord>& records, const Scorer& scorer,
                                      double threshold = 0.5, std::string split = "seen") {
  PrmAccuracyReport rep;
  rep.split = std::move(split);
  rep.threshold = threshold;
  std::int64_t step_hits = 0;
  std::int64_t answer_hits = 0;
  for (const auto& r : records) {
    const auto s = score_trace(scorer, "", r.trace);
    for (std::size_t k = 0; k < s.step_scores.size(); ++k) {
      step_hits += (s.step_scores[k] >= threshold) == (r.step_values.at(k) >= 0.5) ? 1 : 0;
      ++rep.steps;
    }
    answer_hits += (*s.answer_score >= threshold) == r.answer_correct ? 1 : 0;
    ++rep.answers;
  }
  if (rep.steps == 0 || rep.answers == 0) throw Error("empty-input", "no labeled items");
  rep.step_accuracy = static_cast<double>(step_hits) / static_cast<double>(rep.steps);
  rep.answer_accuracy = static_cast<double>(answer_hits) / static_cast<double>(rep.answers);
  return rep;
}

inline nlohmann::ordered_json to_json(const PrmAccuracyReport& r) {
  return {{"split", r.split},
          {"threshold", r.threshold},
          {"step_accuracy", r.step_accuracy},
          {"answer_accuracy", r.answer_accuracy},
          {"steps", r.steps},
          {"answers", r.answers}};
}

// ---------------------------------------------------------------------------
// Reasoning length
// ---------------------------------------------------------------------------

struct LengthStat {
  int round = 0;
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
  std::int64_t traces = 0;

  bool operator==(const LengthStat&) const = default;
};

inline std::vector<LengthStat> step_length_stats(const std::map<int, std::vector<Trace>>& rounds) {
  std::vector<LengthStat> out;
  for (const auto& [round, traces] : rounds) {
    if (traces.empty()) throw Error("empty-input", "round " + std::to_string(round) + " has no traces");
    double sum = 0.0;
    for (const auto& t : traces) sum += static_cast<double>(t.steps.size());
    const double mean = sum / static_cast<double>(traces.size());
    double sq = 0.0;
    for (const auto& t : traces) sq += (static_cast<double>(t.steps.size()) - mean) * (static_cast<double>(t.steps.size()) - mean);
    out.push_back({round, mean, std::sqrt(sq / static_cast<double>(traces.size())),
                   static_cast<std::int64_t>(traces.size())});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// Hash of the config with keys sorted, so field order in the file is
// irrelevant but every value counts.
inline std::string config_hash(const nlohmann::ordered_json& config) {
  const nlohmann::json sorted = nlohmann::json::parse(config.dump());
  return hex64(fnv1a(sorted.dump()));
}

struct ReportHeader {
  std::uint64_t seed = 0;
  std::string config_hash;
};

namespace detail {

inline void write_header(std::ostream& out, const ReportHeader& h) {
  out << "# seed=" << h.seed << "\n# config_hash=" << h.config_hash << '\n';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

// Skips "# key=value" header lines (recording them) and the column row.
inline std::vector<std::vector<std::string>> read_csv_body(std::istream& in, ReportHeader* header,
                                                           std::string_view expected_columns) {
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool saw_columns = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.starts_with("# ")) {
      if (header && line.starts_with("# seed=")) header->seed = std::stoull(line.substr(7));
      if (header && line.starts_with("# config_hash=")) header->config_hash = line.substr(14);
      continue;
    }
    if (!saw_columns) {
      if (line != expected_columns) throw Error("parse", "unexpected CSV columns: " + line);
      saw_columns = true;
      continue;
    }
    rows.push_back(split_csv_line(line));
  }
  return rows;
}

}  // namespace detail

inline constexpr std::string_view kCurveColumns =
    "x,tag,accuracy,ci_low,ci_high,items,policy_calls,steps_generated,scorer_calls";

inline void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& points, const ReportHeader& h) {
  detail::write_header(out, h);
  out << kCurveColumns << '\n';
  for (const auto& p : points) {
    out << format_double(p.x) << ',' << p.tag << ',' << format_double(p.accuracy) << ',' << format_double(p.ci_low)
        << ',' << format_double(p.ci_high) << ',' << p.items << ',' << p.budget.policy_calls << ','
        << p.budget.steps_generated << ',' << p.budget.scorer_calls << '\n';
  }
}

inline std::vector<CurvePoint> read_curve_csv(std::istream& in, ReportHeader* header = nullptr) {
  std::vector<CurvePoint> out;
  for (const auto& c : detail::read_csv_body(in, header, kCurveColumns)) {
    if (c.size() != 9) throw Error("parse", "curve row needs 9 cells");
    CurvePoint p;
    p.x = parse_double(c[0]);
    p.tag = c[1];
    p.accuracy = parse_double(c[2]);
    p.ci_low = parse_double(c[3]);
    p.ci_high = parse_double(c[4]);
    p.items = std::stoll(c[5]);
    p.budget.policy_calls = std::stoll(c[6]);
    p.budget.steps_generated = std::stoll(c[7]);
    p.budget.scorer_calls = std::stoll(c[8]);
    out.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::ordered_json curve_to_json(const std::vector<CurvePoint>& points, const ReportHeader& h) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& p : points) {
    arr.push_back({{"x", p.x},
                   {"tag", p.tag},
                   {"accuracy", p.accuracy},
                   {"ci_low", p.ci_low},
                   {"ci_high", p.ci_high},
                   {"items", p.items},
                   {"policy_calls", p.budget.policy_calls},
                   {"steps_generated", p.budget.steps_generated},
                   {"scorer_calls", p.budget.scorer_calls}});
  }
  return {{"seed", h.seed}, {"config_hash", h.config_hash}, {"points", arr}};
}

inline constexpr std::string_view kSuiteColumns = "strategy,N,accuracy,policy_calls,steps_generated,scorer_calls,wall_ms";

inline void write_suite_csv(std::ostream& out, const std::vector<SuiteRow>& rows, const ReportHeader& h) {
  detail::write_header(out, h);
  out << kSuiteColumns << '\n';
  for (const auto& r : rows) {
    out << r.strategy << ',' << r.n << ',' << format_double(r.accuracy()) << ',' << r.budget.policy_calls << ','
        << r.budget.steps_generated << ',' << r.budget.scorer_calls << ',' << r.wall_ms << '\n';
  }
}

inline constexpr std::string_view kLengthColumns = "round,mean_steps,sd_steps,traces";

inline void write_length_csv(std::ostream& out, const std::vector<LengthStat>& stats, const ReportHeader& h) {
  detail::write_header(out, h);
  out << kLengthColumns << '\n';
  for (const auto& s : stats) {
    out << s.round << ',' << format_double(s.mean) << ',' << format_double(s.sd) << ',' << s.traces << '\n';
  }
}

inline std::vector<LengthStat> read_length_csv(std::istream& in, ReportHeader* header = nullptr) {
  std::vector<LengthStat> out;
  for (const auto& c : detail::read_csv_body(in, header, kLengthColumns)) {
    if (c.size() != 4) throw Error("parse", "length row needs 4 cells");
    out.push_back({std::stoi(c[0]), parse_double(c[1]), parse_double(c[2]), std::stoll(c[3])});
  }
  return out;
}

}  // namespace costep
