#pragma once

// Step-level correctness labels: Monte-Carlo rollouts from each prefix,
// judge-label fusion, and PRM dataset rows.

#include "costep/core.hpp"
#include "costep/policy.hpp"
#include "costep/trace.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

namespace costep {

// ---------------------------------------------------------------------------
// Answer matching
// ---------------------------------------------------------------------------

struct AnswerMatcher {
  bool case_fold = true;
  bool strip_punctuation = false;
  bool numeric = true;        // parse both sides, compare with abs tolerance
  bool mc_letter = false;     // compare extracted option letters
  double numeric_tolerance = 1e-6;

  static AnswerMatcher exact() { return {false, false, false, false, 1e-6}; }

  // Comma-separated flag list: casefold, strip-punct, numeric, mc-letter,
  // or "exact" for byte equality.
  static AnswerMatcher parse(std::string_view flags) {
    AnswerMatcher m = exact();
    std::size_t pos = 0;
    while (pos <= flags.size()) {
      auto comma = flags.find(',', pos);
      if (comma == std::string_view::npos) comma = flags.size();
      const auto flag = trim(flags.substr(pos, comma - pos));
      if (flag == "casefold") m.case_fold = true;
      else if (flag == "strip-punct") m.strip_punctuation = true;
      else if (flag == "numeric") m.numeric = true;
      else if (flag == "mc-letter") m.mc_letter = true;
      else if (flag != "exact" && !flag.empty()) throw Error("invalid-spec", "unknown matcher flag '" + std::string(flag) + "'");
      pos = comma + 1;
    }
    return m;
  }
};

namespace detail {

inline std::string normalize_answer(std::string_view s, const AnswerMatcher& m) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : trim(s)) {
    if (m.strip_punctuation && std::ispunct(c) && c != '.' && c != '-') continue;
    if (std::isspace(c)) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out += ' ';
    pending_space = false;
    out += static_cast<char>(m.case_fold ? std::tolower(c) : c);
  }
  if (m.strip_punctuation) {
    while (!out.empty() && (out.back() == '.')) out.pop_back();
  }
  return out;
}

inline std::optional<double> as_number(std::string_view s) {
  s = trim(s);
  while (!s.empty() && s.back() == '.') s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<char> extract_choice_letter(const std::string& s) {
  static const std::regex kParenthesized(R"(\(([A-Za-z])\))");
  static const std::regex kAnswerIs(R"(answer\s*(?:is)?\s*:?\s*\(?([A-Za-z])\b)", std::regex::icase);
  static const std::regex kBare(R"(^\s*\(?([A-Za-z])[\).:]?\s*$)");
  std::smatch m;
  std::optional<char> found;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kParenthesized); it != std::sregex_iterator(); ++it) {
    found = (*it)[1].str()[0];
  }
  if (!found && std::regex_search(s, m, kAnswerIs)) found = m[1].str()[0];
  if (!found && std::regex_match(s, m, kBare)) found = m[1].str()[0];
  if (found) found = static_cast<char>(std::toupper(static_cast<unsigned char>(*found)));
  return found;
}

}  // namespace detail

inline bool match_answer(std::string_view pred, std::string_view gold, const AnswerMatcher& m) {
  const std::string a = detail::normalize_answer(pred, m);
  const std::string b = detail::normalize_answer(gold, m);
  if (a == b) return true;
  if (m.numeric) {
    auto x = detail::as_number(a);
    auto y = detail::as_number(b);
    if (x && y) return std::fabs(*x - *y) <= m.numeric_tolerance;
  }
  if (m.mc_letter) {
    auto x = detail::extract_choice_letter(std::string(pred));
    auto y = detail::extract_choice_letter(std::string(gold));
    if (x && y) return *x == *y;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

enum class JudgeLabel { Good, Neutral, Bad };

inline std::string_view to_string(JudgeLabel l) noexcept {
  switch (l) {
    case JudgeLabel::Good: return "Good";
    case JudgeLabel::Neutral: return "Neutral";
    case JudgeLabel::Bad: return "Bad";
  }
  return "Bad";
}

inline JudgeLabel judge_label_from_string(std::string_view s) {
  if (s == "Good") return JudgeLabel::Good;
  if (s == "Neutral") return JudgeLabel::Neutral;
  if (s == "Bad") return JudgeLabel::Bad;
  throw Error("invalid-label", "unknown judge label '" + std::string(s) + "'");
}

enum class AnnotationMethod { MC, Judge };

struct ProcessRecord {
  std::string question_id;
  Trace trace;
  std::vector<double> step_values;
  bool answer_correct = false;
  AnnotationMethod method = AnnotationMethod::MC;
  int rollouts_per_step = 0;
  std::vector<int> valid_rollouts;  // per step, after dropping malformed ones (MC only)
};

inline nlohmann::ordered_json to_json(const ProcessRecord& r) {
  nlohmann::ordered_json j;
  j["question_id"] = r.question_id;
  j["trace"] = trace_to_json(r.trace);
  j["step_values"] = r.step_values;
  j["answer_correct"] = r.answer_correct;
  j["method"] = r.method == AnnotationMethod::MC ? "MC" : "Judge";
  if (r.method == AnnotationMethod::MC) {
    j["rollouts_per_step"] = r.rollouts_per_step;
    j["valid_rollouts"] = r.valid_rollouts;
  }
  return j;
}

inline ProcessRecord process_record_from_json(const nlohmann::ordered_json& j) {
  ProcessRecord r;
  r.question_id = j.at("question_id").get<std::string>();
  r.trace = trace_from_json(j.at("trace"));
  r.step_values = j.at("step_values").get<std::vector<double>>();
  r.answer_correct = j.at("answer_correct").get<bool>();
  r.method = j.at("method").get<std::string>() == "Judge" ? AnnotationMethod::Judge : AnnotationMethod::MC;
  r.rollouts_per_step = j.value("rollouts_per_step", 0);
  if (j.contains("valid_rollouts")) r.valid_rollouts = j.at("valid_rollouts").get<std::vector<int>>();
  if (r.step_values.size() != r.trace.steps.size()) {
    throw Error("invalid-record", "step_values length differs from step count for " + r.question_id);
  }
  for (double v : r.step_values) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("invalid-record", "step value outside [0, 1] for " + r.question_id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Monte-Carlo estimation
// ---------------------------------------------------------------------------

struct McOptions {
  int rollouts = 16;
  // Rollouts use their own ordinal so they are drawn independently of
  // whatever sampling produced the trace under annotation.
  std::uint64_t ordinal = 1;
  int retry_limit = 3;
  unsigned jobs = 1;
  SamplingParams params{};
};

inline ProcessRecord mc_annotate(const Policy& policy, const Trace& trace, std::string_view question_text,
                                 std::string_view golden, const AnswerMatcher& matcher, const McOptions& opt = {}) {
  validate_strict(trace);
  if (opt.rollouts < 1) throw Error("invalid-spec", "rollout count must be at least 1");
  const std::size_t n = trace.steps.size();
  ProcessRecord rec;
  rec.question_id = trace.question_id;
  rec.trace = trace;
  rec.method = AnnotationMethod::MC;
  rec.rollouts_per_step = opt.rollouts;
  rec.step_values.assign(n, 0.0);
  rec.valid_rollouts.assign(n, 0);
  rec.answer_correct = match_answer(trace.answer, golden, matcher);

  SamplingParams params = opt.params;
  params.n = opt.rollouts;
  parallel_for(n, opt.jobs, [&](std::size_t k) {
    PolicyRequest req{trace.question_id, std::string(question_text), prefix_at(trace, k + 1).serialized_text,
                      opt.ordinal, false};
    std::vector<Continuation> conts;
    std::string problem;
    for (int attempt = 0; attempt <= opt.retry_limit; ++attempt) {
      try {
        conts = policy.sample(req, params);
        problem.clear();
        break;
      } catch (const Error& e) {
        problem = e.what();
      }
    }
    if (!problem.empty()) throw Error("policy-failure", problem);
    int valid = 0;
    int hits = 0;
    for (const auto& c : conts) {
      auto parsed = parse_trace(join_continuation(req.prefix, c.text));
      auto* ok = std::get_if<ParsedTrace>(&parsed);
      if (!ok) continue;
      ++valid;
      if (match_answer(ok->trace.answer, golden, matcher)) ++hits;
    }
    if (valid == 0) {
      throw Error("policy-failure", "every rollout from step " + std::to_string(k + 1) + " was malformed");
    }
    rec.valid_rollouts[k] = valid;
    rec.step_values[k] = static_cast<double>(hits) / valid;
  });
  return rec;
}

// ---------------------------------------------------------------------------
// Judge fusion
// ---------------------------------------------------------------------------

// With a correct answer only Bad steps are wrong; otherwise only Good steps
// count as right.
inline std::vector<bool> fuse_judge_labels(const std::vector<JudgeLabel>& labels, bool answer_correct) {
  if (labels.empty()) throw Error("empty-input", "no judge labels");
  std::vector<bool> out;
  out.reserve(labels.size());
  for (auto l : labels) {
    out.push_back(l == JudgeLabel::Good || (answer_correct && l == JudgeLabel::Neutral));
  }
  return out;
}

class Judge {
public:
  virtual ~Judge() = default;
  virtual std::vector<JudgeLabel> judge(std::string_view question, const Trace& trace) const = 0;
};

using JudgeHandle = std::shared_ptr<const Judge>;

// Labels simulator traces from their state tags: a step that leaves the good
// path is Bad, a step that stays on it Good, and a bad-path step that
// recovers Neutral.
class SimJudge : public Judge {
public:
  std::vector<JudgeLabel> judge(std::string_view, const Trace& trace) const override {
    std::vector<JudgeLabel> out;
    bool prev_good = true;
    for (const auto& s : trace.steps) {
      const bool good = require_sim_state(s).on_good_path;
      out.push_back(good ? (prev_good ? JudgeLabel::Good : JudgeLabel::Neutral) : JudgeLabel::Bad);
      prev_good = good;
    }
    return out;
  }
};

inline ProcessRecord judge_annotate(const Judge& judge, const Trace& trace, std::string_view question_text,
                                    std::string_view golden, const AnswerMatcher& matcher) {
  validate_strict(trace);
  auto labels = judge.judge(question_text, trace);
  if (labels.size() != trace.steps.size()) {
    throw Error("label-count-mismatch", "judge returned " + std::to_string(labels.size()) + " labels for " +
                                            std::to_string(trace.steps.size()) + " steps");
  }
  ProcessRecord rec;
  rec.question_id = trace.question_id;
  rec.trace = trace;
  rec.method = AnnotationMethod::Judge;
  rec.answer_correct = match_answer(trace.answer, golden, matcher);
  for (bool ok : fuse_judge_labels(labels, rec.answer_correct)) rec.step_values.push_back(ok ? 1.0 : 0.0);
  return rec;
}

// ---------------------------------------------------------------------------
// PRM dataset rows
// ---------------------------------------------------------------------------

struct PrmRow {
  std::string question_id;
  std::string kind;  // "step" or "answer"
  int step = 0;      // 1-based; the answer row uses step count + 1
  std::string prefix_text;
  int label = 0;
  double soft_value = 0.0;

  bool operator==(const PrmRow&) const = default;
};

inline nlohmann::ordered_json to_json(const PrmRow& r) {
  return {{"question_id", r.question_id}, {"kind", r.kind},   {"step", r.step},
          {"prefix_text", r.prefix_text}, {"label", r.label}, {"soft_value", r.soft_value}};
}

inline PrmRow prm_row_from_json(const nlohmann::ordered_json& j) {
  return {j.at("question_id").get<std::string>(), j.at("kind").get<std::string>(), j.at("step").get<int>(),
          j.at("prefix_text").get<std::string>(),  j.at("label").get<int>(),       j.at("soft_value").get<double>()};
}

// Soft values at or above the threshold become label 1.
inline std::vector<PrmRow> prm_rows(const ProcessRecord& r, double binarize_threshold = 0.5) {
  std::vector<PrmRow> rows;
  const std::size_t n = r.trace.steps.size();
  for (std::size_t k = 0; k < n; ++k) {
    const double v = r.step_values.at(k);
    rows.push_back({r.question_id, "step", static_cast<int>(k + 1), prefix_at(r.trace, k + 1).serialized_text,
                    v >= binarize_threshold ? 1 : 0, v});
  }
  rows.push_back({r.question_id, "answer", static_cast<int>(n + 1), serialize_trace(r.trace),
                  r.answer_correct ? 1 : 0, r.answer_correct ? 1.0 : 0.0});
  return rows;
}

// Streams one JSON row per line; returns the row count.
inline std::size_t emit_prm_dataset(std::istream& records_jsonl, std::ostream& out, double binarize_threshold = 0.5) {
  std::size_t count = 0;
  std::string line;
  while (std::getline(records_jsonl, line)) {
    if (trim(line).empty()) continue;
    const auto rec = process_record_from_json(nlohmann::ordered_json::parse(line));
    for (const auto& row : prm_rows(rec, binarize_threshold)) {
      out << to_json(row).dump() << '\n';
      ++count;
    }
  }
  if (!out) throw Error("io", "failed writing PRM dataset");
  return count;
}

inline std::vector<PrmRow> read_prm_dataset(std::istream& in) {
  std::vector<PrmRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) rows.push_back(prm_row_from_json(nlohmann::ordered_json::parse(line)));
  }
  return rows;
}

}  // namespace costep
