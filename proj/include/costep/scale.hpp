#pragma once

// Inference-time selection strategies: Pass@N, self-consistency, best-of-N
// reranking and step-level beam search, each with sample-budget accounting.

#include "costep/annotate.hpp"
#include "costep/core.hpp"
#include "costep/policy.hpp"
#include "costep/reward.hpp"
#include "costep/trace.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace costep {

struct Question {
  std::string id;
  std::string text;
  std::string golden;
};

inline std::vector<Question> sim_questions(std::size_t count, std::size_t first_index = 0) {
  std::vector<Question> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string id = sim_question_id(first_index + i);
    out.push_back({id, "Simulated question " + id, sim_golden_answer(id)});
  }
  return out;
}

struct SampleBudget {
  std::int64_t policy_calls = 0;
  std::int64_t continuations_requested = 0;
  std::int64_t steps_generated = 0;
  std::int64_t scorer_calls = 0;

  SampleBudget& operator+=(const SampleBudget& o) {
    policy_calls += o.policy_calls;
    continuations_requested += o.continuations_requested;
    steps_generated += o.steps_generated;
    scorer_calls += o.scorer_calls;
    return *this;
  }
  bool operator==(const SampleBudget&) const = default;
};

struct StrategyOutcome {
  Trace chosen_trace;
  std::string chosen_answer;
  SampleBudget budget;
  int candidates_considered = 0;
};

struct ScaleOptions {
  SamplingParams params{};
  RewardWeights weights{};
  AnswerMatcher matcher{};
  int retry_limit = 3;
  std::uint64_t ordinal = 0;
};

// Raised when beam search hits max_steps; carries the best partial trace.
class TruncationError : public Error {
public:
  TruncationError(Trace partial, const std::string& message) : Error("truncation", message), partial_(std::move(partial)) {}
  const Trace& partial_trace() const noexcept { return partial_; }

private:
  Trace partial_;
};

// N full traces in sampling order.
inline std::vector<Trace> sample_traces(const Policy& policy, const Question& q, int n, const ScaleOptions& opt,
                                        SampleBudget& budget) {
  if (n < 1) throw Error("invalid-spec", "N must be at least 1");
  SamplingParams params = opt.params;
  params.n = n;
  PolicyRequest req{q.id, q.text, "", opt.ordinal, false};
  auto conts = sample_validated(policy, req, params, opt.retry_limit);
  budget.policy_calls += 1;
  budget.continuations_requested += n;
  std::vector<Trace> out;
  out.reserve(conts.size());
  for (const auto& c : conts) {
    budget.steps_generated += c.steps_generated;
    out.push_back(parse_trace_or_throw(c.text, ParseMode::Strict, q.id));
  }
  return out;
}

struct PassResult {
  bool correct = false;
  SampleBudget budget;
};

inline PassResult pass_at_n(const Policy& policy, const Question& q, int n, const ScaleOptions& opt = {}) {
  PassResult r;
  for (const auto& t : sample_traces(policy, q, n, opt, r.budget)) {
    r.correct = r.correct || match_answer(t.answer, q.golden, opt.matcher);
  }
  return r;
}

// Index of the modal answer's earliest member; ties go to the answer
// sampled first.
inline std::size_t majority_index(const std::vector<Trace>& traces, const AnswerMatcher& matcher) {
  struct Group {
    std::size_t first;
    int count;
  };
  std::vector<Group> groups;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
      return match_answer(traces[g.first].answer, traces[i].answer, matcher);
    });
    if (it == groups.end()) groups.push_back({i, 1});
    else ++it->count;
  }
  const Group* best = &groups.front();
  for (const auto& g : groups) {
    if (g.count > best->count) best = &g;
  }
  return best->first;
}

inline StrategyOutcome self_consistency(const Policy& policy, const Question& q, int n, const ScaleOptions& opt = {}) {
  StrategyOutcome out;
  auto traces = sample_traces(policy, q, n, opt, out.budget);
  const auto i = majority_index(traces, opt.matcher);
  out.chosen_trace = traces[i];
  out.chosen_answer = traces[i].answer;
  out.candidates_considered = n;
  return out;
}

// First index with the highest value.
inline std::size_t argmax_first(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct ScoredTraces {
  std::vector<Trace> traces;
  std::vector<StepwiseScores> scores;
};

inline ScoredTraces sample_and_score(const Policy& policy, const Scorer& scorer, const Question& q, int n,
                                     const ScaleOptions& opt, SampleBudget& budget) {
  ScoredTraces out;
  out.traces = sample_traces(policy, q, n, opt, budget);
  for (const auto& t : out.traces) {
    out.scores.push_back(score_trace(scorer, q.text, t));
    ++budget.scorer_calls;
  }
  return out;
}

inline std::size_t best_index(const std::vector<StepwiseScores>& scores, RewardWeights w) {
  std::vector<double> agg;
  agg.reserve(scores.size());
  for (const auto& s : scores) agg.push_back(aggregate(s, w));
  return argmax_first(agg);
}

inline StrategyOutcome best_of_n(const Policy& policy, const Scorer& scorer, const Question& q, int n,
                                 const ScaleOptions& opt = {}) {
  StrategyOutcome out;
  auto scored = sample_and_score(policy, scorer, q, n, opt, out.budget);
  const auto i = best_index(scored.scores, opt.weights);
  out.chosen_trace = scored.traces[i];
  out.chosen_answer = out.chosen_trace.answer;
  out.candidates_considered = n;
  return out;
}

// ---------------------------------------------------------------------------
// Step-level search
// ---------------------------------------------------------------------------

struct StepCandidate {
  std::string prefix_text;  // rollout seed for the next level (partial only)
  Trace trace;              // answer empty while partial
  bool complete = false;
  double score = 0.0;       // aggregate when complete, mean step score otherwise
};

// Samples `n` single-step continuations of `from` and scores them.
inline std::vector<StepCandidate> expand_one_step(const Policy& policy, const Scorer& scorer, const Question& q,
                                                  const StepCandidate& from, int n, const ScaleOptions& opt,
                                                  SampleBudget& budget) {
  SamplingParams params = opt.params;
  params.n = n;
  PolicyRequest req{q.id, q.text, from.prefix_text, opt.ordinal, true};
  auto conts = sample_validated(policy, req, params, opt.retry_limit);
  budget.policy_calls += 1;
  budget.continuations_requested += n;
  std::vector<StepCandidate> out;
  out.reserve(conts.size());
  for (const auto& c : conts) {
    budget.steps_generated += c.steps_generated;
    StepCandidate cand;
    const std::string joined = join_continuation(req.prefix, c.text);
    auto parsed = parse_trace(joined, ParseMode::Strict, q.id);
    if (auto* ok = std::get_if<ParsedTrace>(&parsed)) {
      cand.trace = std::move(ok->trace);
      cand.complete = true;
      cand.score = aggregate(score_trace(scorer, q.text, cand.trace), opt.weights);
    } else {
      cand.trace.question_id = q.id;
      cand.trace.steps = std::get<std::vector<Step>>(parse_prefix(joined));
      cand.prefix_text = joined;
      cand.score = score_trace(scorer, q.text, cand.trace, true).mean_step_score();
    }
    ++budget.scorer_calls;
    out.push_back(std::move(cand));
  }
  return out;
}

// Keeps the b best candidates (earliest first among equal scores) until the
// leading b are all complete. Each partial beam gets an equal share of the
// N candidates per level.
inline StrategyOutcome step_beam_search(const Policy& policy, const Scorer& scorer, const Question& q, int n,
                                        int beam_width = 1, const ScaleOptions& opt = {}) {
  if (n < 1) throw Error("invalid-spec", "N must be at least 1");
  if (beam_width < 1 || beam_width > n) throw Error("invalid-spec", "beam width must be in [1, N]");
  StrategyOutcome out;
  std::vector<StepCandidate> beams(1);
  beams[0].trace.question_id = q.id;
  for (int level = 1;; ++level) {
    if (level > opt.params.max_steps) {
      throw TruncationError(beams.front().trace, "beam search exceeded " + std::to_string(opt.params.max_steps) +
                                                     " steps for " + q.id);
    }
    std::vector<StepCandidate> pool;
    std::size_t partial = 0;
    for (const auto& b : beams) partial += b.complete ? 0 : 1;
    std::size_t share_index = 0;
    for (auto& b : beams) {
      if (b.complete) {
        pool.push_back(std::move(b));
        continue;
      }
      const int share = n / static_cast<int>(partial) + (share_index < n % partial ? 1 : 0);
      ++share_index;
      if (share == 0) continue;
      auto next = expand_one_step(policy, scorer, q, b, share, opt, out.budget);
      out.candidates_considered += static_cast<int>(next.size());
      for (auto& c : next) pool.push_back(std::move(c));
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const StepCandidate& a, const StepCandidate& b) { return a.score > b.score; });
    if (pool.size() > static_cast<std::size_t>(beam_width)) pool.resize(static_cast<std::size_t>(beam_width));
    beams = std::move(pool);
    if (std::all_of(beams.begin(), beams.end(), [](const StepCandidate& c) { return c.complete; })) break;
  }
  out.chosen_trace = std::move(beams.front().trace);
  out.chosen_answer = out.chosen_trace.answer;
  return out;
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

inline constexpr std::string_view kPassAtN = "pass_at_n";
inline constexpr std::string_view kSelfConsistency = "self_consistency";
inline constexpr std::string_view kBestOfN = "best_of_n";
inline constexpr std::string_view kBeamSearch = "step_beam_search";

inline const std::vector<std::string>& all_strategies() {
  static const std::vector<std::string> k{std::string(kPassAtN), std::string(kSelfConsistency), std::string(kBestOfN),
                                          std::string(kBeamSearch)};
  return k;
}

struct SuiteRow {
  std::string strategy;
  int n = 0;
  int questions = 0;
  int correct = 0;
  SampleBudget budget;
  std::int64_t wall_ms = 0;

  double accuracy() const { return questions == 0 ? 0.0 : static_cast<double>(correct) / questions; }
};

// Whether `strategy` answers q correctly with N samples.
inline bool run_strategy(std::string_view strategy, const Policy& policy, const Scorer& scorer, const Question& q,
                         int n, const ScaleOptions& opt, SampleBudget& budget, int beam_width = 1) {
  if (strategy == kPassAtN) {
    auto r = pass_at_n(policy, q, n, opt);
    budget += r.budget;
    return r.correct;
  }
  StrategyOutcome o;
  if (strategy == kSelfConsistency) o = self_consistency(policy, q, n, opt);
  else if (strategy == kBestOfN) o = best_of_n(policy, scorer, q, n, opt);
  else if (strategy == kBeamSearch) o = step_beam_search(policy, scorer, q, n, beam_width, opt);
  else throw Error("invalid-spec", "unknown strategy '" + std::string(strategy) + "'");
  budget += o.budget;
  return match_answer(o.chosen_answer, q.golden, opt.matcher);
}

struct SuiteOptions {
  std::vector<std::string> strategies = all_strategies();
  std::vector<int> n_grid = {1, 2, 4, 8, 16, 32, 64};
  int beam_width = 1;
  unsigned jobs = 1;
  bool record_wall_time = false;
};

// Every (strategy, N) cell sees the same questions and the same sampling
// keys, so cells differ only through the strategy itself.
inline std::vector<SuiteRow> run_strategy_suite(const Policy& policy, const Scorer& scorer,
                                                const std::vector<Question>& questions, const ScaleOptions& opt,
                                                const SuiteOptions& suite) {
  std::vector<SuiteRow> rows;
  for (const auto& strategy : suite.strategies) {
    for (int n : suite.n_grid) {
      const auto started = std::chrono::steady_clock::now();
      std::vector<SampleBudget> budgets(questions.size());
      std::vector<char> correct(questions.size(), 0);
      parallel_for(questions.size(), suite.jobs, [&](std::size_t i) {
        correct[i] = run_strategy(strategy, policy, scorer, questions[i], n, opt, budgets[i], suite.beam_width);
      });
      SuiteRow row{strategy, n, static_cast<int>(questions.size()), 0, {}, 0};
      for (std::size_t i = 0; i < questions.size(); ++i) {
        row.correct += correct[i];
        row.budget += budgets[i];
      }
      if (suite.record_wall_time) {
        row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started)
                          .count();
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace costep
