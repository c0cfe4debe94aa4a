#pragma once

// Preference pairs for DPO: one maximal-margin pair per question under a
// PRM or outcome reward, or one pair per step along a greedy step search.

#include "costep/annotate.hpp"
#include "costep/core.hpp"
#include "costep/reward.hpp"
#include "costep/scale.hpp"
#include "costep/trace.hpp"

#include <json.hpp>

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

namespace costep {

enum class MiningRegime { StepAnswerPRM, AnswerOnlyPRM, Outcome, PerStepWise };

inline std::string_view to_string(MiningRegime r) noexcept {
  switch (r) {
    case MiningRegime::StepAnswerPRM: return "step_answer_prm";
    case MiningRegime::AnswerOnlyPRM: return "answer_only_prm";
    case MiningRegime::Outcome: return "outcome";
    case MiningRegime::PerStepWise: return "per_step_wise";
  }
  return "unknown";
}

inline MiningRegime mining_regime_from_string(std::string_view s) {
  for (auto r : {MiningRegime::StepAnswerPRM, MiningRegime::AnswerOnlyPRM, MiningRegime::Outcome,
                 MiningRegime::PerStepWise}) {
    if (s == to_string(r)) return r;
  }
  throw Error("invalid-spec", "unknown mining regime '" + std::string(s) + "'");
}

struct MiningConfig {
  int paths_per_question = 16;
  double margin_threshold = 0.2;
  RewardWeights weights{};
  MiningRegime regime = MiningRegime::StepAnswerPRM;
  int round = 1;

  void validate() const {
    const int min_paths = regime == MiningRegime::PerStepWise ? 1 : 2;
    if (paths_per_question < min_paths) {
      throw Error("invalid-spec", "paths per question must be at least " + std::to_string(min_paths));
    }
    if (!(margin_threshold >= 0.0 && margin_threshold <= 1.0)) throw Error("invalid-spec", "threshold must be in [0, 1]");
    if (round < 1) throw Error("invalid-spec", "round must be at least 1");
    weights.validate();
  }
};

struct PreferencePair {
  std::string question_id;
  Trace chosen;
  Trace rejected;
  double chosen_score = 0.0;
  double rejected_score = 0.0;
  MiningRegime regime = MiningRegime::StepAnswerPRM;
  int round = 1;
  int step = 0;  // per-step pairs only: 1-based step the pair differs at
};

inline nlohmann::ordered_json pair_to_json(const PreferencePair& p, bool with_regime = true) {
  auto body = [](const Trace& t) {
    auto j = trace_to_json(t);
    j.erase("question_id");
    return j;
  };
  nlohmann::ordered_json j;
  j["question_id"] = p.question_id;
  j["chosen"] = body(p.chosen);
  j["rejected"] = body(p.rejected);
  j["chosen_score"] = p.chosen_score;
  j["rejected_score"] = p.rejected_score;
  if (with_regime) j["regime"] = to_string(p.regime);
  j["round"] = p.round;
  if (p.regime == MiningRegime::PerStepWise) {
    j["step"] = p.step;
    j["experimental"] = true;
  }
  return j;
}

inline PreferencePair pair_from_json(const nlohmann::ordered_json& j) {
  PreferencePair p;
  p.question_id = j.at("question_id").get<std::string>();
  p.chosen = trace_from_json(j.at("chosen"));
  p.rejected = trace_from_json(j.at("rejected"));
  p.chosen.question_id = p.rejected.question_id = p.question_id;
  p.chosen_score = j.at("chosen_score").get<double>();
  p.rejected_score = j.at("rejected_score").get<double>();
  p.regime = mining_regime_from_string(j.at("regime").get<std::string>());
  p.round = j.at("round").get<int>();
  p.step = j.value("step", 0);
  return p;
}

struct MiningResult {
  std::vector<PreferencePair> pairs;
  int questions = 0;
  int questions_without_pair = 0;
  SampleBudget budget;
};

namespace detail {

inline void canonicalize(MiningResult& r) {
  std::stable_sort(r.pairs.begin(), r.pairs.end(),
                   [](const PreferencePair& a, const PreferencePair& b) { return a.question_id < b.question_id; });
}

}  // namespace detail

// Samples paths_per_question traces per question and pairs the highest- and
// lowest-scoring ones (earliest sampled among ties) when they clear the
// regime's bar. `scorer` may be null for the Outcome regime.
inline MiningResult mine_pairs(const Policy& policy, const Scorer* scorer, const std::vector<Question>& questions,
                               const MiningConfig& cfg, const ScaleOptions& opt = {}, unsigned jobs = 1) {
  cfg.validate();
  if (cfg.regime == MiningRegime::PerStepWise) throw Error("invalid-spec", "use mine_stepwise_pairs for per-step pairs");
  if (cfg.regime != MiningRegime::Outcome && scorer == nullptr) throw Error("invalid-spec", "PRM regimes need a scorer");
  const RewardWeights w = cfg.regime == MiningRegime::AnswerOnlyPRM ? RewardWeights{0.0} : cfg.weights;

  std::vector<std::optional<PreferencePair>> found(questions.size());
  std::vector<SampleBudget> budgets(questions.size());
  parallel_for(questions.size(), jobs, [&](std::size_t qi) {
    const Question& q = questions[qi];
    auto traces = sample_traces(policy, q, cfg.paths_per_question, opt, budgets[qi]);
    std::vector<double> scores;
    for (const auto& t : traces) {
      if (cfg.regime == MiningRegime::Outcome) {
        scores.push_back(match_answer(t.answer, q.golden, opt.matcher) ? 1.0 : 0.0);
      } else {
        scores.push_back(aggregate(score_trace(*scorer, q.text, t), w));
        ++budgets[qi].scorer_calls;
      }
    }
    const auto hi = argmax_first(scores);
    const auto lo = static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
    const bool keep = cfg.regime == MiningRegime::Outcome ? (scores[hi] == 1.0 && scores[lo] == 0.0)
                                                          : (scores[hi] - scores[lo] > cfg.margin_threshold);
    if (keep) found[qi] = PreferencePair{q.id, traces[hi], traces[lo], scores[hi], scores[lo], cfg.regime, cfg.round, 0};
  });

  MiningResult r;
  r.questions = static_cast<int>(questions.size());
  for (std::size_t i = 0; i < questions.size(); ++i) {
    r.budget += budgets[i];
    if (found[i]) r.pairs.push_back(std::move(*found[i]));
    else ++r.questions_without_pair;
  }
  detail::canonicalize(r);
  return r;
}

// Greedy step search as in step_beam_search with width 1; at every level
// the best and worst sibling form a pair when their scores differ. The
// chain followed is the best candidate at each level.
struct StepwiseChain {
  std::vector<PreferencePair> pairs;
  Trace final_trace;
  SampleBudget budget;
};

inline StepwiseChain mine_stepwise_chain(const Policy& policy, const Scorer& scorer, const Question& q,
                                         const MiningConfig& cfg, const ScaleOptions& opt = {}) {
  StepwiseChain out;
  StepCandidate current;
  current.trace.question_id = q.id;
  for (int level = 1;; ++level) {
    if (level > opt.params.max_steps) {
      throw TruncationError(current.trace, "step-wise mining exceeded " + std::to_string(opt.params.max_steps) +
                                               " steps for " + q.id);
    }
    auto cands = expand_one_step(policy, scorer, q, current, cfg.paths_per_question, opt, out.budget);
    std::vector<double> scores;
    for (const auto& c : cands) scores.push_back(c.score);
    const auto hi = argmax_first(scores);
    const auto lo = static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
    if (scores[hi] > scores[lo]) {
      out.pairs.push_back(
          {q.id, cands[hi].trace, cands[lo].trace, scores[hi], scores[lo], MiningRegime::PerStepWise, cfg.round, level});
    }
    current = std::move(cands[hi]);
    if (current.complete) break;
  }
  out.final_trace = std::move(current.trace);
  return out;
}

inline MiningResult mine_stepwise_pairs(const Policy& policy, const Scorer& scorer,
                                        const std::vector<Question>& questions, const MiningConfig& cfg,
                                        const ScaleOptions& opt = {}, unsigned jobs = 1) {
  cfg.validate();
  if (cfg.regime != MiningRegime::PerStepWise) throw Error("invalid-spec", "step-wise mining needs the per_step_wise regime");
  std::vector<StepwiseChain> chains(questions.size());
  parallel_for(questions.size(), jobs,
               [&](std::size_t i) { chains[i] = mine_stepwise_chain(policy, scorer, questions[i], cfg, opt); });
  MiningResult r;
  r.questions = static_cast<int>(questions.size());
  for (auto& c : chains) {
    r.budget += c.budget;
    if (c.pairs.empty()) ++r.questions_without_pair;
    for (auto& p : c.pairs) r.pairs.push_back(std::move(p));
  }
  detail::canonicalize(r);
  return r;
}

// ---------------------------------------------------------------------------
// Iterative rounds
// ---------------------------------------------------------------------------

struct RoundPlan {
  int round = 0;
  std::string policy_handle;
  std::string reference_handle;
  int target_pairs = 0;

  bool operator==(const RoundPlan&) const = default;
};

// Round r mines with the policy trained in round r-1; the reference stays
// at the SFT model throughout.
inline std::vector<RoundPlan> plan_iterative_rounds(int round_count = 3, const std::string& sft_handle = "sft",
                                                    int target_pairs = 20000) {
  if (round_count < 1) throw Error("invalid-spec", "round count must be at least 1");
  std::vector<RoundPlan> out;
  for (int r = 1; r <= round_count; ++r) {
    out.push_back({r, r == 1 ? sft_handle : "dpo-round-" + std::to_string(r - 1), sft_handle, target_pairs});
  }
  return out;
}

inline nlohmann::ordered_json manifest_to_json(const std::vector<RoundPlan>& plan) {
  nlohmann::ordered_json rounds = nlohmann::ordered_json::array();
  for (const auto& p : plan) {
    rounds.push_back({{"round", p.round},
                      {"policy_handle", p.policy_handle},
                      {"reference_handle", p.reference_handle},
                      {"target_pairs", p.target_pairs}});
  }
  return {{"rounds", rounds}};
}

inline std::vector<RoundPlan> manifest_from_json(const nlohmann::ordered_json& j) {
  std::vector<RoundPlan> out;
  for (const auto& r : j.at("rounds")) {
    out.push_back({r.at("round").get<int>(), r.at("policy_handle").get<std::string>(),
                   r.at("reference_handle").get<std::string>(), r.at("target_pairs").get<int>()});
  }
  return out;
}

}  // namespace costep
