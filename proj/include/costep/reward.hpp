#pragma once

// Scorer interface, trajectory score aggregation, and the PRM / DPO losses
// as plain functions.

#include "costep/core.hpp"
#include "costep/policy.hpp"
#include "costep/trace.hpp"

#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace costep {

struct StepwiseScores {
  std::vector<double> step_scores;
  std::optional<double> answer_score;  // absent when a partial trace was scored

  double mean_step_score() const {
    return std::accumulate(step_scores.begin(), step_scores.end(), 0.0) / static_cast<double>(step_scores.size());
  }
};

struct RewardWeights {
  double step_weight = 0.2;

  void validate() const {
    if (!(step_weight >= 0.0 && step_weight <= 1.0)) throw Error("invalid-spec", "step weight must be in [0, 1]");
  }
};

// w * mean(step scores) + (1 - w) * answer score.
inline double aggregate(const StepwiseScores& s, RewardWeights w) {
  if (s.step_scores.empty()) throw Error("invalid-scores", "no step scores");
  if (!s.answer_score) throw Error("invalid-scores", "answer score missing; partial traces have no aggregate");
  return w.step_weight * s.mean_step_score() + (1.0 - w.step_weight) * *s.answer_score;
}

class Scorer {
public:
  virtual ~Scorer() = default;
  // Whole trace in, one score per step out. With partial=true the trace's
  // answer is ignored and answer_score comes back empty. Must be safe to call
  // concurrently.
  virtual StepwiseScores score(std::string_view question, const Trace& trace, bool partial) const = 0;
};

using ScorerHandle = std::shared_ptr<const Scorer>;

// Calls the scorer and rejects malformed output instead of clamping it.
inline StepwiseScores score_trace(const Scorer& scorer, std::string_view question, const Trace& trace,
                                  bool partial = false) {
  if (!partial) validate_strict(trace);
  StepwiseScores s = scorer.score(question, trace, partial);
  if (s.step_scores.size() != trace.steps.size()) {
    throw Error("score-count-mismatch", "scorer returned " + std::to_string(s.step_scores.size()) + " scores for " +
                                            std::to_string(trace.steps.size()) + " steps");
  }
  auto check = [](double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("score-out-of-range", "score " + format_double(v) + " outside [0, 1]");
  };
  for (double v : s.step_scores) check(v);
  if (!partial) {
    if (!s.answer_score) throw Error("score-out-of-range", "answer score missing for a complete trace");
    check(*s.answer_score);
  } else {
    s.answer_score.reset();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline constexpr double kProbEpsilon = 1e-12;

// Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps].
inline double prm_bce_loss(const std::vector<double>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw Error("length-mismatch", "predictions and labels differ in length");
  if (predictions.empty()) throw Error("empty-input", "no predictions");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = std::clamp(predictions[i], kProbEpsilon, 1.0 - kProbEpsilon);
    total -= labels[i] != 0 ? std::log(p) : std::log1p(-p);
  }
  return total / static_cast<double>(predictions.size());
}

struct LogProbQuad {
  double logp_policy_chosen = 0.0;
  double logp_policy_rejected = 0.0;
  double logp_ref_chosen = 0.0;
  double logp_ref_rejected = 0.0;
};

inline double dpo_margin(const LogProbQuad& q, double beta) {
  return beta * ((q.logp_policy_chosen - q.logp_ref_chosen) - (q.logp_policy_rejected - q.logp_ref_rejected));
}

// softplus(-z) = -ln sigmoid(z), stable for large |z|.
inline double softplus_neg(double z) { return z > 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double dpo_objective(const LogProbQuad& q, double beta = 0.1) {
  if (!(beta > 0.0)) throw Error("invalid-spec", "beta must be positive");
  return softplus_neg(dpo_margin(q, beta));
}

// Partial derivatives in LogProbQuad field order.
inline std::array<double, 4> dpo_gradient(const LogProbQuad& q, double beta = 0.1) {
  const double g = beta * sigmoid(-dpo_margin(q, beta));
  return {-g, g, g, -g};
}

// ---------------------------------------------------------------------------
// Oracle scorer over simulator traces
// ---------------------------------------------------------------------------

enum class StepTruth { Binary, Continuous };
enum class AnswerTruth { Outcome, LeafState };

struct OracleScorerConfig {
  double sigma_step = 0.0;
  double sigma_answer = 0.0;
  StepTruth step_truth = StepTruth::Binary;
  // Outcome: 1 iff the answer is the golden one. LeafState: the state
  // of the final step, i.e. a scorer that never sees the golden answer.
  AnswerTruth answer_truth = AnswerTruth::Outcome;
  std::uint64_t seed = 0;
};

// Ground truth read from simulator state tags, plus truncated Gaussian
// noise. The noise on step k is keyed by the steps up to k, so scoring a
// partial trace agrees with scoring any completion of it.
class OracleScorer : public Scorer {
public:
  OracleScorer(SimTreeSpec spec, OracleScorerConfig cfg) : spec_(spec), cfg_(cfg) {
    spec_.validate();
    if (!(cfg_.sigma_step >= 0.0) || !(cfg_.sigma_answer >= 0.0)) throw Error("invalid-spec", "noise sigma must be >= 0");
  }

  StepwiseScores score(std::string_view, const Trace& trace, bool partial) const override {
    StepwiseScores out;
    std::string steps_text;
    for (std::size_t k = 0; k < trace.steps.size(); ++k) {
      const SimState s = require_sim_state(trace.steps[k]);
      const double truth = step_truth(s);
      if (k > 0) steps_text += surface(SpecialToken::Proceed);
      steps_text += serialize_steps(std::span(&trace.steps[k], 1));
      Stream rng(KeyBuilder(cfg_.seed).add(trace.question_id).add(steps_text).add(std::uint64_t{1}).key());
      out.step_scores.push_back(rng.truncated_normal(truth, cfg_.sigma_step));
    }
    if (!partial) {
      if (trace.steps.empty()) throw Error("non-simulator-trace", "trace has no steps");
      const double truth = answer_truth(trace);
      Stream rng(KeyBuilder(cfg_.seed).add(trace.question_id).add(steps_text).add(trace.answer).add(std::uint64_t{2}).key());
      out.answer_score = rng.truncated_normal(truth, cfg_.sigma_answer);
    }
    return out;
  }

  double step_truth(SimState s) const {
    if (cfg_.step_truth == StepTruth::Continuous) return exact_success_prob(spec_, s);
    return s.on_good_path ? 1.0 : 0.0;
  }

  double answer_truth(const Trace& trace) const {
    if (cfg_.answer_truth == AnswerTruth::Outcome) {
      return trace.answer == sim_golden_answer(trace.question_id) ? 1.0 : 0.0;
    }
    SimState leaf = require_sim_state(trace.steps.back());
    if (cfg_.step_truth == StepTruth::Continuous) return exact_success_prob(spec_, leaf);
    return leaf.on_good_path ? 1.0 : 0.0;
  }

  const OracleScorerConfig& config() const noexcept { return cfg_; }

private:
  SimTreeSpec spec_;
  OracleScorerConfig cfg_;
};

inline ScorerHandle oracle_scorer(const SimTreeSpec& spec, double noise_sigma, std::uint64_t seed = 0) {
  return std::make_shared<OracleScorer>(spec, OracleScorerConfig{noise_sigma, noise_sigma, StepTruth::Binary,
                                                                 AnswerTruth::Outcome, seed});
}

}  // namespace costep
