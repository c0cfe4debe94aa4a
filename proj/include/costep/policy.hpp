#pragma once

// Trace generation behind a sampling interface, plus a seeded synthetic
// reasoning tree whose success probabilities are known in closed form.

#include "costep/core.hpp"
#include "costep/trace.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace costep {

// Real backends receive temperature/top_p as pass-through metadata; the
// simulator ignores both.
struct SamplingParams {
  double temperature = 1.0;
  double top_p = 0.95;
  int n = 16;
  int max_steps = 64;

  void validate() const {
    if (!(temperature > 0.0)) throw Error("invalid-spec", "temperature must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw Error("invalid-spec", "top_p must be in (0, 1]");
    if (n < 1) throw Error("invalid-spec", "n must be at least 1");
    if (max_steps < 1) throw Error("invalid-spec", "max_steps must be at least 1");
  }
};

struct PolicyRequest {
  std::string question_id;
  std::string question_text;
  std::string prefix;         // serialized prefix; empty = from scratch
  std::uint64_t ordinal = 0;  // distinguishes repeated identical requests
  bool stop_at_step = false;  // stop after the next step
};

struct Continuation {
  std::string text;
  int steps_generated = 0;
  std::optional<double> log_prob;
};

class Policy {
public:
  virtual ~Policy() = default;
  // Returns exactly params.n continuations. Must be safe to call
  // concurrently.
  virtual std::vector<Continuation> sample(const PolicyRequest& req, const SamplingParams& params) const = 0;
};

using PolicyHandle = std::shared_ptr<const Policy>;

// True when prefix + continuation is a complete strict trace, or, for a
// stop_at_step request, a longer rollout seed.
inline bool continuation_valid(const PolicyRequest& req, const Continuation& c) {
  const std::string joined = join_continuation(req.prefix, c.text);
  if (std::holds_alternative<ParsedTrace>(parse_trace(joined))) return true;
  if (!req.stop_at_step) return false;
  auto steps = parse_prefix(joined);
  return std::holds_alternative<std::vector<Step>>(steps) && joined.size() > req.prefix.size();
}

// Calls the policy, retrying (with a bumped ordinal) when the backend throws
// or any continuation is malformed. Gives up after `retry_limit` retries.
inline std::vector<Continuation> sample_validated(const Policy& policy, PolicyRequest req,
                                                  const SamplingParams& params, int retry_limit = 3) {
  std::string last_problem;
  for (int attempt = 0; attempt <= retry_limit; ++attempt) {
    std::vector<Continuation> out;
    try {
      out = policy.sample(req, params);
    } catch (const Error& e) {
      last_problem = e.what();
      req.ordinal += 0x1000;
      continue;
    }
    bool ok = out.size() == static_cast<std::size_t>(params.n);
    for (const auto& c : out) ok = ok && continuation_valid(req, c);
    if (ok) return out;
    last_problem = "malformed continuation";
    req.ordinal += 0x1000;
  }
  if (last_problem == "malformed continuation") {
    throw Error("malformed-continuation", "policy kept returning malformed continuations for " + req.question_id);
  }
  throw Error("policy-failure", last_problem);
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

struct SimTreeSpec {
  int depth = 3;
  int branching = 4;
  double p_good_given_good = 0.8;
  double p_good_given_bad = 0.0;
  double p_correct_answer_given_good_leaf = 1.0;
  double p_correct_answer_given_bad_leaf = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto prob = [](double p, const char* what) {
      if (!(p >= 0.0 && p <= 1.0)) throw Error("invalid-spec", std::string(what) + " must be in [0, 1]");
    };
    if (depth < 1) throw Error("invalid-spec", "depth must be at least 1");
    if (branching < 1) throw Error("invalid-spec", "branching must be at least 1");
    prob(p_good_given_good, "p_good_given_good");
    prob(p_good_given_bad, "p_good_given_bad");
    prob(p_correct_answer_given_good_leaf, "p_correct_answer_given_good_leaf");
    prob(p_correct_answer_given_bad_leaf, "p_correct_answer_given_bad_leaf");
  }
};

inline nlohmann::ordered_json to_json(const SimTreeSpec& s) {
  return {{"depth", s.depth},
          {"branching", s.branching},
          {"p_good_given_good", s.p_good_given_good},
          {"p_good_given_bad", s.p_good_given_bad},
          {"p_correct_answer_given_good_leaf", s.p_correct_answer_given_good_leaf},
          {"p_correct_answer_given_bad_leaf", s.p_correct_answer_given_bad_leaf},
          {"seed", s.seed}};
}

inline SimTreeSpec sim_spec_from_json(const nlohmann::ordered_json& j) {
  SimTreeSpec s;
  s.depth = j.value("depth", s.depth);
  s.branching = j.value("branching", s.branching);
  s.p_good_given_good = j.value("p_good_given_good", s.p_good_given_good);
  s.p_good_given_bad = j.value("p_good_given_bad", s.p_good_given_bad);
  s.p_correct_answer_given_good_leaf = j.value("p_correct_answer_given_good_leaf", s.p_correct_answer_given_good_leaf);
  s.p_correct_answer_given_bad_leaf = j.value("p_correct_answer_given_bad_leaf", s.p_correct_answer_given_bad_leaf);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

struct SimState {
  bool on_good_path = true;
  int depth_remaining = 0;

  bool operator==(const SimState&) const = default;
};

inline double exact_success_prob(const SimTreeSpec& spec, SimState state) {
  double good = spec.p_correct_answer_given_good_leaf;
  double bad = spec.p_correct_answer_given_bad_leaf;
  for (int d = 1; d <= state.depth_remaining; ++d) {
    const double g = spec.p_good_given_good * good + (1.0 - spec.p_good_given_good) * bad;
    const double b = spec.p_good_given_bad * good + (1.0 - spec.p_good_given_bad) * bad;
    good = g;
    bad = b;
  }
  return state.on_good_path ? good : bad;
}

// State tags live in step names as "[sim:g:2]" (good path, 2 steps left).
inline std::string sim_tag(SimState s) {
  return std::string("[sim:") + (s.on_good_path ? "g" : "b") + ":" + std::to_string(s.depth_remaining) + "]";
}

inline std::optional<SimState> decode_sim_state(std::string_view step_name) {
  const auto at = step_name.rfind("[sim:");
  if (at == std::string_view::npos) return std::nullopt;
  auto rest = step_name.substr(at + 5);
  if (rest.size() < 4 || (rest[0] != 'g' && rest[0] != 'b') || rest[1] != ':') return std::nullopt;
  SimState s;
  s.on_good_path = rest[0] == 'g';
  const char* first = rest.data() + 2;
  const char* last = rest.data() + rest.size();
  auto res = std::from_chars(first, last, s.depth_remaining);
  if (res.ec != std::errc{} || res.ptr == last || *res.ptr != ']' || s.depth_remaining < 0) return std::nullopt;
  return s;
}

// Throws Error{"non-simulator-trace"} when a step carries no tag.
inline SimState require_sim_state(const Step& step) {
  auto s = decode_sim_state(step.name);
  if (!s) throw Error("non-simulator-trace", "step name carries no simulator state tag: '" + step.name + "'");
  return *s;
}

// Depends on the question id only, so every seed agrees on it.
inline std::string sim_golden_answer(std::string_view question_id) {
  return std::to_string(10 + fnv1a(question_id) % 90);
}

inline std::string sim_question_id(std::size_t index) {
  std::string digits = std::to_string(index);
  return "q" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

class SimPolicy : public Policy {
public:
  explicit SimPolicy(SimTreeSpec spec) : spec_(spec) { spec_.validate(); }

  const SimTreeSpec& spec() const noexcept { return spec_; }

  std::vector<Continuation> sample(const PolicyRequest& req, const SamplingParams& params) const override {
    params.validate();
    std::vector<Step> steps;
    SimState state{true, spec_.depth};
    if (!req.prefix.empty()) {
      auto parsed = parse_prefix(req.prefix);
      if (auto* e = std::get_if<ParseError>(&parsed)) throw Error("invalid-request", "bad prefix: " + e->message());
      steps = std::move(std::get<std::vector<Step>>(parsed));
      if (!steps.empty()) state = require_sim_state(steps.back());
    }
    std::vector<Continuation> out;
    out.reserve(static_cast<std::size_t>(params.n));
    for (int i = 0; i < params.n; ++i) out.push_back(rollout(req, params, steps, state, static_cast<std::uint64_t>(i)));
    return out;
  }

private:
  static std::uint64_t draw_key(std::uint64_t seed, const PolicyRequest& req, const std::vector<Step>& steps,
                                std::uint64_t sample_index) {
    return KeyBuilder(seed)
        .add(req.question_id)
        .add(serialize_steps(steps))
        .add(req.ordinal)
        .add(sample_index)
        .key();
  }

  Continuation rollout(const PolicyRequest& req, const SamplingParams& params, std::vector<Step> steps,
                       SimState state, std::uint64_t sample_index) const {
    Continuation c;
    double log_prob = 0.0;
    if (req.prefix.empty()) c.text += surface(SpecialToken::ReasoningStart);
    while (state.depth_remaining > 0) {
      if (c.steps_generated == params.max_steps) return c;  // truncated, fails validation
      Stream rng(draw_key(spec_.seed, req, steps, sample_index));
      const double p_good = state.on_good_path ? spec_.p_good_given_good : spec_.p_good_given_bad;
      const bool good = rng.bernoulli(p_good);
      const auto variant = rng.below(static_cast<std::uint64_t>(spec_.branching));
      log_prob += std::log(good ? p_good : 1.0 - p_good) - std::log(static_cast<double>(spec_.branching));
      state = {good, state.depth_remaining - 1};

      const std::size_t n = steps.size() + 1;
      Step step{"Step " + std::to_string(n) + " " + sim_tag(state),
                "Candidate " + std::to_string(variant) + " for step " + std::to_string(n) + " of " + req.question_id + ".",
                n == 1 ? "Starts from the question." : "Follows from step " + std::to_string(n - 1) + "."};
      if (c.steps_generated > 0) c.text += surface(SpecialToken::Proceed);
      c.text += serialize_steps(std::span(&step, 1));
      steps.push_back(std::move(step));
      ++c.steps_generated;
      if (req.stop_at_step && state.depth_remaining > 0) {
        c.text += surface(SpecialToken::Proceed);
        c.log_prob = log_prob;
        return c;
      }
    }

    Stream rng(KeyBuilder(draw_key(spec_.seed, req, steps, sample_index)).add(std::string_view("answer")).key());
    const double p_correct =
        state.on_good_path ? spec_.p_correct_answer_given_good_leaf : spec_.p_correct_answer_given_bad_leaf;
    const bool correct = rng.bernoulli(p_correct);
    const auto distractor = rng.below(static_cast<std::uint64_t>(spec_.branching));
    const std::string golden = sim_golden_answer(req.question_id);
    c.text += surface(SpecialToken::ReasoningEnd);
    c.text += correct ? golden : std::to_string(std::stoll(golden) + 1 + static_cast<long long>(distractor));
    log_prob += std::log(correct ? p_correct : 1.0 - p_correct);
    if (!correct) log_prob -= std::log(static_cast<double>(spec_.branching));
    c.log_prob = log_prob;
    return c;
  }

  SimTreeSpec spec_;
};

inline PolicyHandle sim_policy(const SimTreeSpec& spec) { return std::make_shared<SimPolicy>(spec); }

}  // namespace costep
