// Acceptance suite: one PASS/FAIL line per exit criterion, exit status 1 if
// any criterion fails. Runs on the simulator backend only.

#include "costep/cli.hpp"

#include "generators.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>

using namespace costep;
using Json = nlohmann::ordered_json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, const std::function<Verdict()>& fn) {
  const auto started = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = fn();
  } catch (const std::exception& e) {
    v = {false, std::string("threw: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  std::printf("%s  %-28s %s (%.1fs)\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(), secs);
  std::fflush(stdout);
  if (!v.pass) ++failures;
}

double elapsed_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Upper tail of Binomial(n, 1/2): P(X >= k).
double sign_test_p(int k, int n) {
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int i = k; i <= n; ++i) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::numbers::ln2);
  }
  return std::min(1.0, p);
}

cli::RunConfig config(std::initializer_list<std::pair<const char*, Json>> overrides) {
  cli::RunConfig cfg;
  for (const auto& [k, v] : overrides) {
    if (!cfg.values.contains(k)) throw Error("invalid-spec", std::string("unknown key ") + k);
    cfg.values[k] = v;
  }
  return cfg;
}

constexpr std::uint64_t kSeed = 2025;

// ---- criteria -----------------------------------------------------------------

Verdict parser_round_trip() {
  const auto started = std::chrono::steady_clock::now();
  Stream rng(kSeed);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const Trace t = gen::random_trace(rng);
    const auto r = parse_trace(serialize_trace(t), ParseMode::Strict, t.question_id);
    const auto* ok = std::get_if<ParsedTrace>(&r);
    if (!ok || !(ok->trace == t) || !ok->violations.empty()) ++mismatches;
  }
  // Fuzz: half uniformly random bytes, half token surfaces mixed with junk.
  int crashes = 0;
  for (int i = 0; i < 100000; ++i) {
    std::string s;
    const auto len = rng.below(160);
    if (i % 2 == 0) {
      for (std::uint64_t k = 0; k < len; ++k) s.push_back(static_cast<char>(rng.below(256)));
    } else {
      for (std::uint64_t k = 0; k < len / 8; ++k) {
        if (rng.bernoulli(0.6)) s += surface(static_cast<SpecialToken>(rng.below(kSpecialTokenCount)));
        else s += gen::random_payload(rng, true);
      }
    }
    try {
      (void)parse_trace(s, ParseMode::Strict);
      (void)parse_trace(s, ParseMode::Lenient);
      (void)parse_prefix(s);
    } catch (...) {
      ++crashes;
    }
  }
  const double secs = elapsed_since(started);
  return {mismatches == 0 && crashes == 0 && secs < 30.0,
          fmt("1000 round-trips, %d mismatches; 100000 fuzz inputs, %d exceptions; %.1fs < 30s", mismatches, crashes,
              secs)};
}

Verdict fusion_truth_table() {
  struct Case {
    JudgeLabel label;
    bool answer;
    bool expected;
  };
  const Case cases[] = {{JudgeLabel::Good, true, true},     {JudgeLabel::Good, false, true},
                        {JudgeLabel::Neutral, true, true},  {JudgeLabel::Neutral, false, false},
                        {JudgeLabel::Bad, true, false},     {JudgeLabel::Bad, false, false}};
  int right = 0;
  for (const auto& c : cases) right += fuse_judge_labels({c.label}, c.answer).front() == c.expected ? 1 : 0;
  return {right == 6, fmt("%d/6 cases", right)};
}

Verdict mc_vs_oracle() {
  const auto started = std::chrono::steady_clock::now();
  struct Setting {
    int depth;
    double p_gg, p_gb, a_g, a_b;
  };
  const Setting settings[] = {{3, 0.8, 0.0, 1.0, 0.0}, {3, 0.6, 0.2, 0.9, 0.1}, {4, 0.7, 0.3, 0.8, 0.2},
                              {2, 0.5, 0.5, 0.95, 0.3}};
  const int n = 4096;
  int states = 0;
  int within = 0;
  std::uint64_t spec_seed = kSeed;
  for (const auto& st : settings) {
    SimTreeSpec spec;
    spec.depth = st.depth;
    spec.branching = 4;
    spec.p_good_given_good = st.p_gg;
    spec.p_good_given_bad = st.p_gb;
    spec.p_correct_answer_given_good_leaf = st.a_g;
    spec.p_correct_answer_given_bad_leaf = st.a_b;
    spec.seed = spec_seed++;
    SimPolicy policy(spec);
    for (bool good : {true, false}) {
      Trace t;
      t.question_id = sim_question_id(static_cast<std::size_t>(states));
      for (int k = 1; k <= st.depth; ++k) {
        t.steps.push_back({"Step " + std::to_string(k) + " " + sim_tag({good, st.depth - k}), "Fixed thought.",
                           k == 1 ? "Starts from the question." : "Follows from the previous step."});
      }
      t.answer = sim_golden_answer(t.question_id);
      McOptions opt;
      opt.rollouts = n;
      const auto rec = mc_annotate(policy, t, "", t.answer, AnswerMatcher{}, opt);
      for (int k = 0; k < st.depth; ++k) {
        const double p = exact_success_prob(spec, {good, st.depth - k - 1});
        const double tol = 3.0 * std::sqrt(p * (1 - p) / n);
        ++states;
        within += std::fabs(rec.step_values[static_cast<std::size_t>(k)] - p) <= tol ? 1 : 0;
      }
    }
  }
  const double share = static_cast<double>(within) / states;
  const double secs = elapsed_since(started);
  return {states >= 20 && share >= 0.95 && secs < 120.0,
          fmt("%d/%d states within 3 sigma at N=4096 (%.1f%% >= 95%%); %.1fs < 120s", within, states, 100 * share, secs)};
}

Verdict aggregation_boundaries() {
  Stream rng(kSeed);
  int bad = 0;
  for (int i = 0; i < 10000; ++i) {
    StepwiseScores s;
    const auto len = 1 + rng.below(12);
    for (std::uint64_t k = 0; k < len; ++k) s.step_scores.push_back(rng.uniform());
    s.answer_score = rng.uniform();
    double mean = 0.0;
    for (double v : s.step_scores) mean += v;
    mean /= static_cast<double>(len);
    if (aggregate(s, {0.0}) != *s.answer_score) ++bad;
    if (std::fabs(aggregate(s, {1.0}) - mean) > 4 * std::numeric_limits<double>::epsilon()) ++bad;
  }
  const double hand = aggregate({{0.5, 1.0}, 0.8}, {0.2});
  const bool hand_ok = std::fabs(hand - 0.79) <= 1e-12;
  return {bad == 0 && hand_ok, fmt("10000 random endpoint checks, %d off; hand case %.15f vs 0.79", bad, hand)};
}

Verdict loss_functions() {
  const double bce = prm_bce_loss({0.5}, {1});
  const double dpo = dpo_objective({-4.0, -9.0, -4.0, -9.0});
  Stream rng(kSeed);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double beta = 0.01 + rng.uniform();
    const LogProbQuad q{-30 * rng.uniform(), -30 * rng.uniform(), -30 * rng.uniform(), -30 * rng.uniform()};
    const auto g = dpo_gradient(q, beta);
    for (int k = 0; k < 4; ++k) {
      auto at = [&](double d) {
        LogProbQuad b = q;
        double* f[] = {&b.logp_policy_chosen, &b.logp_policy_rejected, &b.logp_ref_chosen, &b.logp_ref_rejected};
        *f[k] += d;
        return dpo_objective(b, beta);
      };
      const double h = 1e-5;
      const double fd = (at(h) - at(-h)) / (2 * h);
      const double rel = std::fabs(g[static_cast<std::size_t>(k)] - fd) / std::max(std::fabs(fd), 1e-6);
      worst = std::max(worst, rel);
    }
  }
  const bool ok = std::fabs(bce - std::numbers::ln2) <= 1e-12 && std::fabs(dpo - std::numbers::ln2) <= 1e-12 && worst <= 1e-6;
  return {ok, fmt("bce(0.5|1)-ln2 = %.1e, dpo(0)-ln2 = %.1e, worst gradient rel. error %.1e over 100 points", bce - std::numbers::ln2,
                  dpo - std::numbers::ln2, worst)};
}

Verdict pass_at_n_closed_form() {
  const auto started = std::chrono::steady_clock::now();
  const auto cfg = config({{"seed", kSeed}, {"depth", 3}, {"p_good_given_good", 0.8}});
  const auto policy = cfg.policy();
  const double p = exact_success_prob(cfg.spec(), {true, 3});
  const double expected = 1.0 - std::pow(1.0 - p, 4);
  const int questions = 20000;
  std::vector<char> hit(questions);
  const auto qs = sim_questions(questions);
  parallel_for(qs.size(), default_jobs(), [&](std::size_t i) { hit[i] = pass_at_n(*policy, qs[i], 4).correct; });
  int correct = 0;
  for (char h : hit) correct += h;
  const double rate = static_cast<double>(correct) / questions;
  const double sigma = std::sqrt(expected * (1 - expected) / questions);
  const double secs = elapsed_since(started);
  return {std::fabs(rate - expected) <= 3 * sigma && std::fabs(expected - 0.9433) < 5e-5 && secs < 60.0,
          fmt("p=%.3f, rate %.4f vs %.4f, |diff| %.4f <= 3 sigma %.4f; %.1fs < 60s", p, rate, expected,
              std::fabs(rate - expected), 3 * sigma, secs)};
}

// Pre-registered configuration: answer emission 0.95/0.05, PRM = step scores
// only (w=1) with a leaf-state answer channel, beam width 1.
Verdict strategy_ordering() {
  const auto started = std::chrono::steady_clock::now();
  const auto cfg = config({{"seed", kSeed},
                           {"depth", 3},
                           {"branching", 4},
                           {"p_good_given_good", 0.6},
                           {"p_good_given_bad", 0.0},
                           {"p_correct_answer_given_good_leaf", 0.95},
                           {"p_correct_answer_given_bad_leaf", 0.05},
                           {"sigma_step", 0.1},
                           {"sigma_answer", 0.1},
                           {"answer_truth", "leaf_state"},
                           {"step_weight", 1.0},
                           {"n", 16}});
  const auto policy = cfg.policy();
  const auto scorer = cfg.scorer();
  const auto opt = cfg.scale_options();
  const auto qs = sim_questions(500);
  const int n = 16;
  // rows: pass@N, beam search, best-of-N, self-consistency, single sample
  std::vector<std::array<char, 5>> ok(qs.size());
  parallel_for(qs.size(), default_jobs(), [&](std::size_t i) {
    const auto& q = qs[i];
    SampleBudget b;
    ok[i][0] = run_strategy(kPassAtN, *policy, *scorer, q, n, opt, b);
    ok[i][1] = run_strategy(kBeamSearch, *policy, *scorer, q, n, opt, b);
    ok[i][2] = run_strategy(kBestOfN, *policy, *scorer, q, n, opt, b);
    ok[i][3] = run_strategy(kSelfConsistency, *policy, *scorer, q, n, opt, b);
    ok[i][4] = run_strategy(kPassAtN, *policy, *scorer, q, 1, opt, b);
  });
  const char* names[] = {"pass@N", "BS", "BoN", "SC", "single"};
  int totals[5] = {0, 0, 0, 0, 0};
  for (const auto& row : ok) {
    for (int s = 0; s < 5; ++s) totals[s] += row[static_cast<std::size_t>(s)];
  }
  bool all = true;
  std::string detail;
  for (int s = 0; s < 4; ++s) {
    int wins = 0, losses = 0;
    for (const auto& row : ok) {
      wins += row[static_cast<std::size_t>(s)] && !row[static_cast<std::size_t>(s + 1)];
      losses += !row[static_cast<std::size_t>(s)] && row[static_cast<std::size_t>(s + 1)];
    }
    const double gap = 100.0 * (totals[s] - totals[s + 1]) / static_cast<double>(qs.size());
    const double p = sign_test_p(wins, wins + losses);
    const bool holds = totals[s] >= totals[s + 1] && (gap >= 2.0 || p < 0.05);
    all = all && holds;
    detail += fmt("%s%s-%s %+.1fpt p=%.3g%s", s ? "; " : "", names[s], names[s + 1], gap, p, holds ? "" : " (X)");
  }
  const double secs = elapsed_since(started);
  all = all && secs < 300.0;
  return {all, fmt("acc %d/%d/%d/%d/%d of 500; ", totals[0], totals[1], totals[2], totals[3], totals[4]) + detail +
                   fmt("; %.1fs < 300s", secs)};
}

Verdict weight_sweep_endpoints() {
  const auto cfg = config({{"seed", kSeed},
                           {"depth", 4},
                           {"p_good_given_good", 0.6},
                           {"p_correct_answer_given_good_leaf", 0.8},
                           {"p_correct_answer_given_bad_leaf", 0.05},
                           {"sigma_step", 0.05},
                           {"sigma_answer", 0.3},
                           {"n", 16}});
  const auto policy = cfg.policy();
  const auto scorer = cfg.scorer();
  const auto qs = sim_questions(500);
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
  const auto curve = weight_sweep(*policy, *scorer, qs, grid, 16, cfg.scale_options(), default_jobs());

  bool endpoints = true;
  for (std::size_t idx : {std::size_t{0}, grid.size() - 1}) {
    auto opt = cfg.scale_options();
    opt.weights = {grid[idx]};
    std::int64_t correct = 0;
    SampleBudget budget;
    for (const auto& q : qs) {
      const auto o = best_of_n(*policy, *scorer, q, 16, opt);
      budget += o.budget;
      correct += match_answer(o.chosen_answer, q.golden, opt.matcher) ? 1 : 0;
    }
    std::ostringstream a, b;
    write_curve_csv(a, {curve[idx]}, {kSeed, ""});
    write_curve_csv(b, {make_point(grid[idx], "best_of_n", correct, static_cast<std::int64_t>(qs.size()), budget)}, {kSeed, ""});
    endpoints = endpoints && a.str() == b.str();
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    if (curve[i].accuracy > curve[best].accuracy) best = i;
  }
  const bool interior = best != 0 && best != curve.size() - 1;
  std::string series;
  for (const auto& p : curve) series += fmt(" %.3f", p.accuracy);
  return {endpoints && interior, fmt("endpoints byte-identical: %s; argmax w=%.1f;", endpoints ? "yes" : "no",
                                     curve[best].x) + series};
}

Verdict pair_mining() {
  const auto cfg = config({{"seed", kSeed}, {"p_good_given_good", 0.6}, {"sigma_step", 0.2}, {"sigma_answer", 0.2}});
  const auto policy = cfg.policy();
  const auto scorer = cfg.scorer();
  const auto qs = sim_questions(300);
  const auto opt = cfg.scale_options();
  int prm_pairs = 0, margin_ok = 0;
  for (double t : {0.1, 0.2, 0.3, 0.5}) {
    for (auto regime : {MiningRegime::StepAnswerPRM, MiningRegime::AnswerOnlyPRM}) {
      MiningConfig m = cfg.mining();
      m.margin_threshold = t;
      m.regime = regime;
      for (const auto& p : mine_pairs(*policy, scorer.get(), qs, m, opt, default_jobs()).pairs) {
        ++prm_pairs;
        margin_ok += p.chosen_score - p.rejected_score > t ? 1 : 0;
      }
    }
  }
  auto dump = [](const MiningResult& r) {
    std::string s;
    for (const auto& p : r.pairs) s += pair_to_json(p, false).dump() + "\n";
    return s;
  };
  MiningConfig answer_only = cfg.mining();
  answer_only.regime = MiningRegime::AnswerOnlyPRM;
  MiningConfig zero_weight = cfg.mining();
  zero_weight.weights = {0.0};
  const bool identical = dump(mine_pairs(*policy, scorer.get(), qs, answer_only, opt)) ==
                         dump(mine_pairs(*policy, scorer.get(), qs, zero_weight, opt));
  MiningConfig outcome = cfg.mining();
  outcome.regime = MiningRegime::Outcome;
  int outcome_pairs = 0, outcome_ok = 0;
  for (const auto& p : mine_pairs(*policy, nullptr, qs, outcome, opt).pairs) {
    ++outcome_pairs;
    const auto golden = sim_golden_answer(p.question_id);
    outcome_ok += match_answer(p.chosen.answer, golden, opt.matcher) && !match_answer(p.rejected.answer, golden, opt.matcher);
  }
  return {prm_pairs > 0 && margin_ok == prm_pairs && identical && outcome_pairs > 0 && outcome_ok == outcome_pairs,
          fmt("%d/%d PRM pairs clear the margin; answer-only == w=0: %s; %d/%d outcome pairs correct-vs-incorrect",
              margin_ok, prm_pairs, identical ? "yes" : "no", outcome_ok, outcome_pairs)};
}

Verdict stepwise_consistency() {
  const auto cfg = config({{"seed", kSeed}, {"p_good_given_good", 0.6}, {"regime", "per_step_wise"}});
  const auto policy = cfg.policy();
  const auto scorer = cfg.scorer();
  const auto m = cfg.mining();
  int same = 0;
  const auto qs = sim_questions(200);
  for (const auto& q : qs) {
    const auto chain = mine_stepwise_chain(*policy, *scorer, q, m, cfg.scale_options());
    const auto bs = step_beam_search(*policy, *scorer, q, m.paths_per_question, 1, cfg.scale_options());
    same += chain.final_trace == bs.chosen_trace ? 1 : 0;
  }
  return {same == static_cast<int>(qs.size()), fmt("%d/%zu chains equal the width-1 beam search trace", same, qs.size())};
}

Verdict full_run_determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("cos_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  auto run = [&](const std::string& name, const std::string& jobs) {
    const auto out = (dir / name).string();
    const std::string cmd = std::string("\"") + COS_BINARY + "\" scale run --seed " + std::to_string(kSeed) +
                            " --questions 200 --jobs " + jobs + " --out \"" + out + "\"";
    if (std::system(cmd.c_str()) != 0) throw Error("io", "command failed: " + cmd);
    std::ifstream f(out, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
  };
  const auto a = run("a.csv", "1");
  const auto b = run("b.csv", "4");
  fs::remove_all(dir);
  const auto lines = std::count(a.begin(), a.end(), '\n');
  return {!a.empty() && a == b, fmt("two runs (jobs 1 and 4), %zu bytes / %ld lines each, identical: %s", a.size(),
                                    static_cast<long>(lines), a == b ? "yes" : "no")};
}

}  // namespace

int main() {
  criterion("parser-round-trip", parser_round_trip);
  criterion("judge-fusion-truth-table", fusion_truth_table);
  criterion("mc-vs-oracle", mc_vs_oracle);
  criterion("aggregation-boundaries", aggregation_boundaries);
  criterion("loss-functions", loss_functions);
  criterion("pass-at-n-closed-form", pass_at_n_closed_form);
  criterion("strategy-ordering", strategy_ordering);
  criterion("weight-sweep", weight_sweep_endpoints);
  criterion("pair-mining-margin", pair_mining);
  criterion("stepwise-consistency", stepwise_consistency);
  criterion("full-run-determinism", full_run_determinism);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
