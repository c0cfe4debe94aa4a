#pragma once

// `cos` command-line front end. Lives in a header so tests can drive it
// in-process through dispatch().
//
// Configuration is one flat JSON object. Each key can also be given as a
// flag (--p-good-given-good 0.6 sets "p_good_given_good"). Precedence, from
// strongest: command-line flag, COS_SEED (seed only), --spec file (simulator
// keys only), --config file, built-in default.

#include "costep/annotate.hpp"
#include "costep/core.hpp"
#include "costep/eval.hpp"
#include "costep/policy.hpp"
#include "costep/prefmine.hpp"
#include "costep/remote.hpp"
#include "costep/reward.hpp"
#include "costep/scale.hpp"
#include "costep/trace.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace costep::cli {

using Json = nlohmann::ordered_json;

inline const Json& config_defaults() {
  static const Json k = {
      {"seed", 0},
      {"backend", "sim"},
      {"base_url", ""},
      {"temperature", 1.0},
      {"top_p", 0.95},
      {"n", 16},
      {"max_steps", 64},
      {"step_weight", 0.2},
      {"paths_per_question", 16},
      {"margin_threshold", 0.2},
      {"regime", "step_answer_prm"},
      {"round", 1},
      {"depth", 3},
      {"branching", 4},
      {"p_good_given_good", 0.8},
      {"p_good_given_bad", 0.0},
      {"p_correct_answer_given_good_leaf", 1.0},
      {"p_correct_answer_given_bad_leaf", 0.0},
      {"sigma_step", 0.1},
      {"sigma_answer", 0.1},
      {"step_truth", "binary"},
      {"answer_truth", "outcome"},
      {"questions", 100},
      {"matcher", "casefold,numeric"},
      {"retry_limit", 3},
      {"rollouts", 16},
      {"threshold", 0.5},
      {"beam_width", 1},
  };
  return k;
}

inline const std::vector<std::string>& sim_spec_keys() {
  static const std::vector<std::string> k{"depth",
                                          "branching",
                                          "p_good_given_good",
                                          "p_good_given_bad",
                                          "p_correct_answer_given_good_leaf",
                                          "p_correct_answer_given_bad_leaf"};
  return k;
}

// Effective settings after merging all sources.
struct RunConfig {
  Json values = config_defaults();

  std::uint64_t seed() const { return values.at("seed").get<std::uint64_t>(); }
  std::string str(const char* key) const { return values.at(key).get<std::string>(); }
  double num(const char* key) const { return values.at(key).get<double>(); }
  int integer(const char* key) const { return values.at(key).get<int>(); }

  SimTreeSpec spec() const {
    SimTreeSpec s;
    s.depth = integer("depth");
    s.branching = integer("branching");
    s.p_good_given_good = num("p_good_given_good");
    s.p_good_given_bad = num("p_good_given_bad");
    s.p_correct_answer_given_good_leaf = num("p_correct_answer_given_good_leaf");
    s.p_correct_answer_given_bad_leaf = num("p_correct_answer_given_bad_leaf");
    s.seed = seed();
    s.validate();
    return s;
  }

  SamplingParams sampling() const {
    SamplingParams p{num("temperature"), num("top_p"), integer("n"), integer("max_steps")};
    p.validate();
    return p;
  }

  RewardWeights weights() const {
    RewardWeights w{num("step_weight")};
    w.validate();
    return w;
  }

  ScaleOptions scale_options() const {
    return {sampling(), weights(), AnswerMatcher::parse(str("matcher")), integer("retry_limit"), 0};
  }

  MiningConfig mining() const {
    MiningConfig m{integer("paths_per_question"), num("margin_threshold"), weights(),
                   mining_regime_from_string(str("regime")), integer("round")};
    m.validate();
    return m;
  }

  OracleScorerConfig scorer_config() const {
    OracleScorerConfig c;
    c.sigma_step = num("sigma_step");
    c.sigma_answer = num("sigma_answer");
    const auto st = str("step_truth");
    if (st != "binary" && st != "continuous") throw Error("invalid-spec", "step_truth must be binary or continuous");
    c.step_truth = st == "binary" ? StepTruth::Binary : StepTruth::Continuous;
    const auto at = str("answer_truth");
    if (at != "outcome" && at != "leaf_state") throw Error("invalid-spec", "answer_truth must be outcome or leaf_state");
    c.answer_truth = at == "outcome" ? AnswerTruth::Outcome : AnswerTruth::LeafState;
    // Scorer noise gets its own stream family, independent of the policy.
    c.seed = mix64(seed() ^ 0x5c0e5c0e5c0e5c0eULL);
    return c;
  }

  bool remote() const {
    const auto b = str("backend");
    if (b != "sim" && b != "remote") throw Error("invalid-spec", "backend must be sim or remote");
    if (b == "remote" && str("base_url").empty()) throw Error("invalid-spec", "remote backend needs base_url");
    return b == "remote";
  }

  PolicyHandle policy() const {
    if (remote()) return std::make_shared<RemotePolicy>(RemoteEndpoint{str("base_url")});
    return sim_policy(spec());
  }
  ScorerHandle scorer() const {
    if (remote()) return std::make_shared<RemoteScorer>(RemoteEndpoint{str("base_url")});
    return std::make_shared<OracleScorer>(spec(), scorer_config());
  }
  JudgeHandle judge() const {
    if (remote()) return std::make_shared<RemoteJudge>(RemoteEndpoint{str("base_url")});
    return std::make_shared<SimJudge>();
  }
};

namespace detail {

inline std::string flag_name(const std::string& key) {
  std::string f = key;
  for (auto& c : f) c = c == '_' ? '-' : c;
  return "--" + f;
}

// Converts flag text to the JSON type of the key's default.
inline Json typed_value(const std::string& key, const std::string& text) {
  const Json& def = config_defaults().at(key);
  try {
    if (def.is_string()) return text;
    if (def.is_number_integer() || def.is_number_unsigned()) {
      std::size_t used = 0;
      if (key == "seed") {
        const auto v = std::stoull(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
      }
      const auto v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
    return parse_double(text);
  } catch (const std::exception&) {
    throw CLI::ValidationError(flag_name(key), "not a valid value: '" + text + "'");
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("io", "cannot open " + path);
  try {
    return Json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", path + ": " + e.what());
  }
}

inline void merge_known(Json& into, const Json& from, const std::string& source) {
  if (!from.is_object()) throw Error("invalid-spec", source + " must hold a JSON object");
  for (const auto& [k, v] : from.items()) {
    if (!into.contains(k)) throw Error("invalid-spec", source + ": unknown key '" + k + "'");
    const Json& def = config_defaults().at(k);
    const bool ok = def.is_string() ? v.is_string() : v.is_number();
    if (!ok) throw Error("invalid-spec", source + ": wrong type for '" + k + "'");
    into[k] = v;
  }
}

}  // namespace detail

// Config sources collected by the option parser; resolved after parsing.
struct ConfigSources {
  std::string config_path;
  std::string spec_path;
  std::map<std::string, std::string> flags;
  std::map<std::string, std::vector<CLI::Option*>> options;  // one per subcommand that takes config flags

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "flat JSON config file");
    app.add_option("--spec", spec_path, "simulator spec JSON (sim make-spec output)");
    for (const auto& [key, def] : config_defaults().items()) {
      options[key].push_back(
          app.add_option(detail::flag_name(key), flags[key], "config key " + key + " (default " + def.dump() + ")"));
    }
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) detail::merge_known(cfg.values, detail::read_json_file(config_path), config_path);
    if (!spec_path.empty()) {
      Json spec = detail::read_json_file(spec_path);
      Json sim_only = Json::object();
      for (const auto& k : sim_spec_keys()) {
        if (spec.contains(k)) sim_only[k] = spec[k];
      }
      detail::merge_known(cfg.values, sim_only, spec_path);
    }
    if (const char* env = std::getenv("COS_SEED"); env != nullptr && *env != '\0') {
      cfg.values["seed"] = detail::typed_value("seed", env);
    }
    for (const auto& [key, opts] : options) {
      if (std::any_of(opts.begin(), opts.end(), [](const CLI::Option* o) { return o->count() > 0; })) {
        cfg.values[key] = detail::typed_value(key, flags.at(key));
      }
    }
    return cfg;
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

inline std::vector<int> int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& item : split_list(s)) out.push_back(std::stoi(item));
  return out;
}

inline std::vector<double> double_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(item));
  return out;
}

struct Io {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
};

class InputFile {
public:
  InputFile(const std::string& path, std::istream& fallback) {
    if (path.empty() || path == "-") {
      stream_ = &fallback;
    } else {
      file_.open(path);
      if (!file_) throw Error("io", "cannot open " + path);
      stream_ = &file_;
    }
  }
  std::istream& get() { return *stream_; }

private:
  std::ifstream file_;
  std::istream* stream_ = nullptr;
};

class OutputFile {
public:
  OutputFile(const std::string& path, std::ostream& fallback) {
    if (path.empty() || path == "-") {
      stream_ = &fallback;
    } else {
      file_.open(path, std::ios::binary);
      if (!file_) throw Error("io", "cannot write " + path);
      stream_ = &file_;
    }
  }
  std::ostream& get() { return *stream_; }
  void finish() {
    stream_->flush();
    if (!*stream_) throw Error("io", "write failed");
  }

private:
  std::ofstream file_;
  std::ostream* stream_ = nullptr;
};

// Questions from a JSONL file {question_id, question, golden}, or simulated
// ones when no file is given.
inline std::vector<Question> load_questions(const std::string& path, const RunConfig& cfg) {
  if (path.empty()) {
    if (cfg.remote()) throw Error("invalid-spec", "the remote backend needs --questions-file");
    return sim_questions(static_cast<std::size_t>(cfg.integer("questions")));
  }
  std::ifstream f(path);
  if (!f) throw Error("io", "cannot open " + path);
  std::vector<Question> out;
  std::string line;
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    const auto j = Json::parse(line);
    out.push_back({j.at("question_id").get<std::string>(), j.value("question", std::string{}),
                   j.at("golden").get<std::string>()});
  }
  return out;
}

inline std::map<std::string, Question> question_index(const std::string& path, const RunConfig& cfg) {
  std::map<std::string, Question> out;
  if (path.empty()) return out;
  for (auto& q : load_questions(path, cfg)) out.emplace(q.id, q);
  return out;
}

// Question text and golden answer for a trace's question id.
inline Question lookup_question(const std::map<std::string, Question>& index, const std::string& id,
                                const RunConfig& cfg) {
  if (auto it = index.find(id); it != index.end()) return it->second;
  if (cfg.remote() || !index.empty()) throw Error("invalid-spec", "no question record for '" + id + "'");
  return {id, "Simulated question " + id, sim_golden_answer(id)};
}

// Reads JSONL, calling fn(line_number, json) per non-empty line. Lines that
// fail are reported and counted; returns the failure count.
template <class Fn>
int for_each_jsonl(std::istream& in, std::ostream& err, Fn&& fn) {
  int failures = 0;
  std::string line;
  for (int line_no = 1; std::getline(in, line); ++line_no) {
    if (trim(line).empty()) continue;
    try {
      fn(line_no, Json::parse(line));
    } catch (const Error& e) {
      err << "line " << line_no << ": " << e.what() << '\n';
      ++failures;
    } catch (const nlohmann::json::exception& e) {
      err << "line " << line_no << ": " << e.what() << '\n';
      ++failures;
    }
  }
  return failures;
}

inline ReportHeader header_for(const RunConfig& cfg) { return {cfg.seed(), config_hash(cfg.values)}; }

inline std::string join_path(const std::string& dir, const std::string& file) {
  if (dir.empty()) return file;
  std::filesystem::create_directories(dir);
  return (std::filesystem::path(dir) / file).string();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Context {
  ConfigSources sources;
  std::string in_path;
  std::string out_path;
  std::string questions_file;
  unsigned jobs = default_jobs();
};

namespace commands {

inline int trace_parse(Context& ctx, detail::Io io, bool lenient, bool raw) {
  detail::InputFile in(ctx.in_path, io.in);
  detail::OutputFile out(ctx.out_path, io.out);
  const auto mode = lenient ? ParseMode::Lenient : ParseMode::Strict;
  auto handle = [&](const std::string& text, const std::string& id, int line_no) {
    auto result = parse_trace(text, mode, id);
    if (auto* e = std::get_if<ParseError>(&result)) throw Error("parse", e->message());
    auto& ok = std::get<ParsedTrace>(result);
    for (const auto& v : ok.violations) {
      io.err << "line " << line_no << ": recovered at byte " << v.offset << ": " << v.description << '\n';
    }
    out.get() << trace_to_json(ok.trace).dump() << '\n';
  };
  int failures = 0;
  if (raw) {
    std::string text((std::istreambuf_iterator<char>(in.get())), std::istreambuf_iterator<char>());
    try {
      handle(text, "", 1);
    } catch (const Error& e) {
      io.err << e.what() << '\n';
      failures = 1;
    }
  } else {
    failures = detail::for_each_jsonl(in.get(), io.err, [&](int line_no, const Json& j) {
      handle(j.at("raw_text").get<std::string>(), j.value("question_id", std::string{}), line_no);
    });
  }
  out.finish();
  return failures == 0 ? 0 : 1;
}

inline int trace_validate(Context& ctx, detail::Io io) {
  detail::InputFile in(ctx.in_path, io.in);
  int valid = 0;
  const int failures = detail::for_each_jsonl(in.get(), io.err, [&](int, const Json& j) {
    const Trace t = trace_from_json(j);
    validate_strict(t);
    if (j.contains("raw_text")) {
      const Trace from_raw = parse_trace_or_throw(j.at("raw_text").get<std::string>(), ParseMode::Strict, t.question_id);
      if (!(from_raw == t)) throw Error("invalid-trace", "raw_text disagrees with the structured fields");
    }
    ++valid;
  });
  io.err << valid + failures << " record(s), " << failures << " invalid\n";
  return failures == 0 ? 0 : 1;
}

inline int trace_render(Context& ctx, detail::Io io, bool text_only) {
  detail::InputFile in(ctx.in_path, io.in);
  detail::OutputFile out(ctx.out_path, io.out);
  const int failures = detail::for_each_jsonl(in.get(), io.err, [&](int, const Json& j) {
    const Trace t = trace_from_json(j);
    if (text_only) out.get() << serialize_trace(t) << '\n';
    else out.get() << trace_to_json(t, true).dump() << '\n';
  });
  out.finish();
  return failures == 0 ? 0 : 1;
}

inline int annotate_mc(Context& ctx, detail::Io io) {
  const RunConfig cfg = ctx.sources.resolve();
  const auto policy = cfg.policy();
  const auto matcher = AnswerMatcher::parse(cfg.str("matcher"));
  const auto index = detail::question_index(ctx.questions_file, cfg);
  McOptions opt;
  opt.rollouts = cfg.integer("rollouts");
  opt.retry_limit = cfg.integer("retry_limit");
  opt.params = cfg.sampling();
  opt.jobs = ctx.jobs;
  detail::InputFile in(ctx.in_path, io.in);
  detail::OutputFile out(ctx.out_path, io.out);
  const int failures = detail::for_each_jsonl(in.get(), io.err, [&](int, const Json& j) {
    const Trace t = trace_from_json(j);
    const Question q = detail::lookup_question(index, t.question_id, cfg);
    out.get() << to_json(mc_annotate(*policy, t, q.text, q.golden, matcher, opt)).dump() << '\n';
  });
  out.finish();
  return failures == 0 ? 0 : 1;
}

inline int annotate_fuse(Context& ctx, detail::Io io) {
  const RunConfig cfg = ctx.sources.resolve();
  const auto judge = cfg.judge();
  const auto matcher = AnswerMatcher::parse(cfg.str("matcher"));
  const auto index = detail::question_index(ctx.questions_file, cfg);
  detail::InputFile in(ctx.in_path, io.in);
  detail::OutputFile out(ctx.out_path, io.out);
  const int failures = detail::for_each_jsonl(in.get(), io.err, [&](int, const Json& j) {
    const Trace t = trace_from_json(j);
    const Question q = detail::lookup_question(index, t.question_id, cfg);
    out.get() << to_json(judge_annotate(*judge, t, q.text, q.golden, matcher)).dump() << '\n';
  });
  out.finish();
  return failures == 0 ? 0 : 1;
}

inline int annotate_emit(Context& ctx, detail::Io io) {
  const RunConfig cfg = ctx.sources.resolve();
  detail::InputFile in(ctx.in_path, io.in);
  detail::OutputFile out(ctx.out_path, io.out);
  const auto rows = emit_prm_dataset(in.get(), out.get(), cfg.num("threshold"));
  out.finish();
  io.err << rows << " row(s)\n";
  return 0;
}

inline int sim_sample(Context& ctx, detail::Io io) {
  const RunConfig cfg = ctx.sources.resolve();
  const auto policy = cfg.policy();
  const auto questions = detail::load_questions(ctx.questions_file, cfg);
  const auto opt = cfg.scale_options();
  detail::OutputFile out(ctx.out_path, io.out);
  for (const auto& q : questions) {
    SampleBudget budget;
    for (const auto& t : sample_traces(*policy, q, opt.params.n, opt, budget)) out.get() << trace_to_json(t).dump() << '\n';
  }
  out.finish();
  return 0;
}

inline int scale_run(Context& ctx, detail::Io io, const std::string& strategies, const std::string& n_grid,
                     bool wall_time) {
  const RunConfig cfg = ctx.sources.resolve();
  SuiteOptions suite;
  suite.strategies = detail::split_list(strategies);
  suite.n_grid = detail::int_list(n_grid);
  suite.beam_width = cfg.integer("beam_width");
  suite.jobs = ctx.jobs;
  suite.record_wall_time = wall_time;
  Json hashed = cfg.values;
  hashed["strategies"] = suite.strategies;
  hashed["n_grid"] = suite.n_grid;
  const auto rows = run_strategy_suite(*cfg.policy(), *cfg.scorer(), detail::load_questions(ctx.questions_file, cfg),
                                       cfg.scale_options(), suite);
  detail::OutputFile out(ctx.out_path, io.out);
  write_suite_csv(out.get(), rows, {cfg.seed(), config_hash(hashed)});
  out.finish();
  return 0;
}

inline int mine(Context& ctx, detail::Io io) {
  const RunConfig cfg = ctx.sources.resolve();
  const auto mcfg = cfg.mining();
  const auto policy = cfg.policy();
  const auto questions = detail::load_questions(ctx.questions_file, cfg);
  const auto opt = cfg.scale_options();
  MiningResult r;
  if (mcfg.regime == MiningRegime::PerStepWise) {
    io.err << "per-step-wise pairs are experimental\n";
    r = mine_stepwise_pairs(*policy, *cfg.scorer(), questions, mcfg, opt, ctx.jobs);
  } else {
    ScorerHandle scorer = mcfg.regime == MiningRegime::Outcome ? nullptr : cfg.scorer();
    r = mine_pairs(*policy, scorer.get(), questions, mcfg, opt, ctx.jobs);
  }
  detail::OutputFile out(ctx.out_path, io.out);
  for (const auto& p : r.pairs) out.get() << pair_to_json(p).dump() << '\n';
  out.finish();
  io.err << r.pairs.size() << " pair(s) from " << r.questions << " question(s); " << r.questions_without_pair
         << " question(s) without a pair\n";
  return 0;
}

inline int mine_plan(Context& ctx, detail::Io io, int rounds, const std::string& reference, int target) {
  detail::OutputFile out(ctx.out_path, io.out);
  out.get() << manifest_to_json(plan_iterative_rounds(rounds, reference, target)).dump(2) << '\n';
  out.finish();
  return 0;
}

inline int eval_sweep(Context& ctx, detail::Io io, const std::string& grid_text) {
  const RunConfig cfg = ctx.sources.resolve();
  const auto grid = detail::double_list(grid_text);
  auto points = weight_sweep(*cfg.policy(), *cfg.scorer(), detail::load_questions(ctx.questions_file, cfg), grid,
                             cfg.integer("n"), cfg.scale_options(), ctx.jobs);
  Json hashed = cfg.values;
  hashed["grid"] = grid;
  const ReportHeader h{cfg.seed(), config_hash(hashed)};
  std::ofstream csv(detail::join_path(ctx.out_path, "sweep.csv"), std::ios::binary);
  write_curve_csv(csv, points, h);
  std::ofstream json(detail::join_path(ctx.out_path, "sweep.json"), std::ios::binary);
  json << curve_to_json(points, h).dump(2) << '\n';
  if (!csv || !json) throw Error("io", "failed writing sweep report");
  (void)io;
  return 0;
}

inline int eval_scaling(Context& ctx, detail::Io io, const std::string& strategies, const std::string& n_grid) {
  const RunConfig cfg = ctx.sources.resolve();
  SuiteOptions suite;
  suite.strategies = detail::split_list(strategies);
  suite.n_grid = detail::int_list(n_grid);
  suite.beam_width = cfg.integer("beam_width");
  suite.jobs = ctx.jobs;
  const auto rows = run_strategy_suite(*cfg.policy(), *cfg.scorer(), detail::load_questions(ctx.questions_file, cfg),
                                       cfg.scale_options(), suite);
  Json hashed = cfg.values;
  hashed["strategies"] = suite.strategies;
  hashed["n_grid"] = suite.n_grid;
  const ReportHeader h{cfg.seed(), config_hash(hashed)};
  const auto points = scaling_curve(rows);
  std::ofstream csv(detail::join_path(ctx.out_path, "scaling.csv"), std::ios::binary);
  write_curve_csv(csv, points, h);
  std::ofstream json(detail::join_path(ctx.out_path, "scaling.json"), std::ios::binary);
  json << curve_to_json(points, h).dump(2) << '\n';
  if (!csv || !json) throw Error("io", "failed writing scaling report");
  (void)io;
  return 0;
}

// Labeled records either from --in (ProcessRecord JSONL) or, on the sim
// backend, from sampled traces labeled by their hidden states. The unseen
// split samples from a spec with p_good_given_good shifted by `shift`.
inline int eval_prm_acc(Context& ctx, detail::Io io, const std::string& split, double shift) {
  const RunConfig cfg = ctx.sources.resolve();
  std::vector<ProcessRecord> records;
  if (!ctx.in_path.empty()) {
    detail::InputFile in(ctx.in_path, io.in);
    const int failures = detail::for_each_jsonl(in.get(), io.err,
                                                [&](int, const Json& j) { records.push_back(process_record_from_json(j)); });
    if (failures > 0) return 1;
  } else {
    if (cfg.remote()) throw Error("invalid-spec", "the remote backend needs labeled records via --in");
    SimTreeSpec spec = cfg.spec();
    if (split == "unseen") spec.p_good_given_good = std::clamp(spec.p_good_given_good + shift, 0.0, 1.0);
    const auto policy = sim_policy(spec);
    const auto opt = cfg.scale_options();
    for (const auto& q : sim_questions(static_cast<std::size_t>(cfg.integer("questions")))) {
      SampleBudget budget;
      for (auto& t : sample_traces(*policy, q, 1, opt, budget)) {
        ProcessRecord r;
        r.question_id = q.id;
        r.method = AnnotationMethod::Judge;
        for (const auto& s : t.steps) r.step_values.push_back(require_sim_state(s).on_good_path ? 1.0 : 0.0);
        r.answer_correct = t.answer == q.golden;
        r.trace = std::move(t);
        records.push_back(std::move(r));
      }
    }
  }
  auto rep = prm_accuracy(records, *cfg.scorer(), cfg.num("threshold"), split);
  Json j = to_json(rep);
  Json hashed = cfg.values;
  hashed["split"] = split;
  hashed["unseen_shift"] = shift;
  j["seed"] = cfg.seed();
  j["config_hash"] = config_hash(hashed);
  std::ofstream f(detail::join_path(ctx.out_path, "prm_accuracy.json"), std::ios::binary);
  f << j.dump(2) << '\n';
  if (!f) throw Error("io", "failed writing prm accuracy report");
  return 0;
}

inline int eval_length(Context& ctx, detail::Io io) {
  const RunConfig cfg = ctx.sources.resolve();
  detail::InputFile in(ctx.in_path, io.in);
  std::map<int, std::vector<Trace>> rounds;
  const int failures = detail::for_each_jsonl(in.get(), io.err, [&](int, const Json& j) {
    rounds[j.at("round").get<int>()].push_back(trace_from_json(j));
  });
  if (failures > 0) return 1;
  std::ofstream csv(detail::join_path(ctx.out_path, "length.csv"), std::ios::binary);
  write_length_csv(csv, step_length_stats(rounds), detail::header_for(cfg));
  if (!csv) throw Error("io", "failed writing length report");
  return 0;
}

inline int sim_make_spec(Context& ctx, detail::Io io) {
  const RunConfig cfg = ctx.sources.resolve();
  detail::OutputFile out(ctx.out_path, io.out);
  out.get() << to_json(cfg.spec()).dump(2) << '\n';
  out.finish();
  return 0;
}

inline int sim_oracle(Context& ctx, detail::Io io, bool bad, int depth_remaining) {
  const RunConfig cfg = ctx.sources.resolve();
  const SimTreeSpec spec = cfg.spec();
  const int d = depth_remaining < 0 ? spec.depth : depth_remaining;
  io.out << format_double(exact_success_prob(spec, {!bad, d})) << '\n';
  return 0;
}

}  // namespace commands

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline constexpr const char* kEnvironmentHelp =
    "Configuration precedence (strongest first): command-line flags; the\n"
    "COS_SEED environment variable (seed only); --spec file (simulator keys);\n"
    "--config file; built-in defaults.\n"
    "Exit status: 0 success, 1 domain or input error, 2 usage error.";

inline int dispatch(int argc, const char* const* argv, std::istream& in = std::cin, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Chain-of-step reasoning toolkit: traces, step annotation, rewards, search and pair mining.", "cos"};
  app.footer(kEnvironmentHelp);
  app.require_subcommand(1);
  Context ctx;
  detail::Io io{in, out, err};
  std::function<int()> action;

  auto add_io = [&](CLI::App* cmd, bool with_config) {
    cmd->add_option("--in", ctx.in_path, "input file (default: standard input)");
    cmd->add_option("--out", ctx.out_path, "output file or directory (default: standard output)");
    if (with_config) {
      ctx.sources.attach(*cmd);
      cmd->add_option("--questions-file", ctx.questions_file, "JSONL {question_id, question, golden}");
      cmd->add_option("--jobs", ctx.jobs, "worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
    }
  };

  // trace
  auto* trace = app.add_subcommand("trace", "parse, validate and render traces")->require_subcommand(1);
  bool lenient = false;
  bool raw = false;
  auto* t_parse = trace->add_subcommand("parse", "raw text -> trace JSONL (input lines carry raw_text)");
  add_io(t_parse, false);
  t_parse->add_flag("--lenient", lenient, "recover missing reflection spans");
  t_parse->add_flag("--raw", raw, "treat the whole input as one serialized trace");
  t_parse->callback([&] { action = [&] { return commands::trace_parse(ctx, io, lenient, raw); }; });
  auto* t_validate = trace->add_subcommand("validate", "check trace JSONL against the strict rules");
  add_io(t_validate, false);
  t_validate->callback([&] { action = [&] { return commands::trace_validate(ctx, io); }; });
  bool text_only = false;
  auto* t_render = trace->add_subcommand("render", "trace JSONL -> JSONL with raw_text");
  add_io(t_render, false);
  t_render->add_flag("--text", text_only, "print bare serialized text, one trace per line");
  t_render->callback([&] { action = [&] { return commands::trace_render(ctx, io, text_only); }; });

  // annotate
  auto* annotate = app.add_subcommand("annotate", "step-level labels")->require_subcommand(1);
  auto* a_mc = annotate->add_subcommand("mc", "Monte-Carlo step values for trace JSONL");
  add_io(a_mc, true);
  a_mc->callback([&] { action = [&] { return commands::annotate_mc(ctx, io); }; });
  auto* a_fuse = annotate->add_subcommand("fuse", "judge labels fused with answer correctness");
  add_io(a_fuse, true);
  a_fuse->callback([&] { action = [&] { return commands::annotate_fuse(ctx, io); }; });
  auto* a_emit = annotate->add_subcommand("emit", "process records -> PRM dataset rows");
  add_io(a_emit, true);
  a_emit->callback([&] { action = [&] { return commands::annotate_emit(ctx, io); }; });

  // scale
  auto* scale = app.add_subcommand("scale", "inference-time strategies")->require_subcommand(1);
  std::string strategies = "pass_at_n,self_consistency,best_of_n,step_beam_search";
  std::string n_grid = "1,2,4,8,16,32,64";
  bool wall_time = false;
  auto* s_run = scale->add_subcommand("run", "strategy x N accuracy and budget table (CSV)");
  add_io(s_run, true);
  s_run->add_option("--strategies", strategies, "comma-separated strategy names")->capture_default_str();
  s_run->add_option("--n-grid", n_grid, "comma-separated sample counts")->capture_default_str();
  s_run->add_flag("--record-wall-time", wall_time, "fill wall_ms (output is then no longer reproducible)");
  s_run->callback([&] { action = [&] { return commands::scale_run(ctx, io, strategies, n_grid, wall_time); }; });

  // mine
  auto* mine = app.add_subcommand("mine", "preference pairs (JSONL)")->require_subcommand(0, 1);
  add_io(mine, true);
  int plan_rounds = 3;
  std::string reference = "sft";
  int target_pairs = 20000;
  auto* m_plan = mine->add_subcommand("plan", "iterative round manifest (JSON)");
  add_io(m_plan, false);
  m_plan->add_option("--rounds", plan_rounds, "round count")->capture_default_str()->check(CLI::PositiveNumber);
  m_plan->add_option("--reference", reference, "reference policy handle")->capture_default_str();
  m_plan->add_option("--target-pairs", target_pairs, "pairs per round")->capture_default_str();
  m_plan->callback([&] { action = [&] { return commands::mine_plan(ctx, io, plan_rounds, reference, target_pairs); }; });
  mine->callback([&] {
    if (!action) action = [&] { return commands::mine(ctx, io); };
  });

  // eval
  auto* eval = app.add_subcommand("eval", "reports written under --out DIR")->require_subcommand(1);
  std::string grid = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
  auto* e_sweep = eval->add_subcommand("sweep", "best-of-N accuracy per step weight");
  add_io(e_sweep, true);
  e_sweep->add_option("--grid", grid, "comma-separated step weights")->capture_default_str();
  e_sweep->callback([&] { action = [&] { return commands::eval_sweep(ctx, io, grid); }; });
  auto* e_scaling = eval->add_subcommand("scaling", "accuracy vs N per strategy");
  add_io(e_scaling, true);
  e_scaling->add_option("--strategies", strategies, "comma-separated strategy names")->capture_default_str();
  e_scaling->add_option("--n-grid", n_grid, "comma-separated sample counts")->capture_default_str();
  e_scaling->callback([&] { action = [&] { return commands::eval_scaling(ctx, io, strategies, n_grid); }; });
  std::string split = "seen";
  double shift = -0.2;
  auto* e_prm = eval->add_subcommand("prm-acc", "scorer accuracy against step and answer labels");
  add_io(e_prm, true);
  e_prm->add_option("--split", split, "seen or unseen")->capture_default_str()->check(CLI::IsMember({"seen", "unseen"}));
  e_prm->add_option("--unseen-shift", shift, "p_good_given_good shift for the unseen split")->capture_default_str();
  e_prm->callback([&] { action = [&] { return commands::eval_prm_acc(ctx, io, split, shift); }; });
  auto* e_len = eval->add_subcommand("length", "mean/sd step count per round (input lines carry round)");
  add_io(e_len, true);
  e_len->callback([&] { action = [&] { return commands::eval_length(ctx, io); }; });

  // sim
  auto* sim = app.add_subcommand("sim", "synthetic reasoning tree")->require_subcommand(1);
  auto* sim_spec = sim->add_subcommand("make-spec", "write the simulator spec JSON");
  add_io(sim_spec, true);
  sim_spec->callback([&] { action = [&] { return commands::sim_make_spec(ctx, io); }; });
  bool bad_state = false;
  int depth_remaining = -1;
  auto* sim_or = sim->add_subcommand("oracle", "exact success probability from a state");
  add_io(sim_or, true);
  sim_or->add_flag("--bad", bad_state, "start off the good path");
  sim_or->add_option("--depth-remaining", depth_remaining, "steps left (default: depth)");
  sim_or->callback([&] { action = [&] { return commands::sim_oracle(ctx, io, bad_state, depth_remaining); }; });
  auto* sim_smp = sim->add_subcommand("sample", "n full traces per question (trace JSONL)");
  add_io(sim_smp, true);
  sim_smp->callback([&] { action = [&] { return commands::sim_sample(ctx, io); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front(); sub != nullptr;
         sub = sub->get_subcommands().empty() ? nullptr : sub->get_subcommands().front()) {
      failing = sub;
    }
    err << failing->help();
    return 2;
  }

  try {
    return action ? action() : 2;
  } catch (const CLI::ValidationError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: bad JSON input: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace costep::cli
