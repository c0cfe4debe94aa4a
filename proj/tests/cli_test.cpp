#include "costep/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace costep;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run_cos(std::vector<std::string> args, const std::string& input = "") {
  args.insert(args.begin(), "cos");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::istringstream in(input);
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), in, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
protected:
  void SetUp() override {
    ::unsetenv("COS_SEED");
    dir_ = fs::temp_directory_path() / ("cos_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override {
    ::unsetenv("COS_SEED");
    fs::remove_all(dir_);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  fs::path dir_;
};

const std::vector<std::string> kSmallRun = {"scale", "run", "--questions", "20", "--n-grid", "1,4", "--jobs", "2"};

}  // namespace

TEST_F(CliTest, TraceRenderParseValidate) {
  const auto sampled = run_cos({"sim", "sample", "--questions", "3", "--n", "2"});
  ASSERT_EQ(sampled.code, 0) << sampled.err;
  const auto rendered = run_cos({"trace", "render"}, sampled.out);
  ASSERT_EQ(rendered.code, 0);
  const auto parsed = run_cos({"trace", "parse"}, rendered.out);
  ASSERT_EQ(parsed.code, 0) << parsed.err;
  EXPECT_EQ(parsed.out, sampled.out);
  const auto valid = run_cos({"trace", "validate"}, rendered.out);
  EXPECT_EQ(valid.code, 0);
  EXPECT_NE(valid.err.find("6 record(s), 0 invalid"), std::string::npos);

  const auto text = run_cos({"trace", "render", "--text"}, sampled.out);
  const auto first_line = text.out.substr(0, text.out.find('\n'));
  const auto raw = run_cos({"trace", "parse", "--raw"}, first_line);
  EXPECT_EQ(raw.code, 0);
}

TEST_F(CliTest, ValidateReportsEachBadLine) {
  const std::string good = R"({"question_id":"q1","steps":[{"name":"a","thought":"b","reflection":"c"}],"answer":"1"})";
  const std::string empty_thought = R"({"question_id":"q2","steps":[{"name":"a","thought":" ","reflection":"c"}],"answer":"1"})";
  const auto r = run_cos({"trace", "validate"}, good + "\n" + empty_thought + "\n{not json\n" + good + "\n");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("line 2: invalid-trace"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("line 3:"), std::string::npos);
  EXPECT_EQ(r.err.find("line 1:"), std::string::npos);
  EXPECT_NE(r.err.find("4 record(s), 2 invalid"), std::string::npos) << r.err;
}

TEST_F(CliTest, LenientParseReportsRecovery) {
  const std::string text = "<|reasoning_start|><|reasoning_step_start|><|reasoning_step_name_start|>a"
                           "<|reasoning_step_name_end|><|reasoning_step_thought_start|>b<|reasoning_step_thought_end|>"
                           "<|reasoning_step_end|><|reasoning_end|>7";
  EXPECT_EQ(run_cos({"trace", "parse", "--raw"}, text).code, 1);
  const auto r = run_cos({"trace", "parse", "--raw", "--lenient"}, text);
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("recovered"), std::string::npos);
  EXPECT_NE(r.out.find(R"("reflection":"")"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cos({}).code, 2);
  EXPECT_EQ(run_cos({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cos({"scale"}).code, 2);
  const auto bad_number = run_cos({"scale", "run", "--temperature", "hot"});
  EXPECT_EQ(bad_number.code, 2);
  EXPECT_NE(bad_number.err.find("--temperature"), std::string::npos);
  EXPECT_EQ(run_cos({"eval", "prm-acc", "--split", "sideways"}).code, 2);
  EXPECT_EQ(run_cos({"--help"}).code, 0);
}

TEST_F(CliTest, DomainErrorsExitOne) {
  const auto r = run_cos({"scale", "run", "--strategies", "telepathy", "--questions", "2"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("telepathy"), std::string::npos);
  EXPECT_EQ(run_cos({"scale", "run", "--config", path("missing.json")}).code, 1);
  write("bad.json", R"({"no_such_key": 1})");
  EXPECT_EQ(run_cos({"scale", "run", "--config", path("bad.json")}).code, 1);
  EXPECT_EQ(run_cos({"sim", "make-spec", "--p-good-given-good", "1.5"}).code, 1);
}

TEST_F(CliTest, ScaleRunIsDeterministic) {
  auto args = kSmallRun;
  const auto a = run_cos(args);
  ASSERT_EQ(a.code, 0) << a.err;
  args.back() = "1";
  const auto b = run_cos(args);
  EXPECT_EQ(a.out, b.out);
  EXPECT_TRUE(a.out.starts_with("# seed="));
  EXPECT_NE(a.out.find("strategy,N,accuracy,policy_calls,steps_generated,scorer_calls,wall_ms\n"), std::string::npos);
  auto other = kSmallRun;
  other.insert(other.end(), {"--seed", "99"});
  EXPECT_NE(run_cos(other).out, a.out);
}

TEST_F(CliTest, SeedPrecedence) {
  write("cfg.json", R"({"seed": 11})");
  auto seed_line = [](const CliRun& r) { return r.out.substr(0, r.out.find('\n')); };
  auto args = kSmallRun;
  EXPECT_EQ(seed_line(run_cos(args)), "# seed=0");
  args.insert(args.end(), {"--config", path("cfg.json")});
  EXPECT_EQ(seed_line(run_cos(args)), "# seed=11");
  ::setenv("COS_SEED", "12", 1);
  EXPECT_EQ(seed_line(run_cos(args)), "# seed=12");
  args.insert(args.end(), {"--seed", "13"});
  EXPECT_EQ(seed_line(run_cos(args)), "# seed=13");
}

TEST_F(CliTest, SpecFileSetsSimulatorKeysOnly) {
  const auto spec = run_cos({"sim", "make-spec", "--depth", "2", "--p-good-given-good", "0.5"});
  ASSERT_EQ(spec.code, 0);
  write("spec.json", spec.out);
  const auto oracle = run_cos({"sim", "oracle", "--spec", path("spec.json")});
  EXPECT_EQ(oracle.out, "0.25\n");
  // A flag still wins over the spec file.
  EXPECT_EQ(run_cos({"sim", "oracle", "--spec", path("spec.json"), "--depth", "3"}).out, "0.125\n");
  EXPECT_NEAR(std::stod(run_cos({"sim", "oracle", "--depth", "3", "--p-good-given-good", "0.8"}).out), 0.512, 1e-12);
  EXPECT_EQ(run_cos({"sim", "oracle", "--depth", "3", "--p-good-given-good", "0.8", "--depth-remaining", "1"}).out,
            "0.8\n");
}

TEST_F(CliTest, AnnotationPipeline) {
  const auto sampled = run_cos({"sim", "sample", "--questions", "4", "--n", "1", "--p-good-given-good", "0.6"});
  const auto fused = run_cos({"annotate", "fuse"}, sampled.out);
  ASSERT_EQ(fused.code, 0) << fused.err;
  const auto mc = run_cos({"annotate", "mc", "--rollouts", "8"}, sampled.out);
  ASSERT_EQ(mc.code, 0) << mc.err;
  const auto emitted = run_cos({"annotate", "emit"}, mc.out);
  ASSERT_EQ(emitted.code, 0);
  // depth 3 default: four rows per record
  EXPECT_EQ(std::count(emitted.out.begin(), emitted.out.end(), '\n'), 16);
  EXPECT_NE(emitted.err.find("16 row(s)"), std::string::npos);
}

TEST_F(CliTest, MineAndPlan) {
  const auto r = run_cos({"mine", "--questions", "30", "--paths-per-question", "8", "--margin-threshold", "0.3"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  int pairs = 0;
  while (std::getline(lines, line)) {
    const auto p = pair_from_json(nlohmann::ordered_json::parse(line));
    EXPECT_GT(p.chosen_score - p.rejected_score, 0.3);
    ++pairs;
  }
  EXPECT_GT(pairs, 0);
  EXPECT_NE(r.err.find(std::to_string(pairs) + " pair(s) from 30 question(s)"), std::string::npos);

  const auto plan = run_cos({"mine", "plan"});
  EXPECT_EQ(plan.out, slurp(fs::path(COS_FIXTURE_DIR) / "data" / "manifest.json"));
}

TEST_F(CliTest, EvalReports) {
  const auto sweep = run_cos({"eval", "sweep", "--questions", "20", "--n", "4", "--grid", "0,0.5,1", "--out", path("rep")});
  ASSERT_EQ(sweep.code, 0) << sweep.err;
  std::ifstream csv(path("rep/sweep.csv"));
  EXPECT_EQ(read_curve_csv(csv).size(), 3u);
  EXPECT_TRUE(fs::exists(path("rep/sweep.json")));

  ASSERT_EQ(run_cos({"eval", "scaling", "--questions", "10", "--n-grid", "1,2", "--out", path("rep")}).code, 0);
  EXPECT_TRUE(fs::exists(path("rep/scaling.csv")));

  ASSERT_EQ(run_cos({"eval", "prm-acc", "--questions", "50", "--sigma-step", "0", "--sigma-answer", "0", "--out",
                 path("rep")}).code,
            0);
  const auto acc = nlohmann::json::parse(slurp(path("rep/prm_accuracy.json")));
  EXPECT_EQ(acc["step_accuracy"], 1.0);

  const std::string traces = R"({"round":1,"steps":[{"name":"a","thought":"b","reflection":"c"}],"answer":"1"})"
                             "\n"
                             R"({"round":1,"steps":[{"name":"a","thought":"b","reflection":"c"},{"name":"a","thought":"b","reflection":"c"},{"name":"a","thought":"b","reflection":"c"}],"answer":"1"})"
                             "\n";
  ASSERT_EQ(run_cos({"eval", "length", "--out", path("rep")}, traces).code, 0);
  std::ifstream len(path("rep/length.csv"));
  const auto stats = read_length_csv(len);
  ASSERT_EQ(stats.size(), 1u);
  EXPECT_EQ(stats[0].mean, 2.0);
  EXPECT_EQ(stats[0].sd, 1.0);
}
