#pragma once

// JSON bodies of the HTTP protocol spoken by remote policy, scorer and judge
// backends (POST /v1/sample, /v1/score, /v1/judge). Schemas live in schemas/.

#include "costep/annotate.hpp"
#include "costep/core.hpp"
#include "costep/policy.hpp"
#include "costep/reward.hpp"
#include "costep/trace.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace costep::wire {

using Json = nlohmann::ordered_json;

inline constexpr const char* kProtocolVersion = "1";

inline void check_version(const Json& j) {
  if (!j.contains("protocol_version") || j.at("protocol_version") != kProtocolVersion) {
    throw Error("schema", "missing or unsupported protocol_version");
  }
}

// Wraps nlohmann exceptions (missing fields, wrong types) as schema errors.
template <class Fn>
auto decode(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", e.what());
  }
}

// ---- /v1/sample ----------------------------------------------------------

inline Json sample_request(const PolicyRequest& req, const SamplingParams& p) {
  return {{"protocol_version", kProtocolVersion},
          {"question_id", req.question_id},
          {"question", req.question_text},
          {"prefix", req.prefix},
          {"params", {{"temperature", p.temperature}, {"top_p", p.top_p}, {"n", p.n}, {"max_steps", p.max_steps}}},
          {"stop_at_step", req.stop_at_step},
          {"ordinal", req.ordinal}};
}

inline std::pair<PolicyRequest, SamplingParams> parse_sample_request(const Json& j) {
  return decode([&] {
    check_version(j);
    PolicyRequest req;
    req.question_id = j.at("question_id").get<std::string>();
    req.question_text = j.at("question").get<std::string>();
    req.prefix = j.value("prefix", std::string{});
    req.stop_at_step = j.value("stop_at_step", false);
    req.ordinal = j.value("ordinal", std::uint64_t{0});
    SamplingParams p;
    const auto& params = j.at("params");
    p.temperature = params.value("temperature", p.temperature);
    p.top_p = params.value("top_p", p.top_p);
    p.n = params.value("n", p.n);
    p.max_steps = params.value("max_steps", p.max_steps);
    try {
      p.validate();
    } catch (const Error& e) {
      throw Error("schema", e.what());
    }
    return std::pair{req, p};
  });
}

inline Json sample_response(const std::vector<Continuation>& conts) {
  Json arr = Json::array();
  for (const auto& c : conts) {
    Json item = {{"text", c.text}, {"steps_generated", c.steps_generated}};
    if (c.log_prob) item["log_prob"] = *c.log_prob;
    arr.push_back(std::move(item));
  }
  return {{"protocol_version", kProtocolVersion}, {"continuations", arr}};
}

inline std::vector<Continuation> parse_sample_response(const Json& j) {
  return decode([&] {
    check_version(j);
    std::vector<Continuation> out;
    for (const auto& item : j.at("continuations")) {
      Continuation c;
      c.text = item.at("text").get<std::string>();
      c.steps_generated = item.at("steps_generated").get<int>();
      if (item.contains("log_prob") && !item.at("log_prob").is_null()) c.log_prob = item.at("log_prob").get<double>();
      out.push_back(std::move(c));
    }
    return out;
  });
}

// ---- /v1/score -----------------------------------------------------------

inline Json score_request(std::string_view question, const Trace& trace, bool partial) {
  return {{"protocol_version", kProtocolVersion},
          {"question", question},
          {"trace", trace_to_json(trace)},
          {"partial", partial}};
}

struct ScoreRequest {
  std::string question;
  Trace trace;
  bool partial = false;
};

inline ScoreRequest parse_score_request(const Json& j) {
  return decode([&] {
    check_version(j);
    return ScoreRequest{j.at("question").get<std::string>(), trace_from_json(j.at("trace")), j.value("partial", false)};
  });
}

inline Json score_response(const StepwiseScores& s) {
  Json j = {{"protocol_version", kProtocolVersion}, {"step_scores", s.step_scores}};
  j["answer_score"] = s.answer_score ? Json(*s.answer_score) : Json(nullptr);
  return j;
}

inline StepwiseScores parse_score_response(const Json& j) {
  return decode([&] {
    check_version(j);
    StepwiseScores s;
    s.step_scores = j.at("step_scores").get<std::vector<double>>();
    const auto& a = j.at("answer_score");
    if (!a.is_null()) s.answer_score = a.get<double>();
    return s;
  });
}

// ---- /v1/judge -----------------------------------------------------------

inline Json judge_request(std::string_view question, const Trace& trace) {
  return {{"protocol_version", kProtocolVersion}, {"question", question}, {"trace", trace_to_json(trace)}};
}

struct JudgeRequest {
  std::string question;
  Trace trace;
};

inline JudgeRequest parse_judge_request(const Json& j) {
  return decode([&] {
    check_version(j);
    return JudgeRequest{j.at("question").get<std::string>(), trace_from_json(j.at("trace"))};
  });
}

inline Json judge_response(const std::vector<JudgeLabel>& labels) {
  Json arr = Json::array();
  for (auto l : labels) arr.push_back(to_string(l));
  return {{"protocol_version", kProtocolVersion}, {"labels", arr}};
}

inline std::vector<JudgeLabel> parse_judge_response(const Json& j) {
  return decode([&] {
    check_version(j);
    std::vector<JudgeLabel> out;
    for (const auto& l : j.at("labels")) out.push_back(judge_label_from_string(l.get<std::string>()));
    return out;
  });
}

// ---- errors ---------------------------------------------------------------

inline Json error_response(const std::string& code, const std::string& message) {
  return {{"protocol_version", kProtocolVersion}, {"error", {{"code", code}, {"message", message}}}};
}

}  // namespace costep::wire
