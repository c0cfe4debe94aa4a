#pragma once

// HTTP clients for remote policy, scorer and judge backends. Each call opens
// its own connection, so the handles are safe to share between threads.
// Including this header requires linking pthreads (cpp-httplib).

#include "costep/annotate.hpp"
#include "costep/core.hpp"
#include "costep/policy.hpp"
#include "costep/reward.hpp"
#include "costep/wire.hpp"

#include <httplib.h>

#include <memory>
#include <string>

namespace costep {

struct RemoteEndpoint {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  int timeout_seconds = 60;
};

namespace detail {

inline wire::Json post_json(const RemoteEndpoint& ep, const std::string& path, const wire::Json& body) {
  httplib::Client client(ep.base_url);
  client.set_connection_timeout(ep.timeout_seconds, 0);
  client.set_read_timeout(ep.timeout_seconds, 0);
  auto res = client.Post(path, body.dump(), "application/json");
  if (!res) {
    throw Error("backend-unreachable", ep.base_url + path + ": " + httplib::to_string(res.error()));
  }
  wire::Json reply;
  try {
    reply = wire::Json::parse(res->body);
  } catch (const nlohmann::json::exception&) {
    throw Error("backend-error", ep.base_url + path + " returned HTTP " + std::to_string(res->status) + " with a non-JSON body");
  }
  if (res->status != 200) {
    std::string code = "backend-error";
    std::string message = "HTTP " + std::to_string(res->status);
    if (reply.contains("error")) {
      code = "backend-" + reply["error"].value("code", std::string("error"));
      message += ": " + reply["error"].value("message", std::string{});
    }
    throw Error(code, ep.base_url + path + " " + message);
  }
  return reply;
}

}  // namespace detail

class RemotePolicy : public Policy {
public:
  explicit RemotePolicy(RemoteEndpoint ep) : ep_(std::move(ep)) {}

  std::vector<Continuation> sample(const PolicyRequest& req, const SamplingParams& params) const override {
    auto conts = wire::parse_sample_response(detail::post_json(ep_, "/v1/sample", wire::sample_request(req, params)));
    if (conts.size() != static_cast<std::size_t>(params.n)) {
      throw Error("backend-error", "asked for " + std::to_string(params.n) + " continuations, got " +
                                       std::to_string(conts.size()));
    }
    return conts;
  }

private:
  RemoteEndpoint ep_;
};

class RemoteScorer : public Scorer {
public:
  explicit RemoteScorer(RemoteEndpoint ep) : ep_(std::move(ep)) {}

  StepwiseScores score(std::string_view question, const Trace& trace, bool partial) const override {
    return wire::parse_score_response(detail::post_json(ep_, "/v1/score", wire::score_request(question, trace, partial)));
  }

private:
  RemoteEndpoint ep_;
};

class RemoteJudge : public Judge {
public:
  explicit RemoteJudge(RemoteEndpoint ep) : ep_(std::move(ep)) {}

  std::vector<JudgeLabel> judge(std::string_view question, const Trace& trace) const override {
    return wire::parse_judge_response(detail::post_json(ep_, "/v1/judge", wire::judge_request(question, trace)));
  }

private:
  RemoteEndpoint ep_;
};

}  // namespace costep
