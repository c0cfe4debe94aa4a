#pragma once

// Chain-of-step trace format: a reasoning chain of steps, each with a name,
// a thought and a reflection span, wrapped in eleven special tokens and
// followed by a free-text answer.
//
//   <|reasoning_start|>
//     <|reasoning_step_start|>
//       <|reasoning_step_name_start|> ... <|reasoning_step_name_end|>
//       <|reasoning_step_thought_start|> ... <|reasoning_step_thought_end|>
//       <|reasoning_step_reflection_start|> ... <|reasoning_step_reflection_end|>
//     <|reasoning_step_end|>
//     <|reasoning_proceed|>          (between consecutive steps only)
//     ...
//   <|reasoning_end|>answer text
//
// Serialization never injects whitespace; payload text is kept verbatim.

#include "costep/core.hpp"

#include <json.hpp>

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace costep {

enum class SpecialToken : std::uint8_t {
  ReasoningStart,
  ReasoningEnd,
  StepStart,
  StepEnd,
  NameStart,
  NameEnd,
  ThoughtStart,
  ThoughtEnd,
  ReflectionStart,
  ReflectionEnd,
  Proceed,
};

inline constexpr std::size_t kSpecialTokenCount = 11;

inline constexpr std::array<std::string_view, kSpecialTokenCount> kTokenSurfaces = {
    "<|reasoning_start|>",
    "<|reasoning_end|>",
    "<|reasoning_step_start|>",
    "<|reasoning_step_end|>",
    "<|reasoning_step_name_start|>",
    "<|reasoning_step_name_end|>",
    "<|reasoning_step_thought_start|>",
    "<|reasoning_step_thought_end|>",
    "<|reasoning_step_reflection_start|>",
    "<|reasoning_step_reflection_end|>",
    "<|reasoning_proceed|>",
};

constexpr std::string_view surface(SpecialToken t) noexcept {
  return kTokenSurfaces[static_cast<std::size_t>(t)];
}

struct Step {
  std::string name;
  std::string thought;
  std::string reflection;

  bool operator==(const Step&) const = default;
};

struct Trace {
  std::vector<Step> steps;
  std::string answer;
  std::string question_id;

  bool operator==(const Trace&) const = default;
};

// Serialized reasoning up to and including step `step_index` (1-based),
// always followed by a proceed token so a continuation starts a new step.
struct TracePrefix {
  std::string question_id;
  std::size_t step_index = 0;
  std::string serialized_text;
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

inline std::string_view trim(std::string_view s) noexcept {
  constexpr std::string_view kSpace = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(kSpace);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(kSpace);
  return s.substr(b, e - b + 1);
}

inline bool contains_special_token(std::string_view s) noexcept {
  for (auto pos = s.find("<|"); pos != std::string_view::npos; pos = s.find("<|", pos + 1)) {
    for (auto surf : kTokenSurfaces) {
      if (s.substr(pos).starts_with(surf)) return true;
    }
  }
  return false;
}

namespace detail {

inline void check_field(std::string_view field, std::string_view what) {
  if (contains_special_token(field)) {
    throw Error("invalid-trace", std::string(what) + " contains a special token");
  }
}

inline void append_step(std::string& out, const Step& s) {
  check_field(s.name, "step name");
  check_field(s.thought, "step thought");
  check_field(s.reflection, "step reflection");
  out += surface(SpecialToken::StepStart);
  out += surface(SpecialToken::NameStart);
  out += s.name;
  out += surface(SpecialToken::NameEnd);
  out += surface(SpecialToken::ThoughtStart);
  out += s.thought;
  out += surface(SpecialToken::ThoughtEnd);
  out += surface(SpecialToken::ReflectionStart);
  out += s.reflection;
  out += surface(SpecialToken::ReflectionEnd);
  out += surface(SpecialToken::StepEnd);
}

}  // namespace detail

// Steps joined by proceed tokens, without the start/end wrappers.
inline std::string serialize_steps(std::span<const Step> steps) {
  std::string out;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (i > 0) out += surface(SpecialToken::Proceed);
    detail::append_step(out, steps[i]);
  }
  return out;
}

// Checks the strict invariants; throws Error{"invalid-trace"}.
inline void validate_strict(const Trace& t) {
  if (t.steps.empty()) throw Error("invalid-trace", "trace has no steps");
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto& s = t.steps[i];
    const std::string where = "step " + std::to_string(i + 1);
    if (trim(s.name).empty()) throw Error("invalid-trace", where + " has an empty name");
    if (trim(s.thought).empty()) throw Error("invalid-trace", where + " has an empty thought");
    if (trim(s.reflection).empty()) throw Error("invalid-trace", where + " has an empty reflection");
    detail::check_field(s.name, where + " name");
    detail::check_field(s.thought, where + " thought");
    detail::check_field(s.reflection, where + " reflection");
  }
  if (trim(t.answer).empty()) throw Error("invalid-trace", "answer is empty");
  detail::check_field(t.answer, "answer");
}

inline std::string serialize_trace(const Trace& t) {
  validate_strict(t);
  std::string out(surface(SpecialToken::ReasoningStart));
  out += serialize_steps(t.steps);
  out += surface(SpecialToken::ReasoningEnd);
  out += t.answer;
  return out;
}

// Start token, the given steps, and a trailing proceed token. With no steps
// this is just the start token.
inline std::string serialize_prefix(std::span<const Step> steps) {
  std::string out(surface(SpecialToken::ReasoningStart));
  out += serialize_steps(steps);
  if (!steps.empty()) out += surface(SpecialToken::Proceed);
  return out;
}

inline TracePrefix prefix_at(const Trace& t, std::size_t k) {
  if (k < 1 || k > t.steps.size()) {
    throw Error("index-out-of-range",
                "prefix index " + std::to_string(k) + " outside 1.." + std::to_string(t.steps.size()));
  }
  return {t.question_id, k, serialize_prefix(std::span(t.steps).first(k))};
}

// Appends a continuation to a prefix. A prefix that already holds its final
// step ends in a proceed token; a continuation that then goes straight to the
// end token replaces that dangling delimiter.
inline std::string join_continuation(std::string_view prefix, std::string_view continuation) {
  constexpr auto kProceed = surface(SpecialToken::Proceed);
  constexpr auto kEnd = surface(SpecialToken::ReasoningEnd);
  std::string out;
  if (prefix.ends_with(kProceed) && continuation.starts_with(kEnd)) {
    out = prefix.substr(0, prefix.size() - kProceed.size());
  } else {
    out = prefix;
  }
  out += continuation;
  return out;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

enum class ParseMode { Strict, Lenient };

enum class ParseErrorKind {
  UnterminatedSpan,  // input or span ended before its closing token
  MisorderedToken,   // a structural token appeared out of grammar order
  MissingAnswer,     // nothing but whitespace after the end token
  UnexpectedText,    // text where only tokens may appear
  EmptyField,        // name/thought/reflection blank after trimming
};

constexpr std::string_view to_string(ParseErrorKind k) noexcept {
  switch (k) {
    case ParseErrorKind::UnterminatedSpan: return "unterminated-span";
    case ParseErrorKind::MisorderedToken: return "misordered-token";
    case ParseErrorKind::MissingAnswer: return "missing-answer";
    case ParseErrorKind::UnexpectedText: return "unexpected-text";
    case ParseErrorKind::EmptyField: return "empty-field";
  }
  return "unknown";
}

struct ParseError {
  ParseErrorKind kind;
  std::size_t offset = 0;
  std::string expected;
  std::string found;

  std::string message() const {
    return std::string(to_string(kind)) + " at byte " + std::to_string(offset) + ": expected " +
           expected + ", found " + found;
  }
};

struct Violation {
  std::size_t offset = 0;
  std::string description;
};

struct ParsedTrace {
  Trace trace;
  std::vector<Violation> violations;  // lenient mode only
};

using ParseResult = std::variant<ParsedTrace, ParseError>;

namespace detail {

struct Lexeme {
  std::optional<SpecialToken> token;  // nullopt for a run of text
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<Lexeme> lex(std::string_view text) {
  std::vector<Lexeme> out;
  std::size_t text_begin = 0;
  std::size_t pos = text.find("<|");
  while (pos != std::string_view::npos) {
    std::optional<SpecialToken> hit;
    for (std::size_t i = 0; i < kTokenSurfaces.size(); ++i) {
      if (text.substr(pos).starts_with(kTokenSurfaces[i])) {
        hit = static_cast<SpecialToken>(i);
        break;
      }
    }
    if (!hit) {
      pos = text.find("<|", pos + 1);
      continue;
    }
    if (pos > text_begin) out.push_back({std::nullopt, text_begin, pos});
    const std::size_t end = pos + surface(*hit).size();
    out.push_back({hit, pos, end});
    text_begin = end;
    pos = text.find("<|", end);
  }
  if (text_begin < text.size()) out.push_back({std::nullopt, text_begin, text.size()});
  return out;
}

class Parser {
public:
  Parser(std::string_view text, ParseMode mode) : text_(text), mode_(mode), lex_(lex(text)) {}

  // Parses a complete trace (through the answer).
  ParseResult parse_trace() {
    ParsedTrace out;
    if (auto e = expect(SpecialToken::ReasoningStart)) return *e;
    for (;;) {
      Step step;
      if (auto e = parse_step(step, out.violations)) return *e;
      out.trace.steps.push_back(std::move(step));
      if (at_end()) return unterminated("<|reasoning_proceed|> or <|reasoning_end|>");
      const auto& lx = lex_[i_];
      if (!lx.token) return unexpected_text(lx, "<|reasoning_proceed|> or <|reasoning_end|>");
      if (*lx.token == SpecialToken::Proceed) {
        ++i_;
        continue;
      }
      if (*lx.token == SpecialToken::ReasoningEnd) {
        ++i_;
        break;
      }
      return misordered(lx, "<|reasoning_proceed|> or <|reasoning_end|>");
    }
    const std::size_t answer_at = i_ < lex_.size() ? lex_[i_].begin : text_.size();
    if (!at_end()) {
      const auto& lx = lex_[i_];
      if (lx.token) return misordered(lx, "answer text");
      out.trace.answer = std::string(slice(lx));
      ++i_;
      if (!at_end()) return misordered(lex_[i_], "end of input");
    }
    if (trim(out.trace.answer).empty()) {
      return ParseError{ParseErrorKind::MissingAnswer, answer_at, "answer text", describe_here()};
    }
    return out;
  }

  // Parses a rollout seed: start token, zero or more steps, each followed
  // by a proceed token, and nothing else.
  std::variant<std::vector<Step>, ParseError> parse_prefix() {
    std::vector<Step> steps;
    std::vector<Violation> ignored;
    if (auto e = expect(SpecialToken::ReasoningStart)) return *e;
    while (!at_end()) {
      Step step;
      if (auto e = parse_step(step, ignored)) return *e;
      steps.push_back(std::move(step));
      if (auto e = expect(SpecialToken::Proceed)) return *e;
    }
    return steps;
  }

private:
  bool at_end() const { return i_ >= lex_.size(); }

  std::string_view slice(const Lexeme& lx) const { return text_.substr(lx.begin, lx.end - lx.begin); }

  std::string describe(const Lexeme& lx) const {
    if (lx.token) return std::string(surface(*lx.token));
    return "text";
  }
  std::string describe_here() const { return at_end() ? "end of input" : describe(lex_[i_]); }

  ParseError unterminated(std::string expected) const {
    return {ParseErrorKind::UnterminatedSpan, text_.size(), std::move(expected), "end of input"};
  }
  ParseError misordered(const Lexeme& lx, std::string expected) const {
    return {ParseErrorKind::MisorderedToken, lx.begin, std::move(expected), describe(lx)};
  }
  ParseError unexpected_text(const Lexeme& lx, std::string expected) const {
    return {ParseErrorKind::UnexpectedText, lx.begin, std::move(expected), "text"};
  }

  std::optional<ParseError> expect(SpecialToken t) {
    if (at_end()) return unterminated(std::string(surface(t)));
    const auto& lx = lex_[i_];
    if (!lx.token) return unexpected_text(lx, std::string(surface(t)));
    if (*lx.token != t) return misordered(lx, std::string(surface(t)));
    ++i_;
    return std::nullopt;
  }

  // open-token payload close-token; payload may be absent (empty).
  std::optional<ParseError> span(SpecialToken open, SpecialToken close, std::string& payload,
                                 std::size_t& payload_at) {
    if (auto e = expect(open)) return e;
    payload_at = at_end() ? text_.size() : lex_[i_].begin;
    if (!at_end() && !lex_[i_].token) {
      payload = std::string(slice(lex_[i_]));
      ++i_;
    }
    if (at_end()) return unterminated(std::string(surface(close)));
    const auto& lx = lex_[i_];
    if (*lx.token != close) {
      return ParseError{ParseErrorKind::UnterminatedSpan, lx.begin, std::string(surface(close)), describe(lx)};
    }
    ++i_;
    return std::nullopt;
  }

  std::optional<ParseError> require_content(const std::string& payload, std::size_t at,
                                            std::string_view what) const {
    if (trim(payload).empty()) {
      return ParseError{ParseErrorKind::EmptyField, at, "non-empty " + std::string(what), "blank text"};
    }
    return std::nullopt;
  }

  std::optional<ParseError> parse_step(Step& step, std::vector<Violation>& violations) {
    std::size_t at = 0;
    if (auto e = expect(SpecialToken::StepStart)) return e;
    if (auto e = span(SpecialToken::NameStart, SpecialToken::NameEnd, step.name, at)) return e;
    if (auto e = require_content(step.name, at, "step name")) return e;
    if (auto e = span(SpecialToken::ThoughtStart, SpecialToken::ThoughtEnd, step.thought, at)) return e;
    if (auto e = require_content(step.thought, at, "step thought")) return e;

    if (mode_ == ParseMode::Lenient && !at_end() && lex_[i_].token == SpecialToken::StepEnd) {
      violations.push_back({lex_[i_].begin, "missing reflection span; reflection set to empty"});
    } else {
      if (auto e = span(SpecialToken::ReflectionStart, SpecialToken::ReflectionEnd, step.reflection, at)) {
        return e;
      }
      if (mode_ == ParseMode::Strict) {
        if (auto e = require_content(step.reflection, at, "step reflection")) return e;
      } else if (trim(step.reflection).empty()) {
        violations.push_back({at, "blank reflection"});
      }
    }
    return expect(SpecialToken::StepEnd);
  }

  std::string_view text_;
  ParseMode mode_;
  std::vector<Lexeme> lex_;
  std::size_t i_ = 0;
};

}  // namespace detail

inline ParseResult parse_trace(std::string_view text, ParseMode mode = ParseMode::Strict,
                               std::string question_id = {}) {
  auto result = detail::Parser(text, mode).parse_trace();
  if (auto* ok = std::get_if<ParsedTrace>(&result)) ok->trace.question_id = std::move(question_id);
  return result;
}

// Throws Error{"parse"} carrying the ParseError message.
inline Trace parse_trace_or_throw(std::string_view text, ParseMode mode = ParseMode::Strict,
                                  std::string question_id = {}) {
  auto result = parse_trace(text, mode, std::move(question_id));
  if (auto* e = std::get_if<ParseError>(&result)) throw Error("parse", e->message());
  return std::move(std::get<ParsedTrace>(result).trace);
}

// Strictly parses a rollout seed produced by serialize_prefix. The empty
// string is accepted as "no prefix".
inline std::variant<std::vector<Step>, ParseError> parse_prefix(std::string_view text) {
  if (text.empty()) return std::vector<Step>{};
  return detail::Parser(text, ParseMode::Strict).parse_prefix();
}

// ---------------------------------------------------------------------------
// JSON interchange: {question_id, steps:[{name,thought,reflection}], answer, raw_text?}
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json step_to_json(const Step& s) {
  return {{"name", s.name}, {"thought", s.thought}, {"reflection", s.reflection}};
}

inline Step step_from_json(const nlohmann::ordered_json& j) {
  Step s;
  s.name = j.at("name").get<std::string>();
  s.thought = j.at("thought").get<std::string>();
  s.reflection = j.value("reflection", std::string{});
  return s;
}

inline nlohmann::ordered_json trace_to_json(const Trace& t, bool with_raw_text = false) {
  nlohmann::ordered_json j;
  j["question_id"] = t.question_id;
  auto steps = nlohmann::ordered_json::array();
  for (const auto& s : t.steps) steps.push_back(step_to_json(s));
  j["steps"] = std::move(steps);
  j["answer"] = t.answer;
  if (with_raw_text) j["raw_text"] = serialize_trace(t);
  return j;
}

inline Trace trace_from_json(const nlohmann::ordered_json& j) {
  Trace t;
  t.question_id = j.value("question_id", std::string{});
  for (const auto& s : j.at("steps")) t.steps.push_back(step_from_json(s));
  t.answer = j.value("answer", std::string{});
  return t;
}

}  // namespace costep
