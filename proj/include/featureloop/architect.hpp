#pragma once

#include <cstdio>
#include <regex>
#include <string>
#include <vector>

#include "featureloop/core.hpp"
#include "featureloop/llm.hpp"
#include "featureloop/memory.hpp"
#include "featureloop/random.hpp"
#include "featureloop/sentinel.hpp"

namespace featureloop {

inline constexpr std::size_t kFeedbackSize = 5;

inline constexpr std::string_view kInstructionPreamble =
    "You are tasked with rewriting the following USER prompt to achieve higher accuracy when "
    "extracting content for building click-through-rate models and any other comma-separated "
    "multi-value feature (topics, persona, etc.). Be creative, keep the output format unchanged. "
    "Think outside the scope of the existing prompts linked below. Think hard about the "
    "implications of your change. Only return the new USER prompt.";

inline constexpr std::string_view kEmptyContext = "No evaluated prompts yet.";
inline constexpr std::string_view kRepairSuffix = " <begin_raw_text> {raw_text} <end_raw_text>";

struct FeedbackEntry {
  double score;
  std::string prompt_text;
};

struct FeedbackContext {
  std::vector<FeedbackEntry> best;   // descending
  std::vector<FeedbackEntry> worst;  // ascending
};

inline FeedbackContext feedback_context(const MemoryStore& memory) {
  FeedbackContext ctx;
  for (const auto& r : memory.top_k(kFeedbackSize)) ctx.best.push_back({r.relative_score, r.prompt_text});
  for (const auto& r : memory.bottom_k(kFeedbackSize)) ctx.worst.push_back({r.relative_score, r.prompt_text});
  return ctx;
}

inline std::string format_score(double score) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", score);
  return buf;
}

/// Renders feedback as
///
///   BEST PROMPTS (score)
///   [score=0.012000] <prompt>
///   ---
///   [score=0.010000] <prompt>
///   WORST PROMPTS (score)
///   [score=-0.003000] <prompt>
///
/// or the single line "No evaluated prompts yet." when there is nothing.
inline std::string render_context_block(const FeedbackContext& ctx) {
  if (ctx.best.empty() && ctx.worst.empty()) return std::string(kEmptyContext);
  std::string out;
  auto section = [&](std::string_view title, const std::vector<FeedbackEntry>& entries) {
    out += title;
    out += '\n';
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i) out += "---\n";
      out += "[score=" + format_score(entries[i].score) + "] " + entries[i].prompt_text + '\n';
    }
  };
  section("BEST PROMPTS (score)", ctx.best);
  section("WORST PROMPTS (score)", ctx.worst);
  out.pop_back();
  return out;
}

inline std::string build_context_block(const MemoryStore& memory) {
  return render_context_block(feedback_context(memory));
}

/// Literal, single-pass substitution into the refinement instruction.
inline std::string build_instruction(std::string_view base_prompt, std::string_view context_block) {
  std::string out(kInstructionPreamble);
  out += '\n';
  out += context_block;
  out += "\n---\nOriginal USER prompt: ";
  out += base_prompt;
  out += "\n---";
  return out;
}

/// Picks the prompt to refine: the best ok prompt with probability
/// 1 - epsilon, otherwise a uniformly random distinct ok prompt. Falls back
/// to `seed` when memory holds no ok records.
inline std::string select_base(const MemoryStore& memory, Rng& rng, double epsilon,
                               std::string_view seed = kSeedUserTemplate) {
  const auto records = memory.read_all();
  std::vector<const ScoreRecord*> distinct;
  {
    std::unordered_set<std::string> seen;
    for (const auto& r : records) {
      if (r.status == Status::ok && seen.insert(r.prompt_id).second) distinct.push_back(&r);
    }
  }
  if (distinct.empty()) return std::string(seed);
  if (rng.uniform() < epsilon) return distinct[rng.below(distinct.size())]->prompt_text;
  const ScoreRecord* best = nullptr;
  for (const auto& r : records) {
    if (r.status == Status::ok && (!best || better_than(r, *best))) best = &r;
  }
  return best->prompt_text;
}

class RefinementError : public Error {
 public:
  using Error::Error;
};

/// Strips decoration a strong model tends to add around its answer: one
/// layer of ``` fences, a leading "USER prompt:"-style label, then
/// surrounding quotes.
inline std::string extract_reply(std::string_view reply) {
  std::string text(trim(reply));

  const auto open = text.find("```");
  if (open != std::string::npos) {
    const auto close = text.find("```", open + 3);
    if (close != std::string::npos) {
      std::string inner = text.substr(open + 3, close - open - 3);
      // Drop an info string such as ```text on the opening line.
      const auto nl = inner.find('\n');
      if (nl != std::string::npos && trim(std::string_view(inner).substr(0, nl)).find(' ') == std::string_view::npos) {
        inner.erase(0, nl + 1);
      }
      text = std::string(trim(inner));
    }
  }

  static const std::regex label(R"(^\s*(\*\*)?((new|revised|rewritten|improved)\s+)?(user\s+)?prompt(\*\*)?\s*:(\*\*)?\s*)",
                                std::regex::icase);
  text = std::regex_replace(text, label, "", std::regex_constants::format_first_only);
  text = std::string(trim(text));

  auto strip_pair = [&](std::string_view open_q, std::string_view close_q) {
    if (text.size() >= open_q.size() + close_q.size() && text.starts_with(open_q) && text.ends_with(close_q)) {
      text = std::string(trim(std::string_view(text).substr(open_q.size(), text.size() - open_q.size() - close_q.size())));
      return true;
    }
    return false;
  };
  strip_pair("\"", "\"") || strip_pair("'", "'") || strip_pair("\xE2\x80\x9C", "\xE2\x80\x9D");
  return text;
}

struct RefineOptions {
  double temperature = 1.0;
  int max_output_tokens = 2048;
  std::string model;
  std::string agent_id;
};

/// One architect step: feedback + base prompt in, validated child template out.
inline PromptTemplate refine(const PromptTemplate& base, const MemoryStore& memory, Backend& backend,
                             const RefineOptions& opts) {
  ChatRequest req;
  req.system = std::string(kSystemPrompt);
  req.user = build_instruction(base.user_template, build_context_block(memory));
  req.temperature = opts.temperature;
  req.max_output_tokens = opts.max_output_tokens;
  req.model = opts.model;

  std::string text = extract_reply(backend.complete(req).text);
  if (text.empty()) throw RefinementError("architect returned an empty prompt");
  try {
    return derive_template(base, text, opts.agent_id);
  } catch (const TemplateError& e) {
    if (e.kind() != TemplateError::Kind::MissingPlaceholder) {
      throw RefinementError(std::string("architect prompt rejected: ") + e.what());
    }
  }
  text += kRepairSuffix;
  try {
    return derive_template(base, text, opts.agent_id);
  } catch (const TemplateError& e) {
    throw RefinementError(std::string("architect prompt rejected after repair: ") + e.what());
  }
}

}  // namespace featureloop
