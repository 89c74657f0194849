#pragma once

#include "promptner/backend.hpp"
#include "promptner/corpus.hpp"
#include "promptner/scheduler.hpp"

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace promptner::ensemble {

inline constexpr std::string_view kAnswerSentinel = "ANSWER:";
inline constexpr std::string_view kNoneToken = "NONE";

struct BooleanAnswer {
  std::string reasoning;
  bool answer = false;
  bool parse_ok = false;
};

struct ListAnswer {
  std::string reasoning;
  std::vector<std::string> answer;
  bool parse_ok = false;
  // The raw sentinel line the answer was read from (empty if none).
  std::string answer_line;
};

/// Reads the last line of the form "ANSWER: YES" / "ANSWER: NO"
/// (case-insensitive, optional trailing period).
BooleanAnswer parse_boolean(std::string_view response);

/// Reads the last "ANSWER:" line, whose payload is NONE or a bracketed list
/// of single- or double-quoted strings. Blank items are dropped.
ListAnswer parse_extraction(std::string_view response);

/// Canonical answer line: ANSWER: ["a", "b"] or ANSWER: NONE.
std::string format_answer_line(const std::vector<std::string>& items);

/// Lowercase, collapse whitespace, strip surrounding punctuation.
std::string dedup_key(std::string_view mention);

/// Concatenates per-prompt lists in ensemble order and keeps the first
/// surface form of every dedup key.
std::vector<std::string> merge_extractions(const std::vector<std::vector<std::string>>& per_prompt);

/// votes_positive > votes_total / 2, so ties never advance.
constexpr bool strict_majority(std::size_t votes_positive, std::size_t votes_total) {
  return 2 * votes_positive > votes_total;
}

struct EnsemblePrompt {
  int candidate_id = 0;
  std::string text;
  bool operator==(const EnsemblePrompt&) const = default;
};

struct PromptEnsemble {
  std::string entity;
  std::vector<EnsemblePrompt> prompts;
};

enum class Vote { Yes, No, Unparsed, Failed };
std::string_view vote_name(Vote vote);

struct ScreeningResult {
  corpus::SentenceKey sentence;
  std::vector<Vote> votes;  // one per prompt, ensemble order
  std::size_t votes_positive = 0;
  std::size_t votes_total = 0;
  bool advanced = false;
};

struct Extraction {
  std::string note_id;
  std::size_t sentence_index = 0;
  std::string entity;
  std::vector<std::string> texts;
};

struct InferenceOptions {
  std::size_t screen_max_tokens = 256;
  std::size_t extract_max_tokens = 512;
  // Prepended to the ledger stage names "screening" and "extraction".
  std::string stage_prefix;
  // Model override sent with every request (empty: backend default).
  std::string model;
};

backend::GenerationRequest screening_request(const corpus::EntityType& entity,
                                             std::string_view prompt,
                                             std::string_view sentence_text,
                                             const InferenceOptions& options = {});
backend::GenerationRequest extraction_request(const corpus::EntityType& entity,
                                              std::string_view prompt,
                                              std::string_view sentence_text,
                                              const InferenceOptions& options = {});

/// One Boolean query per (prompt, sentence). Unparseable answers and
/// terminal scheduler failures count as negative votes and are logged.
std::vector<ScreeningResult> screen(const std::vector<corpus::Sentence>& sentences,
                                    const corpus::EntityType& entity,
                                    const PromptEnsemble& ensemble,
                                    scheduler::Scheduler& scheduler,
                                    std::vector<std::string>* log = nullptr,
                                    const InferenceOptions& options = {});

/// Runs every prompt on every given sentence and merges per sentence.
/// Sentences must all have advanced in screening.
std::vector<Extraction> extract(const std::vector<corpus::Sentence>& advanced,
                                const corpus::EntityType& entity,
                                const PromptEnsemble& ensemble,
                                scheduler::Scheduler& scheduler,
                                std::vector<std::string>* log = nullptr,
                                const InferenceOptions& options = {},
                                std::size_t* failed_queries = nullptr);

struct EntityRun {
  std::vector<ScreeningResult> screening;
  // Advanced sentences only, in input order.
  std::vector<Extraction> extractions;
  std::size_t screening_queries = 0;
  std::size_t extraction_queries = 0;
  // Queries the scheduler gave up on, both stages.
  std::size_t failed_queries = 0;
  std::vector<std::string> log;
};

/// Screen then extract over pre-segmented sentences.
EntityRun run_sentences(const std::vector<corpus::Sentence>& sentences,
                        const corpus::EntityType& entity, const PromptEnsemble& ensemble,
                        scheduler::Scheduler& scheduler, const InferenceOptions& options = {});

/// Segment, screen, extract. Output ordered by (note order, sentence index).
EntityRun run_entity(const std::vector<corpus::Note>& notes, const corpus::EntityType& entity,
                     const PromptEnsemble& ensemble, scheduler::Scheduler& scheduler,
                     const corpus::Segmenter& segmenter = corpus::RuleSegmenter(),
                     const InferenceOptions& options = {});

}  // namespace promptner::ensemble
