#pragma once

#include "promptner/backend.hpp"
#include "promptner/corpus.hpp"
#include "promptner/dataset.hpp"
#include "promptner/ensemble.hpp"
#include "promptner/evalkit.hpp"
#include "promptner/scheduler.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace promptner::promptgen {

struct PromptConfig {
  bool use_desc = true;
  bool use_ex = true;
  bool use_err = true;
  std::size_t n_candidates = 20;
  std::size_t max_rounds = 5;
  double val_f1_threshold = 0.8;
  double select_threshold = 0.9;
  std::size_t select_top_k = 3;
  std::size_t n_examples = 3;
  std::size_t max_error_examples = 10;
  // Rewrites attempted inside one round before the round counts as failed.
  std::size_t max_refine_attempts = 2;
  double match_threshold = evalkit::kDefaultMatchThreshold;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
};

inline constexpr std::string_view kPromptBegin = "<<<PROMPT>>>";
inline constexpr std::string_view kPromptEnd = "<<<END>>>";

inline constexpr std::size_t kMinPromptLength = 200;
inline constexpr std::size_t kMaxPromptLength = 6000;

struct CriterionInfo {
  std::string_view id;
  std::string_view requirement;
};

/// C1..C9 in order.
const std::vector<CriterionInfo>& criteria();

struct Verification {
  bool pass = false;
  std::vector<std::string> violations;
};

Verification verify_prompt(std::string_view text, std::string_view entity_name);

/// Text between the prompt markers, or the whole trimmed response when the
/// markers are missing.
std::string extract_prompt(std::string_view response);

struct ErrorExample {
  std::string sentence;
  std::vector<std::string> expected;
  std::vector<std::string> produced;
};

/// `previous` and `errors` only apply from round 2 on.
std::string compose_meta_prompt(const corpus::EntityType& entity, const dataset::EntityDataset& ds,
                                const PromptConfig& cfg, int candidate_id, std::size_t round = 1,
                                std::string_view previous = {},
                                const std::vector<ErrorExample>& errors = {});

backend::GenerationRequest generation_request(const corpus::EntityType& entity,
                                              const dataset::EntityDataset& ds,
                                              const PromptConfig& cfg, int candidate_id,
                                              std::size_t round = 1, std::string_view previous = {},
                                              const std::vector<ErrorExample>& errors = {});

backend::GenerationRequest refine_request(std::string_view text,
                                          const std::vector<std::string>& violations);

/// Throws std::invalid_argument on empty violations. Backend failures and
/// empty rewrites return `text` unchanged.
std::string refine_prompt(std::string_view text, const std::vector<std::string>& violations,
                          backend::GenerationBackend& backend,
                          scheduler::TokenLedger* ledger = nullptr);

struct EvaluationResult {
  evalkit::EntityCounts counts;
  evalkit::Metrics metrics;
  double negative_accuracy = 0.0;
  double positive_accuracy = 0.0;
  std::vector<ErrorExample> errors;  // every incorrect sentence, input order
};

/// Two-phase inference with the single prompt over `sentences`; counts are
/// summed over per-sentence soft matches against each sentence's golds.
EvaluationResult evaluate_prompt(std::string_view prompt,
                                 const std::vector<dataset::LabeledSentence>& sentences,
                                 const corpus::EntityType& entity, scheduler::Scheduler& scheduler,
                                 double match_threshold = evalkit::kDefaultMatchThreshold,
                                 const ensemble::InferenceOptions& options = {});

struct RoundRecord {
  std::size_t round = 0;
  bool verification_passed = false;
  // Criteria the first draft of this round failed; refinement tries to fix them.
  std::vector<std::string> violations;
  std::size_t refine_attempts = 0;
  std::string prompt;
  std::optional<EvaluationResult> validation;
  std::size_t error_examples_fed = 0;
  std::string note;
};

struct CandidatePrompt {
  std::string entity;
  int candidate_id = 0;
  std::string text;
  std::vector<RoundRecord> rounds;
  std::optional<std::size_t> best_round;
  double best_val_f1 = 0.0;
  std::optional<EvaluationResult> test;
  bool failed() const { return !best_round.has_value(); }
};

CandidatePrompt optimize_candidate(const corpus::EntityType& entity, const dataset::EntityDataset& ds,
                                   const PromptConfig& cfg, int candidate_id,
                                   scheduler::Scheduler& scheduler);

/// Candidates 1..n_candidates, ordered by id whatever the completion order.
std::vector<CandidatePrompt> optimize_entity(const corpus::EntityType& entity,
                                             const dataset::EntityDataset& ds,
                                             const PromptConfig& cfg,
                                             scheduler::Scheduler& scheduler);

/// Keyed on test F1 of non-failed candidates, ties to the lower id. More
/// than top_k strictly above the threshold: best top_k; 1..top_k above: all
/// of them; none: best top_k overall. Throws std::invalid_argument when no
/// candidate has a test score.
ensemble::PromptEnsemble select_ensemble(const std::vector<CandidatePrompt>& candidates,
                                         const PromptConfig& cfg);

/// Selection on bare scores: returns indices into `f1`, best first.
std::vector<std::size_t> select_indices(const std::vector<double>& f1, const std::vector<int>& ids,
                                        double threshold, std::size_t top_k);

void write_candidates(const std::filesystem::path& path, const std::string& entity,
                      const std::vector<CandidatePrompt>& candidates);
std::vector<CandidatePrompt> read_candidates(const std::filesystem::path& path);

void write_ensemble(const std::filesystem::path& path, const ensemble::PromptEnsemble& ensemble,
                    const std::vector<double>& test_f1 = {});
ensemble::PromptEnsemble read_ensemble(const std::filesystem::path& path);

}  // namespace promptner::promptgen
