#pragma once

#include "promptner/backend.hpp"
#include "promptner/corpus.hpp"
#include "promptner/evalkit.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace promptner::posttrain {

using corpus::LabeledSentence;

struct SftExample {
  // system = instruction prompt, user = sentence text, assistant = answer line
  std::vector<backend::ChatMessage> messages;
  std::string entity;
  bool positive = false;
  std::vector<std::string> golds;
  corpus::SentenceKey sentence;
};

SftExample make_sft_example(const std::string& system_prompt, const LabeledSentence& sentence,
                            const std::string& entity);

struct SftConfig {
  double val_ratio = 0.1;
  std::size_t train_neg_multiplier = 3;
  std::uint64_t seed = 0;
};

/// Labeled sentences of one entity plus the instruction used as system prompt.
struct EntityLabels {
  std::string entity;
  std::string system_prompt;
  std::vector<LabeledSentence> positives;
  std::vector<LabeledSentence> negatives;
};

struct SftStats {
  std::string entity;
  std::size_t corpus_pos = 0;
  std::size_t corpus_neg = 0;
  std::size_t train_pos = 0;
  std::size_t train_neg = 0;
  std::size_t val_pos = 0;
  std::size_t val_neg = 0;
};

struct SftDataset {
  std::vector<SftExample> train;
  std::vector<SftExample> val;
  std::vector<SftStats> stats;
  std::vector<std::string> log;
};

/// Per entity: positives split 9:1 (val floor, at least 1 from 10 positives
/// on); train takes min(3 * train_pos, available) negatives; val takes
/// round(val_pos * corpus_neg / corpus_pos) of the remaining ones. Entities
/// without positives are skipped and logged.
SftDataset build_sft_dataset(const std::vector<EntityLabels>& entities, const SftConfig& cfg);

/// The request an SFT model sees: the example's system and user messages.
backend::GenerationRequest sft_request(const SftExample& example, const std::string& model,
                                       std::size_t max_new_tokens = 512);

struct SftPrediction {
  SftExample example;
  std::string response;
};

struct PreferencePair {
  std::vector<backend::ChatMessage> prompt;  // system, user
  std::string chosen;
  std::string rejected;
  std::string entity;
  corpus::SentenceKey sentence;
};

/// True when the response's parsed answer disagrees with the golds under
/// soft matching (any false positive or false negative).
bool prediction_incorrect(const SftPrediction& prediction,
                          double threshold = evalkit::kDefaultMatchThreshold);

/// One pair per incorrect prediction: chosen is the canonical gold answer
/// line, rejected the model's answer line (its whole trimmed reply when it
/// has none). Pairs whose two sides coincide are skipped.
std::vector<PreferencePair> build_dpo_dataset(const std::vector<SftPrediction>& predictions,
                                              double threshold = evalkit::kDefaultMatchThreshold);

/// Per-entity counts of SFT predictions scored against their golds.
evalkit::MetricsReport score_predictions(const std::vector<SftPrediction>& predictions,
                                         double threshold = evalkit::kDefaultMatchThreshold);

/// micro.f1 > min_f1 or macro.f1 > min_f1.
bool gate_for_dpo(const evalkit::MetricsReport& report, double min_f1 = 0.6);

void write_sft(const std::filesystem::path& path, const std::vector<SftExample>& examples);
std::vector<SftExample> read_sft(const std::filesystem::path& path);
void write_dpo(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_dpo(const std::filesystem::path& path);

}  // namespace promptner::posttrain
