#pragma once

#include "promptner/backend.hpp"
#include "promptner/corpus.hpp"
#include "promptner/scheduler.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace promptner::dataset {

using corpus::LabeledSentence;

enum class Subset { Train, Val, Test };
inline constexpr std::array<Subset, 3> kSubsets = {Subset::Train, Subset::Val, Subset::Test};
std::string_view subset_name(Subset subset);
Subset parse_subset(std::string_view name);

struct SplitConfig {
  std::array<double, 3> ratios = {0.8, 0.1, 0.1};
  std::array<std::size_t, 3> neg_multipliers = {3, 10, 100};
  std::size_t min_positives = 10;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

struct SubsetCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
  bool operator==(const SubsetCounts&) const = default;
};

/// Positive counts per subset for n positives (n >= min_positives): val and
/// test get floor(ratio * n), each at least 1 once n >= 10; train takes the rest.
SubsetCounts positive_counts(std::size_t n, const SplitConfig& cfg);

struct EntityDataset {
  corpus::EntityType entity;
  std::vector<LabeledSentence> train_pos, train_neg;
  std::vector<LabeledSentence> val_pos, val_neg;
  std::vector<LabeledSentence> test_pos, test_neg;
  // Fewer positives than min_positives: train_pos doubles as the generation
  // set and test_pos as the evaluation set, holding the same sentences.
  bool small_entity_mode = false;
  std::uint64_t seed = 0;
  std::vector<std::string> log;

  const std::vector<LabeledSentence>& positives(Subset s) const;
  const std::vector<LabeledSentence>& negatives(Subset s) const;
  std::vector<LabeledSentence>& positives(Subset s);
  std::vector<LabeledSentence>& negatives(Subset s);

  /// Positives then negatives of one subset.
  std::vector<LabeledSentence> sentences(Subset s) const;
  /// Validation set used by prompt optimization; the generation set stands
  /// in when no validation sentences exist.
  std::vector<LabeledSentence> validation_set() const;
};

EntityDataset split(const corpus::EntityType& entity, std::vector<LabeledSentence> positives,
                    std::vector<LabeledSentence> negatives, const SplitConfig& cfg);

struct RevisionOutcome {
  std::vector<LabeledSentence> kept;
  std::vector<std::size_t> kept_indices;
  std::vector<std::size_t> dropped_indices;
  bool fell_back = false;
  std::string note;
};

/// Reads "KEEP: 0, 2, ..." from the last KEEP line. nullopt when absent,
/// malformed, empty, or any index is out of range. Indices come back sorted
/// and unique.
std::optional<std::vector<std::size_t>> parse_keep_line(std::string_view response, std::size_t n);

backend::GenerationRequest revision_request(const corpus::EntityType& entity,
                                            const std::vector<LabeledSentence>& positives);

/// Asks the model which positives to keep. Any failure keeps the input.
RevisionOutcome revise_positives(const corpus::EntityType& entity,
                                 const std::vector<LabeledSentence>& positives,
                                 backend::GenerationBackend& backend,
                                 scheduler::TokenLedger* ledger = nullptr);

/// One header record, then one record per sentence with its subset and
/// polarity. Text, offsets and matched golds are included so later stages can
/// rebuild the dataset from the manifest alone.
void write_manifest(const std::filesystem::path& path, const EntityDataset& dataset);
EntityDataset read_manifest(const std::filesystem::path& path, const corpus::EntityRegistry& registry);

}  // namespace promptner::dataset
