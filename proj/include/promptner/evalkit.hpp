#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace promptner::evalkit {

inline constexpr double kDefaultMatchThreshold = 80.0;

/// Normalized insert/delete similarity in [0, 100]:
/// 100 * (1 - D / (|a| + |b|)) with D = |a| + |b| - 2 * LCS(a, b).
/// Two empty strings score 100. Lengths are counted in code points.
double indel_similarity(std::string_view a, std::string_view b);
double indel_similarity(std::u32string_view a, std::u32string_view b);

/// Best indel_similarity between the shorter input and any contiguous
/// substring (the empty one included) of the longer input. Symmetric; any
/// exact substring scores 100.
double partial_similarity(std::string_view a, std::string_view b);
double partial_similarity(std::u32string_view a, std::u32string_view b);

/// Case-folded, whitespace-normalized partial similarity. This is the score
/// used for every soft-match decision in the pipeline.
double soft_similarity(std::string_view a, std::string_view b);

struct EntityCounts {
  std::string entity;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  EntityCounts& operator+=(const EntityCounts& other) {
    tp += other.tp;
    fp += other.fp;
    fn += other.fn;
    return *this;
  }
  bool operator==(const EntityCounts&) const = default;
};

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool operator==(const Metrics&) const = default;
};

struct MatchPair {
  std::size_t pred = 0;
  std::size_t gold = 0;
  double score = 0.0;
};

/// Greedy one-to-one soft matching. Candidate pairs scoring >= threshold are
/// accepted in order of descending score (ties: lower gold index, then lower
/// prediction index) when both sides are still free.
std::vector<MatchPair> soft_match(const std::vector<std::string>& preds,
                                  const std::vector<std::string>& golds,
                                  double threshold = kDefaultMatchThreshold);

EntityCounts match_entities(const std::vector<std::string>& preds,
                            const std::vector<std::string>& golds,
                            double threshold = kDefaultMatchThreshold);

/// P = 0 when nothing was predicted, R = 0 when there is no gold, F1 = 0
/// when P + R = 0.
Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn);
inline Metrics metrics_from_counts(const EntityCounts& c) {
  return metrics_from_counts(c.tp, c.fp, c.fn);
}

Metrics micro_average(const std::vector<EntityCounts>& counts);

/// Column-wise unweighted means. Macro F1 is the mean of per-entity F1, not
/// the harmonic mean of macro P and macro R. Throws on an empty map.
Metrics macro_average(const std::map<std::string, Metrics>& per_entity);

struct MetricsReport {
  std::map<std::string, EntityCounts> counts;
  std::map<std::string, Metrics> per_entity;
  Metrics micro;
  Metrics macro;
};

MetricsReport build_report(const std::vector<EntityCounts>& counts);

/// One labeled sentence as seen by the auxiliary accuracies: its gold spans
/// (empty for negatives) and the final extractions produced for it.
struct SentenceOutcome {
  bool positive = false;
  std::vector<std::string> golds;
  std::vector<std::string> extracted;
};

struct AuxiliaryAccuracies {
  double negative_accuracy = 0.0;
  double positive_softmatch_accuracy = 0.0;
};

/// Fraction of negatives with zero extractions, and fraction of positives
/// where at least one gold span is soft-matched by some extraction. An empty
/// class yields 1.0 for negatives and 0.0 for positives.
AuxiliaryAccuracies auxiliary_accuracies(const std::vector<SentenceOutcome>& outcomes,
                                         double threshold = kDefaultMatchThreshold);

std::string render_report_text(const MetricsReport& report);
std::string render_report_json(const MetricsReport& report);
MetricsReport parse_report_json(std::string_view json_text);

}  // namespace promptner::evalkit
