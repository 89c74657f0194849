#include "promptner/evalkit.hpp"

#include "promptner/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace promptner::evalkit {
namespace {

using json = nlohmann::ordered_json;

std::size_t lcs_length(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (char32_t ca : a) {
    std::size_t diag = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t up = row[j];
      row[j] = ca == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
      diag = up;
    }
  }
  return row[b.size()];
}

double score_from_lcs(std::size_t lcs, std::size_t lensum) {
  if (lensum == 0) return 100.0;
  std::size_t dist = lensum - 2 * lcs;
  return 100.0 * (1.0 - static_cast<double>(dist) / static_cast<double>(lensum));
}

// Max over all windows of `longer` of 2*LCS/(|shorter|+|window|), tracked as
// an exact fraction so that the final double matches a direct evaluation of
// indel_similarity on the winning window.
double best_window_score(std::u32string_view shorter, std::u32string_view longer) {
  const std::size_t m = shorter.size();
  if (m == 0) return 100.0;  // the empty window
  if (longer.find(shorter) != std::u32string_view::npos) return 100.0;

  std::size_t best_lcs = 0;
  std::size_t best_sum = m;  // empty window: lcs 0
  std::vector<std::size_t> row(m + 1);
  for (std::size_t start = 0; start < longer.size(); ++start) {
    // A window opening on a character absent from `shorter` is always beaten
    // by the same window without that character.
    if (shorter.find(longer[start]) == std::u32string_view::npos) continue;
    std::fill(row.begin(), row.end(), 0);
    for (std::size_t end = start; end < longer.size(); ++end) {
      const char32_t c = longer[end];
      std::size_t diag = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        std::size_t up = row[j];
        row[j] = c == shorter[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
        diag = up;
      }
      const std::size_t lcs = row[m];
      const std::size_t sum = m + (end - start + 1);
      if (lcs * best_sum > best_lcs * sum) {
        best_lcs = lcs;
        best_sum = sum;
      }
      if (lcs == m) break;  // longer windows only add unmatched characters
    }
  }
  return score_from_lcs(best_lcs, best_sum);
}

}  // namespace

double indel_similarity(std::u32string_view a, std::u32string_view b) {
  return score_from_lcs(lcs_length(a, b), a.size() + b.size());
}

double indel_similarity(std::string_view a, std::string_view b) {
  return indel_similarity(text::utf8_decode(a), text::utf8_decode(b));
}

double partial_similarity(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) return best_window_score(a, b);
  if (b.size() < a.size()) return best_window_score(b, a);
  return std::max(best_window_score(a, b), best_window_score(b, a));
}

double partial_similarity(std::string_view a, std::string_view b) {
  return partial_similarity(text::utf8_decode(a), text::utf8_decode(b));
}

double soft_similarity(std::string_view a, std::string_view b) {
  return partial_similarity(text::normalize(a), text::normalize(b));
}

std::vector<MatchPair> soft_match(const std::vector<std::string>& preds,
                                  const std::vector<std::string>& golds, double threshold) {
  std::vector<MatchPair> candidates;
  for (std::size_t g = 0; g < golds.size(); ++g) {
    for (std::size_t p = 0; p < preds.size(); ++p) {
      double score = soft_similarity(preds[p], golds[g]);
      if (score >= threshold) candidates.push_back({p, g, score});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const MatchPair& x, const MatchPair& y) {
    return std::tuple(-x.score, x.gold, x.pred) < std::tuple(-y.score, y.gold, y.pred);
  });
  std::vector<bool> pred_used(preds.size()), gold_used(golds.size());
  std::vector<MatchPair> accepted;
  for (const auto& c : candidates) {
    if (pred_used[c.pred] || gold_used[c.gold]) continue;
    pred_used[c.pred] = gold_used[c.gold] = true;
    accepted.push_back(c);
  }
  return accepted;
}

EntityCounts match_entities(const std::vector<std::string>& preds,
                            const std::vector<std::string>& golds, double threshold) {
  EntityCounts counts;
  counts.tp = soft_match(preds, golds, threshold).size();
  counts.fp = preds.size() - counts.tp;
  counts.fn = golds.size() - counts.tp;
  return counts;
}

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  Metrics m;
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

Metrics micro_average(const std::vector<EntityCounts>& counts) {
  EntityCounts pooled;
  for (const auto& c : counts) pooled += c;
  return metrics_from_counts(pooled);
}

Metrics macro_average(const std::map<std::string, Metrics>& per_entity) {
  if (per_entity.empty()) throw std::invalid_argument("macro_average: no entities");
  Metrics sum;
  for (const auto& [name, m] : per_entity) {
    sum.precision += m.precision;
    sum.recall += m.recall;
    sum.f1 += m.f1;
  }
  const auto n = static_cast<double>(per_entity.size());
  return {sum.precision / n, sum.recall / n, sum.f1 / n};
}

MetricsReport build_report(const std::vector<EntityCounts>& counts) {
  MetricsReport report;
  for (const auto& c : counts) {
    auto& slot = report.counts[c.entity];
    slot.entity = c.entity;
    slot += c;
  }
  std::vector<EntityCounts> pooled;
  for (const auto& [name, c] : report.counts) {
    report.per_entity[name] = metrics_from_counts(c);
    pooled.push_back(c);
  }
  report.micro = micro_average(pooled);
  if (!report.per_entity.empty()) report.macro = macro_average(report.per_entity);
  return report;
}

AuxiliaryAccuracies auxiliary_accuracies(const std::vector<SentenceOutcome>& outcomes,
                                         double threshold) {
  std::size_t neg = 0, neg_clean = 0, pos = 0, pos_hit = 0;
  for (const auto& o : outcomes) {
    if (!o.positive) {
      ++neg;
      if (o.extracted.empty()) ++neg_clean;
      continue;
    }
    ++pos;
    bool hit = std::any_of(o.golds.begin(), o.golds.end(), [&](const std::string& g) {
      return std::any_of(o.extracted.begin(), o.extracted.end(),
                         [&](const std::string& e) { return soft_similarity(e, g) >= threshold; });
    });
    if (hit) ++pos_hit;
  }
  AuxiliaryAccuracies acc;
  acc.negative_accuracy = neg ? static_cast<double>(neg_clean) / static_cast<double>(neg) : 1.0;
  acc.positive_softmatch_accuracy = pos ? static_cast<double>(pos_hit) / static_cast<double>(pos) : 0.0;
  return acc;
}

namespace {

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

json metrics_json(const Metrics& m) {
  return json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

Metrics metrics_from_json(const json& j) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

}  // namespace

std::string render_report_text(const MetricsReport& report) {
  std::size_t width = 6;
  for (const auto& [name, m] : report.per_entity) width = std::max(width, name.size());
  std::ostringstream out;
  auto row = [&](const std::string& label, const std::string& tp, const std::string& fp,
                 const std::string& fn, const Metrics& m) {
    out << label << std::string(width - label.size() + 2, ' ');
    char buf[96];
    std::snprintf(buf, sizeof buf, "%5s %5s %5s  %6s %6s %6s\n", tp.c_str(), fp.c_str(), fn.c_str(),
                  fixed3(m.precision).c_str(), fixed3(m.recall).c_str(), fixed3(m.f1).c_str());
    out << buf;
  };
  out << "Entity" << std::string(width - 4, ' ');
  char header[96];
  std::snprintf(header, sizeof header, "%5s %5s %5s  %6s %6s %6s\n", "TP", "FP", "FN", "P", "R", "F1");
  out << header;
  out << std::string(width + 2 + 41, '-') << "\n";
  for (const auto& [name, m] : report.per_entity) {
    const auto& c = report.counts.at(name);
    row(name, std::to_string(c.tp), std::to_string(c.fp), std::to_string(c.fn), m);
  }
  out << std::string(width + 2 + 41, '-') << "\n";
  EntityCounts pooled;
  for (const auto& [name, c] : report.counts) pooled += c;
  row("Micro", std::to_string(pooled.tp), std::to_string(pooled.fp), std::to_string(pooled.fn),
      report.micro);
  row("Macro", "", "", "", report.macro);
  return out.str();
}

std::string render_report_json(const MetricsReport& report) {
  json entities = json::array();
  for (const auto& [name, m] : report.per_entity) {
    const auto& c = report.counts.at(name);
    json e = json{{"entity", name}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
    e.update(metrics_json(m));
    entities.push_back(std::move(e));
  }
  json doc{{"entities", entities},
           {"micro", metrics_json(report.micro)},
           {"macro", metrics_json(report.macro)}};
  return doc.dump(2) + "\n";
}

MetricsReport parse_report_json(std::string_view json_text) {
  json doc = json::parse(json_text);
  MetricsReport report;
  for (const auto& e : doc.at("entities")) {
    auto name = e.at("entity").get<std::string>();
    report.counts[name] = {name, e.at("tp").get<std::size_t>(), e.at("fp").get<std::size_t>(),
                           e.at("fn").get<std::size_t>()};
    report.per_entity[name] = metrics_from_json(e);
  }
  report.micro = metrics_from_json(doc.at("micro"));
  report.macro = metrics_from_json(doc.at("macro"));
  return report;
}

}  // namespace promptner::evalkit
