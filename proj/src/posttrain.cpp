#include "promptner/posttrain.hpp"

#include "promptner/ensemble.hpp"
#include "promptner/errors.hpp"
#include "promptner/jsonl.hpp"
#include "promptner/random.hpp"
#include "promptner/text.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace promptner::posttrain {

using backend::ChatMessage;
using backend::Role;
using jsonl::json;

SftExample make_sft_example(const std::string& system_prompt, const LabeledSentence& sentence,
                            const std::string& entity) {
  SftExample ex;
  ex.messages = {{Role::System, system_prompt},
                 {Role::User, sentence.sentence.text},
                 {Role::Assistant, ensemble::format_answer_line(sentence.golds)}};
  ex.entity = entity;
  ex.positive = sentence.positive();
  ex.golds = sentence.golds;
  ex.sentence = corpus::key_of(sentence.sentence);
  return ex;
}

SftDataset build_sft_dataset(const std::vector<EntityLabels>& entities, const SftConfig& cfg) {
  SftDataset out;
  for (const auto& e : entities) {
    if (e.positives.empty()) {
      out.log.push_back(e.entity + ": no positive sentences, skipped");
      continue;
    }
    auto pos = e.positives;
    auto neg = e.negatives;
    SeededRng pos_rng(derive_seed(cfg.seed, "sft-positives:" + e.entity));
    SeededRng neg_rng(derive_seed(cfg.seed, "sft-negatives:" + e.entity));
    pos_rng.shuffle(pos);
    neg_rng.shuffle(neg);

    const std::size_t n = pos.size();
    std::size_t val_pos =
        static_cast<std::size_t>(std::floor(cfg.val_ratio * static_cast<double>(n) + 1e-9));
    if (n >= 10) val_pos = std::max<std::size_t>(val_pos, 1);
    const std::size_t train_pos = n - val_pos;

    const std::size_t train_neg = std::min(cfg.train_neg_multiplier * train_pos, neg.size());
    const double ratio = static_cast<double>(neg.size()) / static_cast<double>(n);
    const auto natural = static_cast<std::size_t>(std::llround(static_cast<double>(val_pos) * ratio));
    const std::size_t val_neg = std::min(natural, neg.size() - train_neg);
    if (train_neg < cfg.train_neg_multiplier * train_pos) {
      out.log.push_back(e.entity + ": train negatives capped at " + std::to_string(train_neg));
    }
    if (val_neg < natural) {
      out.log.push_back(e.entity + ": validation negatives capped at " + std::to_string(val_neg));
    }

    for (std::size_t i = 0; i < train_pos; ++i) out.train.push_back(make_sft_example(e.system_prompt, pos[i], e.entity));
    for (std::size_t i = 0; i < train_neg; ++i) out.train.push_back(make_sft_example(e.system_prompt, neg[i], e.entity));
    for (std::size_t i = train_pos; i < n; ++i) out.val.push_back(make_sft_example(e.system_prompt, pos[i], e.entity));
    for (std::size_t i = train_neg; i < train_neg + val_neg; ++i) {
      out.val.push_back(make_sft_example(e.system_prompt, neg[i], e.entity));
    }
    out.stats.push_back({e.entity, n, e.negatives.size(), train_pos, train_neg, val_pos, val_neg});
  }
  return out;
}

backend::GenerationRequest sft_request(const SftExample& example, const std::string& model,
                                       std::size_t max_new_tokens) {
  return {{example.messages.at(0), example.messages.at(1)}, max_new_tokens, true, model};
}

namespace {

std::vector<std::string> predicted_texts(const std::string& response) {
  return ensemble::merge_extractions({ensemble::parse_extraction(response).answer});
}

}  // namespace

bool prediction_incorrect(const SftPrediction& p, double threshold) {
  const auto counts = evalkit::match_entities(predicted_texts(p.response), p.example.golds, threshold);
  return counts.fp > 0 || counts.fn > 0;
}

std::vector<PreferencePair> build_dpo_dataset(const std::vector<SftPrediction>& predictions,
                                              double threshold) {
  std::vector<PreferencePair> pairs;
  for (const auto& p : predictions) {
    if (!prediction_incorrect(p, threshold)) continue;
    const auto parsed = ensemble::parse_extraction(p.response);
    PreferencePair pair;
    pair.prompt = {p.example.messages.at(0), p.example.messages.at(1)};
    pair.chosen = ensemble::format_answer_line(p.example.golds);
    pair.rejected = parsed.answer_line.empty() ? std::string(text::trim(p.response)) : parsed.answer_line;
    pair.entity = p.example.entity;
    pair.sentence = p.example.sentence;
    if (pair.chosen == pair.rejected) continue;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

evalkit::MetricsReport score_predictions(const std::vector<SftPrediction>& predictions,
                                         double threshold) {
  std::map<std::string, evalkit::EntityCounts> per_entity;
  for (const auto& p : predictions) {
    auto& c = per_entity[p.example.entity];
    c.entity = p.example.entity;
    c += evalkit::match_entities(predicted_texts(p.response), p.example.golds, threshold);
  }
  std::vector<evalkit::EntityCounts> counts;
  for (auto& [name, c] : per_entity) counts.push_back(c);
  return evalkit::build_report(counts);
}

bool gate_for_dpo(const evalkit::MetricsReport& report, double min_f1) {
  return report.micro.f1 > min_f1 || report.macro.f1 > min_f1;
}

// ---------------------------------------------------------------------------

namespace {

json message_json(const ChatMessage& m) {
  return json{{"role", backend::role_name(m.role)}, {"content", m.content}};
}

ChatMessage message_from_json(const json& j) {
  return {backend::parse_role(j.at("role").get<std::string>()), j.at("content").get<std::string>()};
}

}  // namespace

void write_sft(const std::filesystem::path& path, const std::vector<SftExample>& examples) {
  std::vector<json> records;
  for (const auto& ex : examples) {
    json messages = json::array();
    for (const auto& m : ex.messages) messages.push_back(message_json(m));
    records.push_back(json{{"messages", std::move(messages)},
                           {"entity", ex.entity},
                           {"polarity", ex.positive ? "positive" : "negative"}});
  }
  jsonl::write(path, records);
}

std::vector<SftExample> read_sft(const std::filesystem::path& path) {
  std::vector<SftExample> out;
  jsonl::for_each(path, [&](std::size_t, const json& rec) {
    SftExample ex;
    for (const auto& m : rec.at("messages")) ex.messages.push_back(message_from_json(m));
    if (ex.messages.size() != 3 || ex.messages[0].role != Role::System ||
        ex.messages[1].role != Role::User || ex.messages[2].role != Role::Assistant) {
      throw DataError("SFT record needs system, user and assistant messages");
    }
    ex.entity = jsonl::string_field(rec, "entity");
    const std::string polarity = jsonl::string_field(rec, "polarity");
    if (polarity != "positive" && polarity != "negative") throw DataError("bad polarity: " + polarity);
    ex.positive = polarity == "positive";
    const auto answer = ensemble::parse_extraction(ex.messages[2].content);
    if (!answer.parse_ok) throw DataError("assistant message is not an answer line");
    ex.golds = answer.answer;
    out.push_back(std::move(ex));
  });
  return out;
}

void write_dpo(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  std::vector<json> records;
  for (const auto& p : pairs) {
    json prompt = json::array();
    for (const auto& m : p.prompt) prompt.push_back(message_json(m));
    records.push_back(json{{"prompt", std::move(prompt)}, {"chosen", p.chosen}, {"rejected", p.rejected}});
  }
  jsonl::write(path, records);
}

std::vector<PreferencePair> read_dpo(const std::filesystem::path& path) {
  std::vector<PreferencePair> out;
  jsonl::for_each(path, [&](std::size_t, const json& rec) {
    PreferencePair p;
    for (const auto& m : rec.at("prompt")) p.prompt.push_back(message_from_json(m));
    p.chosen = jsonl::string_field(rec, "chosen");
    p.rejected = jsonl::string_field(rec, "rejected");
    if (p.chosen == p.rejected) throw DataError("chosen and rejected responses are identical");
    out.push_back(std::move(p));
  });
  return out;
}

}  // namespace promptner::posttrain
