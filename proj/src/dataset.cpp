#include "promptner/dataset.hpp"

#include "promptner/errors.hpp"
#include "promptner/jsonl.hpp"
#include "promptner/random.hpp"
#include "promptner/text.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <stdexcept>

namespace promptner::dataset {

using jsonl::json;

std::string_view subset_name(Subset subset) {
  switch (subset) {
    case Subset::Train:
      return "train";
    case Subset::Val:
      return "val";
    case Subset::Test:
      return "test";
  }
  return "train";
}

Subset parse_subset(std::string_view name) {
  for (auto s : kSubsets) {
    if (subset_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown subset: " + std::string(name));
}

void SplitConfig::validate() const {
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw std::invalid_argument("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  for (auto m : neg_multipliers) {
    if (m < 1) throw std::invalid_argument("negative multipliers must be >= 1");
  }
  if (min_positives < 1) throw std::invalid_argument("min_positives must be >= 1");
}

namespace {

std::size_t floor_share(double ratio, std::size_t n) {
  // The epsilon keeps 0.1 * 30 from landing on 2.999...
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

std::size_t index_of(Subset s) { return static_cast<std::size_t>(s); }

}  // namespace

SubsetCounts positive_counts(std::size_t n, const SplitConfig& cfg) {
  std::size_t val = floor_share(cfg.ratios[1], n);
  std::size_t test = floor_share(cfg.ratios[2], n);
  if (n >= 10) {
    val = std::max<std::size_t>(val, 1);
    test = std::max<std::size_t>(test, 1);
  }
  if (val + test > n) {
    val = std::min(val, n);
    test = n - val;
  }
  return {n - val - test, val, test};
}

const std::vector<LabeledSentence>& EntityDataset::positives(Subset s) const {
  return s == Subset::Train ? train_pos : s == Subset::Val ? val_pos : test_pos;
}
const std::vector<LabeledSentence>& EntityDataset::negatives(Subset s) const {
  return s == Subset::Train ? train_neg : s == Subset::Val ? val_neg : test_neg;
}
std::vector<LabeledSentence>& EntityDataset::positives(Subset s) {
  return s == Subset::Train ? train_pos : s == Subset::Val ? val_pos : test_pos;
}
std::vector<LabeledSentence>& EntityDataset::negatives(Subset s) {
  return s == Subset::Train ? train_neg : s == Subset::Val ? val_neg : test_neg;
}

std::vector<LabeledSentence> EntityDataset::sentences(Subset s) const {
  std::vector<LabeledSentence> out = positives(s);
  const auto& neg = negatives(s);
  out.insert(out.end(), neg.begin(), neg.end());
  return out;
}

std::vector<LabeledSentence> EntityDataset::validation_set() const {
  if (val_pos.empty() && val_neg.empty()) return sentences(Subset::Train);
  return sentences(Subset::Val);
}

EntityDataset split(const corpus::EntityType& entity, std::vector<LabeledSentence> positives,
                    std::vector<LabeledSentence> negatives, const SplitConfig& cfg) {
  cfg.validate();
  EntityDataset ds;
  ds.entity = entity;
  ds.seed = cfg.seed;

  SeededRng pos_rng(derive_seed(cfg.seed, "positives:" + entity.name));
  SeededRng neg_rng(derive_seed(cfg.seed, "negatives:" + entity.name));
  pos_rng.shuffle(positives);
  neg_rng.shuffle(negatives);

  const std::size_t n = positives.size();
  std::array<std::size_t, 3> wanted{};
  if (n < cfg.min_positives) {
    ds.small_entity_mode = true;
    ds.train_pos = positives;
    ds.test_pos = std::move(positives);
    wanted = {cfg.neg_multipliers[0] * n, 0, cfg.neg_multipliers[2] * n};
    ds.log.push_back("small entity mode: " + std::to_string(n) + " positives < " +
                     std::to_string(cfg.min_positives));
  } else {
    const auto counts = positive_counts(n, cfg);
    auto it = positives.begin();
    ds.train_pos.assign(it, it + static_cast<std::ptrdiff_t>(counts.train));
    it += static_cast<std::ptrdiff_t>(counts.train);
    ds.val_pos.assign(it, it + static_cast<std::ptrdiff_t>(counts.val));
    it += static_cast<std::ptrdiff_t>(counts.val);
    ds.test_pos.assign(it, positives.end());
    for (auto s : kSubsets) {
      wanted[index_of(s)] = cfg.neg_multipliers[index_of(s)] * ds.positives(s).size();
    }
  }

  // Negatives are drawn from one shuffled pool, train first, so a shortage
  // always lands on the later subsets.
  std::size_t next = 0;
  for (auto s : kSubsets) {
    const std::size_t want = wanted[index_of(s)];
    const std::size_t take = std::min(want, negatives.size() - next);
    auto& dst = ds.negatives(s);
    dst.assign(negatives.begin() + static_cast<std::ptrdiff_t>(next),
               negatives.begin() + static_cast<std::ptrdiff_t>(next + take));
    next += take;
    if (take < want) {
      ds.log.push_back(std::string(subset_name(s)) + " negatives capped at " + std::to_string(take) +
                       " of " + std::to_string(want));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------

std::optional<std::vector<std::size_t>> parse_keep_line(std::string_view response, std::size_t n) {
  const auto lines = text::split_lines(response);
  for (std::size_t k = lines.size(); k-- > 0;) {
    std::string_view line = text::trim(lines[k]);
    if (line.size() < 5 || text::to_lower(line.substr(0, 5)) != "keep:") continue;
    std::string_view rest = line.substr(5);
    std::set<std::size_t> picked;
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      std::size_t comma = rest.find(',', pos);
      if (comma == std::string_view::npos) comma = rest.size();
      std::string_view tok = text::trim(rest.substr(pos, comma - pos));
      pos = comma + 1;
      if (tok.empty()) {
        if (comma == rest.size()) break;
        return std::nullopt;
      }
      std::size_t value = 0;
      auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
      if (ec != std::errc() || ptr != tok.data() + tok.size() || value >= n) return std::nullopt;
      picked.insert(value);
    }
    if (picked.empty()) return std::nullopt;
    return std::vector<std::size_t>(picked.begin(), picked.end());
  }
  return std::nullopt;
}

backend::GenerationRequest revision_request(const corpus::EntityType& entity,
                                            const std::vector<LabeledSentence>& positives) {
  std::string user = "TASK: REVISE\nEntity: " + entity.name +
                     "\nThe numbered sentences below are training examples that mention the "
                     "target entity. Identify near-duplicates and low-quality examples. Keep one "
                     "sentence from each group of near-duplicates. End with a single line of the "
                     "form KEEP: followed by the comma-separated numbers of the sentences to keep.\n";
  for (std::size_t i = 0; i < positives.size(); ++i) {
    user += std::to_string(i) + ": " + positives[i].sentence.text + "\n";
  }
  return {{{backend::Role::System,
            "You curate training data for clinical entity extraction from dental notes."},
           {backend::Role::User, std::move(user)}},
          512,
          true,
          {}};
}

RevisionOutcome revise_positives(const corpus::EntityType& entity,
                                 const std::vector<LabeledSentence>& positives,
                                 backend::GenerationBackend& backend,
                                 scheduler::TokenLedger* ledger) {
  RevisionOutcome out;
  auto keep_all = [&](std::string note) {
    out.kept = positives;
    out.kept_indices.clear();
    for (std::size_t i = 0; i < positives.size(); ++i) out.kept_indices.push_back(i);
    out.dropped_indices.clear();
    out.fell_back = true;
    out.note = std::move(note);
    return out;
  };
  if (positives.empty()) {
    out.note = "no positives";
    return out;
  }
  std::optional<std::vector<std::size_t>> keep;
  try {
    const auto response =
        scheduler::complete_metered(backend, revision_request(entity, positives), ledger, "revision");
    keep = parse_keep_line(response.text, positives.size());
  } catch (const backend::BackendError& e) {
    return keep_all(std::string("backend failure, originals retained: ") + e.what());
  }
  if (!keep) return keep_all("unparseable revision answer, originals retained");

  std::size_t next = 0;
  for (std::size_t i = 0; i < positives.size(); ++i) {
    if (next < keep->size() && (*keep)[next] == i) {
      out.kept.push_back(positives[i]);
      out.kept_indices.push_back(i);
      ++next;
    } else {
      out.dropped_indices.push_back(i);
    }
  }
  out.note = "kept " + std::to_string(out.kept.size()) + " of " + std::to_string(positives.size());
  return out;
}

// ---------------------------------------------------------------------------

void write_manifest(const std::filesystem::path& path, const EntityDataset& ds) {
  std::vector<json> records;
  json log = json::array();
  for (const auto& line : ds.log) log.push_back(line);
  records.push_back(json{{"entity", ds.entity.name},
                         {"small_entity_mode", ds.small_entity_mode},
                         {"seed", ds.seed},
                         {"negative_sampling", "corpus-wide"},
                         {"log", log}});
  for (auto s : kSubsets) {
    for (int polarity = 0; polarity < 2; ++polarity) {
      const auto& list = polarity == 0 ? ds.positives(s) : ds.negatives(s);
      for (const auto& ls : list) {
        records.push_back(json{{"note_id", ls.sentence.note_id},
                               {"index", ls.sentence.index},
                               {"subset", subset_name(s)},
                               {"polarity", polarity == 0 ? "positive" : "negative"},
                               {"start", ls.sentence.range.start},
                               {"end", ls.sentence.range.end},
                               {"text", ls.sentence.text},
                               {"golds", ls.golds}});
      }
    }
  }
  jsonl::write(path, records);
}

EntityDataset read_manifest(const std::filesystem::path& path, const corpus::EntityRegistry& registry) {
  EntityDataset ds;
  bool header = false;
  jsonl::for_each(path, [&](std::size_t, const json& rec) {
    if (!header) {
      ds.entity = registry.at(jsonl::string_field(rec, "entity"));
      ds.small_entity_mode = rec.at("small_entity_mode").get<bool>();
      ds.seed = rec.at("seed").get<std::uint64_t>();
      for (const auto& line : rec.at("log")) ds.log.push_back(line.get<std::string>());
      header = true;
      return;
    }
    LabeledSentence ls;
    ls.sentence.note_id = jsonl::string_field(rec, "note_id");
    ls.sentence.index = rec.at("index").get<std::size_t>();
    ls.sentence.range = {rec.at("start").get<std::size_t>(), rec.at("end").get<std::size_t>()};
    ls.sentence.text = jsonl::string_field(rec, "text");
    ls.golds = rec.at("golds").get<std::vector<std::string>>();
    const auto subset = parse_subset(jsonl::string_field(rec, "subset"));
    const std::string polarity = jsonl::string_field(rec, "polarity");
    if (polarity == "positive") {
      ds.positives(subset).push_back(std::move(ls));
    } else if (polarity == "negative") {
      ds.negatives(subset).push_back(std::move(ls));
    } else {
      throw DataError("unknown polarity: " + polarity);
    }
  });
  if (!header) throw DataError(path.string() + ": empty dataset manifest");
  return ds;
}

}  // namespace promptner::dataset
