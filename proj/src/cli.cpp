#include "promptner/cli.hpp"

#include "promptner/backend.hpp"
#include "promptner/corpus.hpp"
#include "promptner/dataset.hpp"
#include "promptner/digest.hpp"
#include "promptner/ensemble.hpp"
#include "promptner/errors.hpp"
#include "promptner/evalkit.hpp"
#include "promptner/jsonl.hpp"
#include "promptner/posttrain.hpp"
#include "promptner/promptgen.hpp"
#include "promptner/scheduler.hpp"
#include "promptner/text.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <tuple>

namespace promptner::cli {

namespace fs = std::filesystem;
using jsonl::json;

namespace {

constexpr const char* kApiKeyEnv = "PROMPTNER_API_KEY";

struct BackendExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Settings {
  std::string notes;
  std::string annotations;
  std::string eval_notes;
  std::string eval_annotations;
  std::string workdir = "work";
  std::string entities;

  std::string backend = "mock";
  std::string mock_rules;
  std::string endpoint = "http://127.0.0.1:8000/v1";
  std::string model = "local-model";
  std::string sft_model = "sft-model";
  std::size_t context_window = 8192;
  std::size_t max_concurrent = 4;
  std::size_t timeout_ms = 120000;

  std::uint64_t seed = 0;
  double match_threshold = evalkit::kDefaultMatchThreshold;

  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;
  std::size_t train_neg_multiplier = 3;
  std::size_t val_neg_multiplier = 10;
  std::size_t test_neg_multiplier = 100;
  std::size_t min_positives = 10;
  bool revise = true;

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
  std::size_t max_refine_attempts = 2;
  std::size_t workers = 1;

  double input_ratio = 0.8;
  double reduction_factor = 0.5;
  double min_ratio = 0.05;

  double sft_val_ratio = 0.1;
  std::size_t sft_neg_multiplier = 3;
  double dpo_min_f1 = 0.6;
  std::string report;

  // Everything that shapes outputs; paths and secrets stay out so a moved
  // workdir keeps its digests.
  json digest_view() const {
    return json{{"entities", entities},
                {"backend", backend},
                {"endpoint", endpoint},
                {"model", model},
                {"sft_model", sft_model},
                {"context_window", context_window},
                {"seed", seed},
                {"match_threshold", match_threshold},
                {"ratios", {train_ratio, val_ratio, test_ratio}},
                {"neg_multipliers", {train_neg_multiplier, val_neg_multiplier, test_neg_multiplier}},
                {"min_positives", min_positives},
                {"revise", revise},
                {"use_desc", use_desc},
                {"use_ex", use_ex},
                {"use_err", use_err},
                {"n_candidates", n_candidates},
                {"max_rounds", max_rounds},
                {"val_f1_threshold", val_f1_threshold},
                {"select_threshold", select_threshold},
                {"select_top_k", select_top_k},
                {"n_examples", n_examples},
                {"max_error_examples", max_error_examples},
                {"max_refine_attempts", max_refine_attempts},
                {"retry", {input_ratio, reduction_factor, min_ratio}},
                {"sft_val_ratio", sft_val_ratio},
                {"sft_neg_multiplier", sft_neg_multiplier},
                {"dpo_min_f1", dpo_min_f1}};
  }

  dataset::SplitConfig split_config() const {
    dataset::SplitConfig c;
    c.ratios = {train_ratio, val_ratio, test_ratio};
    c.neg_multipliers = {train_neg_multiplier, val_neg_multiplier, test_neg_multiplier};
    c.min_positives = min_positives;
    c.seed = seed;
    return c;
  }

  promptgen::PromptConfig prompt_config() const {
    promptgen::PromptConfig c;
    c.use_desc = use_desc;
    c.use_ex = use_ex;
    c.use_err = use_err;
    c.n_candidates = n_candidates;
    c.max_rounds = max_rounds;
    c.val_f1_threshold = val_f1_threshold;
    c.select_threshold = select_threshold;
    c.select_top_k = select_top_k;
    c.n_examples = n_examples;
    c.max_error_examples = max_error_examples;
    c.max_refine_attempts = max_refine_attempts;
    c.match_threshold = match_threshold;
    c.seed = seed;
    c.workers = workers;
    return c;
  }

  scheduler::RetryPolicy retry_policy() const { return {input_ratio, reduction_factor, min_ratio}; }

  void validate() const {
    try {
      split_config().validate();
      prompt_config().validate();
      retry_policy().validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (backend != "mock" && backend != "remote") throw UsageError("backend must be mock or remote");
    if (context_window == 0) throw UsageError("context_window must be positive");
    if (max_concurrent == 0) throw UsageError("max_concurrent must be >= 1");
    if (match_threshold < 0 || match_threshold > 100) throw UsageError("match_threshold must be in [0, 100]");
  }
};

// ---------------------------------------------------------------------------
// Workdir layout and stage manifests

namespace paths {
constexpr const char* kTrainNotes = "corpus/train_notes.jsonl";
constexpr const char* kTrainAnnotations = "corpus/train_annotations.jsonl";
constexpr const char* kEvalNotes = "corpus/eval_notes.jsonl";
constexpr const char* kEvalAnnotations = "corpus/eval_annotations.jsonl";
constexpr const char* kCorpusSummary = "corpus/summary.json";
constexpr const char* kTrainSentences = "segments/train_sentences.jsonl";
constexpr const char* kEvalSentences = "segments/eval_sentences.jsonl";
constexpr const char* kDatasetIndex = "datasets/index.json";
constexpr const char* kRevisionLog = "datasets/revision_log.jsonl";
constexpr const char* kPredictions = "inference/predictions.jsonl";
constexpr const char* kScreening = "inference/screening.jsonl";
constexpr const char* kInferenceLog = "inference/log.txt";
constexpr const char* kMetricsJson = "evaluation/metrics.json";
constexpr const char* kMetricsText = "evaluation/metrics.txt";
constexpr const char* kReportText = "evaluation/report.txt";
constexpr const char* kSftTrain = "posttrain/sft_train.jsonl";
constexpr const char* kSftVal = "posttrain/sft_val.jsonl";
constexpr const char* kSftTrainKeys = "posttrain/sft_train_keys.jsonl";
constexpr const char* kSftValKeys = "posttrain/sft_val_keys.jsonl";
constexpr const char* kSftStats = "posttrain/sft_stats.json";
constexpr const char* kSftPredictions = "posttrain/sft_predictions.jsonl";
constexpr const char* kSftReport = "posttrain/sft_report.json";
constexpr const char* kDpoPairs = "posttrain/dpo_pairs.jsonl";
constexpr const char* kDpoIndex = "posttrain/dpo_index.jsonl";
constexpr const char* kGate = "posttrain/gate.json";
constexpr const char* kLedger = "ledger.json";

std::string dataset(std::string_view entity) { return "datasets/" + text::slugify(entity) + ".jsonl"; }
std::string candidates(std::string_view entity) {
  return "prompts/candidates/" + text::slugify(entity) + ".json";
}
std::string ensemble(std::string_view entity) {
  return "prompts/ensembles/" + text::slugify(entity) + ".json";
}
}  // namespace paths

class Stage {
 public:
  Stage(std::string command, const Settings& s) : command_(std::move(command)), settings_(s), root_(s.workdir) {}

  fs::path at(const std::string& rel) const { return root_ / rel; }

  /// A workdir artifact produced by an earlier command.
  fs::path require(const std::string& rel, std::string_view producer) {
    const fs::path p = at(rel);
    if (!fs::exists(p)) {
      throw DataError("missing " + p.string() + "; run `promptner " + std::string(producer) + "` first");
    }
    inputs_.push_back({rel, p});
    return p;
  }

  /// A file outside the workdir, recorded under the path given.
  fs::path external(const std::string& given) {
    if (given.empty()) throw UsageError(command_ + " needs an input path that was not configured");
    const fs::path p(given);
    if (!fs::exists(p)) throw DataError("input file not found: " + given);
    inputs_.push_back({given, p});
    return p;
  }

  fs::path output(const std::string& rel) {
    outputs_.push_back({rel, at(rel)});
    return at(rel);
  }

  void write(const std::string& rel, const std::string& content) { jsonl::write_file(output(rel), content); }

  scheduler::TokenLedger& ledger() { return ledger_; }
  void note(std::string line) { log_.push_back(std::move(line)); }

  void finish() {
    if (!ledger_.stages().empty()) write("ledger/" + command_ + ".json", ledger_.to_json());
    if (!log_.empty()) write("logs/" + command_ + ".log", text::join(log_, "\n") + "\n");
    auto files = [](const std::vector<std::pair<std::string, fs::path>>& list) {
      json arr = json::array();
      std::set<std::string> seen;
      for (const auto& [key, p] : list) {
        if (!seen.insert(key).second) continue;
        arr.push_back(json{{"path", key}, {"sha256", digest::file_sha256(p)}});
      }
      return arr;
    };
    json manifest{{"command", command_},
                  {"config_sha256", digest::sha256_hex(settings_.digest_view().dump())},
                  {"inputs", files(inputs_)},
                  {"outputs", files(outputs_)}};
    jsonl::write_file(at("manifests/" + command_ + ".json"), manifest.dump(2) + "\n");
  }

 private:
  std::string command_;
  const Settings& settings_;
  fs::path root_;
  std::vector<std::pair<std::string, fs::path>> inputs_;
  std::vector<std::pair<std::string, fs::path>> outputs_;
  scheduler::TokenLedger ledger_;
  std::vector<std::string> log_;
};

std::unique_ptr<backend::GenerationBackend> make_backend(Stage& stage, const Settings& s) {
  if (s.backend == "mock") {
    if (s.mock_rules.empty()) throw UsageError("backend=mock needs mock_rules");
    const auto rules = stage.external(s.mock_rules);
    return backend::MockBackend::from_file(rules, s.context_window, s.model);
  }
  backend::BackendConfig config;
  config.endpoint_url = s.endpoint;
  config.model_name = s.model;
  config.context_window = s.context_window;
  config.max_concurrent_requests = s.max_concurrent;
  config.request_timeout = std::chrono::milliseconds(s.timeout_ms);
  if (const char* key = std::getenv(kApiKeyEnv)) config.api_key = key;
  try {
    return std::make_unique<backend::RemoteBackend>(config);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string_view::npos) comma = s.size();
    auto item = text::trim(s.substr(pos, comma - pos));
    if (!item.empty()) out.emplace_back(item);
    pos = comma + 1;
  }
  return out;
}

std::vector<corpus::EntityType> read_entity_index(Stage& stage, const corpus::EntityRegistry& registry) {
  const auto doc = json::parse(jsonl::read_file(stage.require(paths::kDatasetIndex, "build-datasets")));
  std::vector<corpus::EntityType> out;
  for (const auto& e : doc.at("entities")) out.push_back(registry.at(e.at("entity").get<std::string>()));
  return out;
}

corpus::Corpus load_stage_corpus(Stage& stage, bool eval) {
  const auto notes = stage.require(eval ? paths::kEvalNotes : paths::kTrainNotes, "ingest");
  const auto ann = stage.require(eval ? paths::kEvalAnnotations : paths::kTrainAnnotations, "ingest");
  return corpus::load_corpus(notes, ann);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_ingest(const Settings& s, std::ostream& out) {
  Stage stage("ingest", s);
  const auto train = corpus::load_corpus(stage.external(s.notes), stage.external(s.annotations));
  const bool separate_eval = !s.eval_notes.empty();
  const auto eval = separate_eval ? corpus::load_corpus(stage.external(s.eval_notes),
                                                        stage.external(s.eval_annotations.empty()
                                                                           ? s.annotations
                                                                           : s.eval_annotations))
                                  : train;
  corpus::write_notes(stage.output(paths::kTrainNotes), train.notes);
  corpus::write_annotations(stage.output(paths::kTrainAnnotations), train.annotations);
  corpus::write_notes(stage.output(paths::kEvalNotes), eval.notes);
  corpus::write_annotations(stage.output(paths::kEvalAnnotations), eval.annotations);

  auto counts = [](const corpus::Corpus& c) {
    std::map<std::string, std::size_t> per;
    for (const auto& a : c.annotations) ++per[a.entity];
    json j = json::object();
    for (const auto& e : corpus::EntityRegistry::builtin().all()) {
      if (per.count(e.name)) j[e.name] = per[e.name];
    }
    for (const auto& [name, n] : per) {
      if (!j.contains(name)) j[name] = n;
    }
    return json{{"notes", c.notes.size()}, {"annotations", c.annotations.size()}, {"per_entity", j}};
  };
  stage.write(paths::kCorpusSummary, json{{"train", counts(train)}, {"eval", counts(eval)}}.dump(2) + "\n");
  stage.finish();
  out << "ingested " << train.notes.size() << " training notes, " << eval.notes.size()
      << " evaluation notes\n";
}

void cmd_segment(const Settings& s, std::ostream& out) {
  Stage stage("segment", s);
  const corpus::RuleSegmenter segmenter;
  std::size_t total = 0;
  for (bool eval : {false, true}) {
    const auto notes = corpus::load_corpus(stage.require(eval ? paths::kEvalNotes : paths::kTrainNotes, "ingest"),
                                           stage.require(eval ? paths::kEvalAnnotations : paths::kTrainAnnotations, "ingest"))
                           .notes;
    std::vector<corpus::Sentence> sentences;
    for (const auto& n : notes) {
      auto part = segmenter.segment(n);
      sentences.insert(sentences.end(), part.begin(), part.end());
    }
    total += sentences.size();
    corpus::write_sentences(stage.output(eval ? paths::kEvalSentences : paths::kTrainSentences), sentences);
  }
  stage.finish();
  out << "segmented " << total << " sentences\n";
}

void cmd_build_datasets(const Settings& s, std::ostream& out) {
  Stage stage("build-datasets", s);
  const auto registry = corpus::EntityRegistry::builtin();
  const auto train = load_stage_corpus(stage, false);
  const auto sentences = corpus::read_sentences(stage.require(paths::kTrainSentences, "segment"));

  std::vector<corpus::EntityType> entities;
  if (!s.entities.empty()) {
    for (const auto& name : split_list(s.entities)) {
      const auto* e = registry.find(name);
      if (!e) throw UsageError("unknown entity in entities: " + name);
      entities.push_back(*e);
    }
  } else {
    std::set<std::string> annotated;
    for (const auto& a : train.annotations) annotated.insert(a.entity);
    for (const auto& e : registry.all()) {
      if (annotated.count(e.name)) entities.push_back(e);
    }
  }

  std::unique_ptr<backend::GenerationBackend> model;
  if (s.revise) model = make_backend(stage, s);

  json index = json::array();
  std::vector<json> revision_log;
  for (const auto& entity : entities) {
    auto labeled = corpus::label_sentences(sentences, train.annotations, entity.name, s.match_threshold);
    if (labeled.positives.empty()) {
      stage.note(entity.name + ": no positive sentences, entity skipped");
      continue;
    }
    auto ds = dataset::split(entity, std::move(labeled.positives), std::move(labeled.negatives),
                             s.split_config());
    if (model) {
      const auto outcome = dataset::revise_positives(entity, ds.train_pos, *model, &stage.ledger());
      json kept = json::array();
      for (const auto& ls : outcome.kept) kept.push_back(ls.sentence.note_id + "#" + std::to_string(ls.sentence.index));
      revision_log.push_back(json{{"entity", entity.name},
                                  {"input", ds.train_pos.size()},
                                  {"kept_indices", outcome.kept_indices},
                                  {"dropped_indices", outcome.dropped_indices},
                                  {"fell_back", outcome.fell_back},
                                  {"note", outcome.note},
                                  {"kept", kept}});
      ds.log.push_back("revision: " + outcome.note);
      ds.train_pos = outcome.kept;
    }
    dataset::write_manifest(stage.output(paths::dataset(entity.name)), ds);
    for (const auto& line : ds.log) stage.note(entity.name + ": " + line);
    json counts = json::object();
    for (auto sub : dataset::kSubsets) {
      counts[std::string(dataset::subset_name(sub))] = {ds.positives(sub).size(), ds.negatives(sub).size()};
    }
    index.push_back(json{{"entity", entity.name},
                         {"manifest", paths::dataset(entity.name)},
                         {"small_entity_mode", ds.small_entity_mode},
                         {"counts", counts}});
  }
  if (index.empty()) throw DataError("no entity has positive sentences");
  if (model) jsonl::write(stage.output(paths::kRevisionLog), revision_log);
  stage.write(paths::kDatasetIndex,
              json{{"negative_sampling", "corpus-wide"}, {"entities", index}}.dump(2) + "\n");
  stage.finish();
  out << "built datasets for " << index.size() << " entities\n";
}

void cmd_gen_prompts(const Settings& s, std::ostream& out) {
  Stage stage("gen-prompts", s);
  const auto registry = corpus::EntityRegistry::builtin();
  const auto entities = read_entity_index(stage, registry);
  auto model = make_backend(stage, s);
  scheduler::Scheduler sched(*model, s.retry_policy(), &stage.ledger());
  const auto cfg = s.prompt_config();
  for (const auto& entity : entities) {
    const auto ds = dataset::read_manifest(stage.require(paths::dataset(entity.name), "build-datasets"), registry);
    const auto candidates = promptgen::optimize_entity(entity, ds, cfg, sched);
    promptgen::write_candidates(stage.output(paths::candidates(entity.name)), entity.name, candidates);
    std::size_t usable = 0;
    for (const auto& c : candidates) {
      if (!c.failed()) ++usable;
      stage.note(entity.name + " candidate " + std::to_string(c.candidate_id) + ": " +
                 (c.failed() ? std::string("failed") :
                               "best round " + std::to_string(*c.best_round) + ", test F1 " +
                                   std::to_string(c.test->metrics.f1)));
    }
    out << entity.name << ": " << usable << " of " << candidates.size() << " candidates usable\n";
    if (usable == 0) {
      stage.finish();
      throw BackendExhausted("no candidate prompt for " + entity.name +
                             " passed verification; see logs/gen-prompts.log");
    }
  }
  stage.finish();
}

void cmd_select_prompts(const Settings& s, std::ostream& out) {
  Stage stage("select-prompts", s);
  const auto registry = corpus::EntityRegistry::builtin();
  const auto cfg = s.prompt_config();
  for (const auto& entity : read_entity_index(stage, registry)) {
    const auto candidates = promptgen::read_candidates(stage.require(paths::candidates(entity.name), "gen-prompts"));
    ensemble::PromptEnsemble ens;
    try {
      ens = promptgen::select_ensemble(candidates, cfg);
    } catch (const std::invalid_argument&) {
      throw DataError("no scored candidate for " + entity.name + "; rerun `promptner gen-prompts`");
    }
    ens.entity = entity.name;
    std::vector<double> f1;
    for (const auto& p : ens.prompts) {
      for (const auto& c : candidates) {
        if (c.candidate_id == p.candidate_id) f1.push_back(c.test->metrics.f1);
      }
    }
    promptgen::write_ensemble(stage.output(paths::ensemble(entity.name)), ens, f1);
    out << entity.name << ": selected";
    for (const auto& p : ens.prompts) out << " #" << p.candidate_id;
    out << "\n";
  }
  stage.finish();
}

void cmd_infer(const Settings& s, std::ostream& out) {
  Stage stage("infer", s);
  const auto registry = corpus::EntityRegistry::builtin();
  const auto entities = read_entity_index(stage, registry);
  std::vector<ensemble::PromptEnsemble> ensembles;
  for (const auto& e : entities) {
    ensembles.push_back(promptgen::read_ensemble(stage.require(paths::ensemble(e.name), "select-prompts")));
  }
  const auto sentences = corpus::read_sentences(stage.require(paths::kEvalSentences, "segment"));
  auto model = make_backend(stage, s);
  scheduler::Scheduler sched(*model, s.retry_policy(), &stage.ledger());

  std::vector<json> predictions, audit;
  std::vector<std::string> log;
  std::size_t queries = 0, failed = 0;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    const auto run = ensemble::run_sentences(sentences, entities[i], ensembles[i], sched, {256, 512, "inference/", {}});
    queries += run.screening_queries + run.extraction_queries;
    failed += run.failed_queries;
    for (const auto& line : run.log) log.push_back(entities[i].name + ": " + line);
    for (const auto& r : run.screening) {
      json votes = json::array();
      for (auto v : r.votes) votes.push_back(ensemble::vote_name(v));
      audit.push_back(json{{"entity", entities[i].name},
                           {"note_id", r.sentence.first},
                           {"sentence_index", r.sentence.second},
                           {"votes", votes},
                           {"votes_positive", r.votes_positive},
                           {"advanced", r.advanced}});
    }
    for (const auto& ex : run.extractions) {
      for (const auto& t : ex.texts) {
        predictions.push_back(json{{"note_id", ex.note_id},
                                   {"sentence_index", ex.sentence_index},
                                   {"entity", ex.entity},
                                   {"text", t}});
      }
    }
  }
  jsonl::write(stage.output(paths::kPredictions), predictions);
  jsonl::write(stage.output(paths::kScreening), audit);
  stage.write(paths::kInferenceLog, log.empty() ? std::string() : text::join(log, "\n") + "\n");
  stage.finish();
  out << "inference: " << predictions.size() << " predicted mentions, " << queries << " queries, "
      << failed << " failed\n";
  if (queries > 0 && failed == queries) throw BackendExhausted("the backend answered none of the inference queries");
}

void cmd_evaluate(const Settings& s, std::ostream& out) {
  Stage stage("evaluate", s);
  const auto registry = corpus::EntityRegistry::builtin();
  const auto entities = read_entity_index(stage, registry);
  const auto eval = load_stage_corpus(stage, true);

  using Key = std::pair<std::string, std::string>;  // (note_id, entity)
  std::map<Key, std::vector<std::string>> preds;
  jsonl::for_each(stage.require(paths::kPredictions, "infer"), [&](std::size_t, const json& r) {
    preds[{jsonl::string_field(r, "note_id"), jsonl::string_field(r, "entity")}].push_back(
        jsonl::string_field(r, "text"));
  });
  std::map<Key, std::vector<std::string>> golds;
  for (const auto& a : eval.annotations) golds[{a.note_id, a.entity}].push_back(a.text);

  std::vector<evalkit::EntityCounts> counts;
  for (const auto& e : entities) {
    evalkit::EntityCounts c{e.name, 0, 0, 0};
    for (const auto& note : eval.notes) {
      const Key key{note.note_id, e.name};
      static const std::vector<std::string> kNone;
      const auto p = preds.count(key) ? ensemble::merge_extractions({preds.at(key)}) : kNone;
      const auto& g = golds.count(key) ? golds.at(key) : kNone;
      c += evalkit::match_entities(p, g, s.match_threshold);
    }
    counts.push_back(c);
  }
  const auto report = evalkit::build_report(counts);
  stage.write(paths::kMetricsJson, evalkit::render_report_json(report));
  stage.write(paths::kMetricsText, evalkit::render_report_text(report));
  stage.finish();
  out << evalkit::render_report_text(report);
}

void cmd_report(const Settings& s, std::ostream& out) {
  Stage stage("report", s);
  const auto report = evalkit::parse_report_json(jsonl::read_file(stage.require(paths::kMetricsJson, "evaluate")));
  const auto rendered = evalkit::render_report_text(report);
  stage.write(paths::kReportText, rendered);
  stage.finish();
  out << rendered;
}

void cmd_export_sft(const Settings& s, std::ostream& out) {
  Stage stage("export-sft", s);
  const auto registry = corpus::EntityRegistry::builtin();
  const auto entities = read_entity_index(stage, registry);
  const auto train = load_stage_corpus(stage, false);
  const auto sentences = corpus::read_sentences(stage.require(paths::kTrainSentences, "segment"));

  std::vector<posttrain::EntityLabels> labels;
  for (const auto& e : entities) {
    const auto ens = promptgen::read_ensemble(stage.require(paths::ensemble(e.name), "select-prompts"));
    auto split = corpus::label_sentences(sentences, train.annotations, e.name, s.match_threshold);
    labels.push_back({e.name, ens.prompts.front().text, std::move(split.positives), std::move(split.negatives)});
  }
  const auto sft = posttrain::build_sft_dataset(labels, {s.sft_val_ratio, s.sft_neg_multiplier, s.seed});
  for (const auto& line : sft.log) stage.note(line);
  posttrain::write_sft(stage.output(paths::kSftTrain), sft.train);
  posttrain::write_sft(stage.output(paths::kSftVal), sft.val);
  auto keys = [](const std::vector<posttrain::SftExample>& list) {
    std::vector<json> rows;
    for (const auto& ex : list) {
      rows.push_back(json{{"entity", ex.entity}, {"note_id", ex.sentence.first}, {"sentence_index", ex.sentence.second}});
    }
    return rows;
  };
  jsonl::write(stage.output(paths::kSftTrainKeys), keys(sft.train));
  jsonl::write(stage.output(paths::kSftValKeys), keys(sft.val));
  json stats = json::array();
  for (const auto& st : sft.stats) {
    stats.push_back(json{{"entity", st.entity},
                         {"corpus_pos", st.corpus_pos},
                         {"corpus_neg", st.corpus_neg},
                         {"train_pos", st.train_pos},
                         {"train_neg", st.train_neg},
                         {"val_pos", st.val_pos},
                         {"val_neg", st.val_neg}});
  }
  stage.write(paths::kSftStats, json{{"system_prompt", "top-ranked ensemble prompt"}, {"entities", stats}}.dump(2) + "\n");
  stage.finish();
  out << "SFT export: " << sft.train.size() << " training and " << sft.val.size() << " validation records\n";
}

std::vector<posttrain::SftExample> read_sft_with_keys(Stage& stage, const char* file, const char* keys_file) {
  auto examples = posttrain::read_sft(stage.require(file, "export-sft"));
  std::size_t i = 0;
  jsonl::for_each(stage.require(keys_file, "export-sft"), [&](std::size_t, const json& r) {
    if (i >= examples.size()) throw DataError("key file longer than its SFT file");
    examples[i++].sentence = {jsonl::string_field(r, "note_id"), r.at("sentence_index").get<std::size_t>()};
  });
  if (i != examples.size()) throw DataError(std::string(keys_file) + " does not match " + file);
  return examples;
}

void cmd_export_dpo(const Settings& s, std::ostream& out) {
  Stage stage("export-dpo", s);
  const auto train = read_sft_with_keys(stage, paths::kSftTrain, paths::kSftTrainKeys);
  const auto val = read_sft_with_keys(stage, paths::kSftVal, paths::kSftValKeys);
  auto model = make_backend(stage, s);
  scheduler::Scheduler sched(*model, s.retry_policy(), &stage.ledger());

  auto predict = [&](const std::vector<posttrain::SftExample>& examples, const char* ledger_stage,
                     std::vector<json>& rows) {
    std::vector<backend::GenerationRequest> requests;
    for (const auto& ex : examples) requests.push_back(posttrain::sft_request(ex, s.sft_model));
    const auto result = sched.run(ledger_stage, requests);
    std::vector<posttrain::SftPrediction> preds;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      auto it = result.responses.find(i);
      if (it == result.responses.end()) {
        stage.note(std::string(ledger_stage) + " " + examples[i].sentence.first + "#" +
                   std::to_string(examples[i].sentence.second) + ": " + result.failures.at(i));
        continue;
      }
      preds.push_back({examples[i], it->second.text});
      rows.push_back(json{{"split", ledger_stage == std::string("sft-train") ? "train" : "val"},
                          {"entity", examples[i].entity},
                          {"note_id", examples[i].sentence.first},
                          {"sentence_index", examples[i].sentence.second},
                          {"response", it->second.text}});
    }
    if (!examples.empty() && preds.empty()) {
      throw BackendExhausted("the SFT model answered none of the " + std::string(ledger_stage) + " queries");
    }
    return preds;
  };

  std::vector<json> rows;
  const auto train_preds = predict(train, "sft-train", rows);
  const auto val_preds = predict(val, "sft-val", rows);
  jsonl::write(stage.output(paths::kSftPredictions), rows);

  const auto pairs = posttrain::build_dpo_dataset(train_preds, s.match_threshold);
  posttrain::write_dpo(stage.output(paths::kDpoPairs), pairs);
  std::vector<json> index;
  for (const auto& p : pairs) {
    index.push_back(json{{"entity", p.entity}, {"note_id", p.sentence.first}, {"sentence_index", p.sentence.second}});
  }
  jsonl::write(stage.output(paths::kDpoIndex), index);
  if (!val_preds.empty()) {
    stage.write(paths::kSftReport, evalkit::render_report_json(posttrain::score_predictions(val_preds, s.match_threshold)));
  }
  stage.finish();
  out << "DPO export: " << pairs.size() << " preference pairs from " << train_preds.size()
      << " SFT predictions\n";
}

void cmd_gate_dpo(const Settings& s, std::ostream& out) {
  Stage stage("gate-dpo", s);
  const fs::path report_path = s.report.empty() ? stage.require(paths::kSftReport, "export-dpo")
                                                : stage.external(s.report);
  const auto report = evalkit::parse_report_json(jsonl::read_file(report_path));
  const bool open = posttrain::gate_for_dpo(report, s.dpo_min_f1);
  stage.write(paths::kGate, json{{"micro_f1", report.micro.f1},
                                 {"macro_f1", report.macro.f1},
                                 {"min_f1", s.dpo_min_f1},
                                 {"eligible", open}}
                                .dump(2) + "\n");
  stage.finish();
  out << "DPO gate " << (open ? "open" : "closed") << ": micro F1 " << report.micro.f1 << ", macro F1 "
      << report.macro.f1 << ", threshold " << s.dpo_min_f1 << "\n";
}

void cmd_token_usage(const Settings& s, std::ostream& out) {
  Stage stage("token-usage", s);
  const fs::path dir = stage.at("ledger");
  if (!fs::exists(dir)) throw DataError("no ledger entries in " + dir.string() + "; run a model-backed command first");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  scheduler::TokenLedger total;
  for (const auto& f : files) {
    total.merge(scheduler::TokenLedger::from_json(jsonl::read_file(stage.require("ledger/" + f.filename().string(), "infer"))));
  }
  stage.write(paths::kLedger, total.to_json());
  stage.finish();
  out << "stage                              prompt  completion       total  responses\n";
  auto row = [&](const std::string& name, const scheduler::LedgerCounts& c) {
    std::ostringstream line;
    line << std::left << std::setw(30) << name << std::right << std::setw(11) << c.prompt_tokens
         << std::setw(12) << c.completion_tokens << std::setw(12) << c.total() << std::setw(11) << c.responses
         << "\n";
    out << line.str();
  };
  for (const auto& [name, c] : total.stages()) row(name, c);
  row("total", total.totals());
}

// ---------------------------------------------------------------------------

void register_options(CLI::App& app, Settings& s) {
  auto opt = [&](const char* name, auto& ref, const char* desc) { app.add_option(name, ref, desc); };
  opt("--notes", s.notes, "training notes file");
  opt("--annotations", s.annotations, "training annotations file");
  opt("--eval_notes", s.eval_notes, "gold-standard notes file (default: training notes)");
  opt("--eval_annotations", s.eval_annotations, "gold-standard annotations file");
  opt("--workdir", s.workdir, "experiment directory");
  opt("--entities", s.entities, "comma-separated entity names (default: every annotated entity)");
  opt("--backend", s.backend, "mock or remote");
  opt("--mock_rules", s.mock_rules, "rule table for the mock backend");
  opt("--endpoint", s.endpoint, "chat-completions base URL");
  opt("--model", s.model, "model name for prompt generation and inference");
  opt("--sft_model", s.sft_model, "model name of the fine-tuned model used by export-dpo");
  opt("--context_window", s.context_window, "model context window in tokens");
  opt("--max_concurrent", s.max_concurrent, "requests in flight against the remote backend");
  opt("--timeout_ms", s.timeout_ms, "remote request timeout");
  opt("--seed", s.seed, "seed for every sampled choice");
  opt("--match_threshold", s.match_threshold, "soft-match threshold on the 0-100 scale");
  opt("--train_ratio", s.train_ratio, "positive share for training");
  opt("--val_ratio", s.val_ratio, "positive share for validation");
  opt("--test_ratio", s.test_ratio, "positive share for testing");
  opt("--train_neg_multiplier", s.train_neg_multiplier, "negatives per training positive");
  opt("--val_neg_multiplier", s.val_neg_multiplier, "negatives per validation positive");
  opt("--test_neg_multiplier", s.test_neg_multiplier, "negatives per test positive");
  opt("--min_positives", s.min_positives, "below this many positives an entity runs in small mode");
  opt("--revise", s.revise, "let the model curate training positives");
  opt("--use_desc", s.use_desc, "put the entity description in the meta-prompt");
  opt("--use_ex", s.use_ex, "put sampled examples in the meta-prompt");
  opt("--use_err", s.use_err, "feed incorrect validation sentences into the next round");
  opt("--n_candidates", s.n_candidates, "candidate prompts per entity");
  opt("--max_rounds", s.max_rounds, "optimization rounds per candidate");
  opt("--val_f1_threshold", s.val_f1_threshold, "validation F1 that ends optimization early");
  opt("--select_threshold", s.select_threshold, "test F1 a prompt must exceed to qualify");
  opt("--select_top_k", s.select_top_k, "ensemble size cap");
  opt("--n_examples", s.n_examples, "examples shown in the meta-prompt");
  opt("--max_error_examples", s.max_error_examples, "incorrect sentences fed back per round");
  opt("--max_refine_attempts", s.max_refine_attempts, "rewrites per round before it counts as failed");
  opt("--workers", s.workers, "candidates optimized in parallel");
  opt("--input_ratio", s.input_ratio, "share of the context window one batch may fill");
  opt("--reduction_factor", s.reduction_factor, "ratio multiplier after a capacity failure");
  opt("--min_ratio", s.min_ratio, "lowest ratio before per-item dispatch");
  opt("--sft_val_ratio", s.sft_val_ratio, "positive share of the SFT validation split");
  opt("--sft_neg_multiplier", s.sft_neg_multiplier, "SFT training negatives per positive");
  opt("--dpo_min_f1", s.dpo_min_f1, "F1 that micro or macro must exceed to run DPO");
  opt("--report", s.report, "metrics file for gate-dpo (default: the SFT validation report)");
}

using Command = void (*)(const Settings&, std::ostream&);

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Settings settings;
  CLI::App app{"Self-generated prompt pipeline for clinical entity extraction", "promptner"};
  app.set_config("--config", "", "flat key = value configuration file");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1, 1);
  register_options(app, settings);

  const std::vector<std::tuple<const char*, const char*, Command>> commands = {
      {"ingest", "validate and copy the notes and annotations into the workdir", cmd_ingest},
      {"segment", "split every note into sentences", cmd_segment},
      {"build-datasets", "label, split and optionally revise per-entity datasets", cmd_build_datasets},
      {"gen-prompts", "generate, verify, refine and evaluate candidate prompts", cmd_gen_prompts},
      {"select-prompts", "pick each entity's prompt ensemble", cmd_select_prompts},
      {"infer", "two-stage ensemble inference on the gold-standard notes", cmd_infer},
      {"evaluate", "soft-match predictions against the gold standard", cmd_evaluate},
      {"export-sft", "write the SFT training and validation files", cmd_export_sft},
      {"export-dpo", "run the SFT model and write preference pairs", cmd_export_dpo},
      {"gate-dpo", "decide whether the SFT model qualifies for DPO", cmd_gate_dpo},
      {"report", "print the per-entity metrics table", cmd_report},
      {"token-usage", "aggregate the token ledgers of all commands", cmd_token_usage},
  };
  std::map<const CLI::App*, Command> dispatch;
  for (const auto& [name, desc, fn] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->fallthrough();
    dispatch[sub] = fn;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    settings.validate();
    for (const auto* sub : app.get_subcommands()) dispatch.at(sub)(settings, out);
    return kOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const BackendExhausted& e) {
    err << "error: " << e.what() << "\n";
    return kBackendExhausted;
  } catch (const backend::BackendError& e) {
    err << "error: backend " << backend::error_kind_name(e.kind()) << ": " << e.what() << "\n";
    return kBackendExhausted;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const json::exception& e) {
    err << "error: malformed artifact: " << e.what() << "\n";
    return kDataError;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace promptner::cli
