#include "promptner/promptgen.hpp"

#include "promptner/errors.hpp"
#include "promptner/jsonl.hpp"
#include "promptner/random.hpp"
#include "promptner/text.hpp"

#include <boost/regex.hpp>

#include <algorithm>
#include <atomic>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace promptner::promptgen {

using backend::ChatMessage;
using backend::GenerationRequest;
using backend::Role;
using jsonl::json;

void PromptConfig::validate() const {
  auto fraction = [](double v) { return v > 0.0 && v <= 1.0; };
  if (!fraction(val_f1_threshold) || !fraction(select_threshold)) {
    throw std::invalid_argument("prompt thresholds must lie in (0, 1]");
  }
  if (n_candidates < 1) throw std::invalid_argument("n_candidates must be >= 1");
  if (max_rounds < 1) throw std::invalid_argument("max_rounds must be >= 1");
  if (select_top_k < 1) throw std::invalid_argument("select_top_k must be >= 1");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
}

const std::vector<CriterionInfo>& criteria() {
  static const std::vector<CriterionInfo> list = {
      {"C1", "name the target entity"},
      {"C2", "state that the task is to extract mentions of the entity"},
      {"C3", "require a final answer line starting with ANSWER:"},
      {"C4", "say that ANSWER: NONE is the output when nothing is found"},
      {"C5", "include a definition of the entity"},
      {"C6", "require mentions to be copied verbatim from the sentence"},
      {"C7", "contain no unresolved placeholders or truncation artifacts"},
      {"C8", "be between 200 and 6000 characters long"},
      {"C9", "never ask the model to fabricate examples"},
  };
  return list;
}

namespace {

bool search_icase(std::string_view text, const char* pattern) {
  const boost::regex re(pattern, boost::regex::perl | boost::regex::icase);
  return boost::regex_search(text.begin(), text.end(), re);
}

bool has_placeholder(std::string_view text) {
  static const boost::regex bracketed(R"(\[[A-Z][A-Z0-9 _-]{2,}\]|\{\{|\}\}|<<<|>>>|\bTODO\b)",
                                      boost::regex::perl);
  if (boost::regex_search(text.begin(), text.end(), bracketed)) return true;
  const auto trimmed = text::trim(text);
  return trimmed.ends_with("...") || trimmed.ends_with("\xE2\x80\xA6");
}

}  // namespace

Verification verify_prompt(std::string_view text, std::string_view entity_name) {
  Verification v;
  auto check = [&](const char* id, bool ok) {
    if (!ok) v.violations.emplace_back(id);
  };
  check("C1", !entity_name.empty() && text::contains_ci(text, entity_name));
  check("C2", text::contains_ci(text, "extract"));
  check("C3", text.find("ANSWER:") != std::string_view::npos);
  check("C4", text.find("NONE") != std::string_view::npos);
  check("C5", search_icase(text, R"(\bdefinition\b|\bdefined as\b|\brefers to\b)"));
  check("C6", search_icase(text, R"(\bverbatim\b|\bexactly as\b)"));
  check("C7", !has_placeholder(text));
  const std::size_t length = text::utf8_decode(text).size();
  check("C8", length >= kMinPromptLength && length <= kMaxPromptLength);
  check("C9", !search_icase(text, R"(\bfabricat\w*|\bmake up\b|\bmade up\b|\binvent(s|ed|ing)?\b|)"
                                  R"(\bcreate (an |new |your own )?examples?\b|\bhypothetical examples?\b)"));
  v.pass = v.violations.empty();
  return v;
}

std::string extract_prompt(std::string_view response) {
  const auto begin = response.find(kPromptBegin);
  if (begin != std::string_view::npos) {
    const auto body = begin + kPromptBegin.size();
    const auto end = response.find(kPromptEnd, body);
    if (end != std::string_view::npos) return std::string(text::trim(response.substr(body, end - body)));
  }
  return std::string(text::trim(response));
}

namespace {

std::string quoted_list(const std::vector<std::string>& items) {
  return ensemble::format_answer_line(items).substr(ensemble::kAnswerSentinel.size() + 1);
}

std::vector<dataset::LabeledSentence> sample_examples(const dataset::EntityDataset& ds,
                                                      const PromptConfig& cfg, int candidate_id) {
  std::vector<dataset::LabeledSentence> pool = ds.train_pos;
  SeededRng rng(derive_seed(cfg.seed, ds.entity.name + "#examples#" + std::to_string(candidate_id)));
  rng.shuffle(pool);
  if (pool.size() > cfg.n_examples) pool.resize(cfg.n_examples);
  return pool;
}

}  // namespace

std::string compose_meta_prompt(const corpus::EntityType& entity, const dataset::EntityDataset& ds,
                                const PromptConfig& cfg, int candidate_id, std::size_t round,
                                std::string_view previous, const std::vector<ErrorExample>& errors) {
  std::string out;
  out += "TASK: WRITE PROMPT\n";
  out += "Write one instruction prompt that tells a language model how to find mentions of the "
         "target entity in a single sentence taken from a dental clinical note.\n";
  out += "Target entity: " + entity.name + "\n";
  if (cfg.use_desc) out += "Description: " + entity.description + "\n";
  if (cfg.use_ex) {
    const auto examples = sample_examples(ds, cfg, candidate_id);
    if (!examples.empty()) {
      out += "Example sentences with their mentions:\n";
      for (const auto& ex : examples) {
        out += "- Sentence: " + ex.sentence.text + "\n  Mentions: " + quoted_list(ex.golds) + "\n";
      }
    }
  }
  out += "The instruction prompt must:\n";
  for (const auto& c : criteria()) out += "- " + std::string(c.requirement) + "\n";
  out += "Candidate number: " + std::to_string(candidate_id) + "\n";
  out += "Round: " + std::to_string(round) + "\n";
  if (round > 1 && !previous.empty()) {
    out += "Previous instruction prompt:\n" + std::string(previous) + "\n";
    if (!errors.empty()) {
      out += "The previous prompt got these validation sentences wrong:\n";
      for (const auto& e : errors) {
        out += "- Sentence: " + e.sentence + "\n  Expected: " +
               ensemble::format_answer_line(e.expected) +
               "\n  Produced: " + ensemble::format_answer_line(e.produced) + "\n";
      }
    }
    out += "Improve the previous instruction prompt.\n";
  }
  out += "Return only the instruction prompt, between a line " + std::string(kPromptBegin) +
         " and a line " + std::string(kPromptEnd) + ".";
  return out;
}

GenerationRequest generation_request(const corpus::EntityType& entity,
                                     const dataset::EntityDataset& ds, const PromptConfig& cfg,
                                     int candidate_id, std::size_t round, std::string_view previous,
                                     const std::vector<ErrorExample>& errors) {
  return {{ChatMessage{Role::System, "You design instruction prompts for clinical named entity "
                                     "recognition in dental notes."},
           ChatMessage{Role::User,
                       compose_meta_prompt(entity, ds, cfg, candidate_id, round, previous, errors)}},
          2048,
          true,
          {}};
}

GenerationRequest refine_request(std::string_view text, const std::vector<std::string>& violations) {
  std::string user = "TASK: REFINE PROMPT\nThe instruction prompt below breaks these requirements:\n";
  for (const auto& id : violations) {
    std::string_view requirement = "unknown requirement";
    for (const auto& c : criteria()) {
      if (c.id == id) requirement = c.requirement;
    }
    user += "- " + id + ": it must " + std::string(requirement) + "\n";
  }
  user += "Rewrite it so that every requirement holds and return only the rewritten prompt, "
          "between a line " +
          std::string(kPromptBegin) + " and a line " + std::string(kPromptEnd) +
          ".\nInstruction prompt:\n" + std::string(text);
  return {{ChatMessage{Role::System, "You revise instruction prompts for clinical named entity "
                                     "recognition in dental notes."},
           ChatMessage{Role::User, std::move(user)}},
          2048,
          true,
          {}};
}

std::string refine_prompt(std::string_view text, const std::vector<std::string>& violations,
                          backend::GenerationBackend& backend, scheduler::TokenLedger* ledger) {
  if (violations.empty()) throw std::invalid_argument("refine_prompt needs at least one violation");
  try {
    const auto response =
        scheduler::complete_metered(backend, refine_request(text, violations), ledger, "refinement");
    std::string rewritten = extract_prompt(response.text);
    if (rewritten.empty()) return std::string(text);
    return rewritten;
  } catch (const backend::BackendError&) {
    return std::string(text);
  }
}

EvaluationResult evaluate_prompt(std::string_view prompt,
                                 const std::vector<dataset::LabeledSentence>& sentences,
                                 const corpus::EntityType& entity, scheduler::Scheduler& scheduler,
                                 double match_threshold, const ensemble::InferenceOptions& options) {
  if (sentences.empty()) throw std::invalid_argument("evaluate_prompt: empty subset");
  std::vector<corpus::Sentence> plain;
  plain.reserve(sentences.size());
  for (const auto& ls : sentences) plain.push_back(ls.sentence);

  const ensemble::PromptEnsemble single{entity.name, {{0, std::string(prompt)}}};
  const auto run = ensemble::run_sentences(plain, entity, single, scheduler, options);

  std::map<corpus::SentenceKey, const std::vector<std::string>*> extracted;
  for (const auto& ex : run.extractions) extracted[{ex.note_id, ex.sentence_index}] = &ex.texts;

  EvaluationResult result;
  result.counts.entity = entity.name;
  std::vector<evalkit::SentenceOutcome> outcomes;
  static const std::vector<std::string> kNothing;
  for (const auto& ls : sentences) {
    auto it = extracted.find(corpus::key_of(ls.sentence));
    const auto& preds = it == extracted.end() ? kNothing : *it->second;
    const auto counts = evalkit::match_entities(preds, ls.golds, match_threshold);
    result.counts += counts;
    if (counts.fp > 0 || counts.fn > 0) result.errors.push_back({ls.sentence.text, ls.golds, preds});
    outcomes.push_back({ls.positive(), ls.golds, preds});
  }
  result.metrics = evalkit::metrics_from_counts(result.counts);
  const auto aux = evalkit::auxiliary_accuracies(outcomes, match_threshold);
  result.negative_accuracy = aux.negative_accuracy;
  result.positive_accuracy = aux.positive_softmatch_accuracy;
  return result;
}

CandidatePrompt optimize_candidate(const corpus::EntityType& entity, const dataset::EntityDataset& ds,
                                   const PromptConfig& cfg, int candidate_id,
                                   scheduler::Scheduler& scheduler) {
  cfg.validate();
  CandidatePrompt cand;
  cand.entity = entity.name;
  cand.candidate_id = candidate_id;

  const auto validation = ds.validation_set();
  const ensemble::InferenceOptions val_options{256, 512, "promptgen/validation/", {}};
  std::string previous;
  std::vector<ErrorExample> feedback;

  for (std::size_t round = 1; round <= cfg.max_rounds; ++round) {
    RoundRecord rec;
    rec.round = round;
    rec.error_examples_fed = feedback.size();

    std::string text;
    try {
      const auto response = scheduler::complete_metered(
          scheduler.backend(),
          generation_request(entity, ds, cfg, candidate_id, round, previous, feedback),
          scheduler.ledger(), "generation");
      text = extract_prompt(response.text);
    } catch (const backend::BackendError& e) {
      rec.note = std::string("generation failed: ") + e.what();
      cand.rounds.push_back(std::move(rec));
      continue;
    }

    auto check = verify_prompt(text, entity.name);
    rec.violations = check.violations;
    while (!check.pass && rec.refine_attempts < cfg.max_refine_attempts) {
      text = refine_prompt(text, check.violations, scheduler.backend(), scheduler.ledger());
      check = verify_prompt(text, entity.name);
      ++rec.refine_attempts;
    }
    rec.prompt = text;
    rec.verification_passed = check.pass;
    if (!check.pass) {
      rec.note = "still failing " + text::join(check.violations, ",") + " after refinement";
      cand.rounds.push_back(std::move(rec));
      continue;
    }

    rec.validation = evaluate_prompt(text, validation, entity, scheduler, cfg.match_threshold, val_options);
    const double f1 = rec.validation->metrics.f1;
    if (!cand.best_round || f1 > cand.best_val_f1) {
      cand.best_round = round;
      cand.best_val_f1 = f1;
      cand.text = text;
    }
    previous = text;
    feedback.clear();
    if (cfg.use_err) {
      const auto& errs = rec.validation->errors;
      feedback.assign(errs.begin(), errs.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(errs.size(), cfg.max_error_examples)));
    }
    cand.rounds.push_back(std::move(rec));
    if (f1 >= cfg.val_f1_threshold) break;
  }

  if (cand.best_round) {
    const ensemble::InferenceOptions test_options{256, 512, "promptgen/test/", {}};
    cand.test = evaluate_prompt(cand.text, ds.sentences(dataset::Subset::Test), entity, scheduler,
                                cfg.match_threshold, test_options);
  }
  return cand;
}

std::vector<CandidatePrompt> optimize_entity(const corpus::EntityType& entity,
                                             const dataset::EntityDataset& ds,
                                             const PromptConfig& cfg,
                                             scheduler::Scheduler& scheduler) {
  cfg.validate();
  std::vector<CandidatePrompt> out(cfg.n_candidates);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < out.size(); i = next++) {
      try {
        out[i] = optimize_candidate(entity, ds, cfg, static_cast<int>(i + 1), scheduler);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(cfg.workers, out.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<std::size_t> select_indices(const std::vector<double>& f1, const std::vector<int>& ids,
                                        double threshold, std::size_t top_k) {
  std::vector<std::size_t> order(f1.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (f1[a] != f1[b]) return f1[a] > f1[b];
    return ids[a] < ids[b];
  });
  const auto above = static_cast<std::size_t>(
      std::count_if(f1.begin(), f1.end(), [&](double v) { return v > threshold; }));
  const std::size_t keep = above > 0 ? std::min(above, top_k) : std::min(top_k, f1.size());
  order.resize(keep);
  return order;
}

ensemble::PromptEnsemble select_ensemble(const std::vector<CandidatePrompt>& candidates,
                                         const PromptConfig& cfg) {
  std::vector<const CandidatePrompt*> scored;
  for (const auto& c : candidates) {
    if (!c.failed() && c.test) scored.push_back(&c);
  }
  if (scored.empty()) throw std::invalid_argument("no candidate prompt has a test score");
  std::vector<double> f1;
  std::vector<int> ids;
  for (const auto* c : scored) {
    f1.push_back(c->test->metrics.f1);
    ids.push_back(c->candidate_id);
  }
  ensemble::PromptEnsemble out;
  out.entity = scored.front()->entity;
  for (auto i : select_indices(f1, ids, cfg.select_threshold, cfg.select_top_k)) {
    out.prompts.push_back({scored[i]->candidate_id, scored[i]->text});
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

json evaluation_json(const EvaluationResult& r) {
  json errors = json::array();
  for (const auto& e : r.errors) {
    errors.push_back(json{{"sentence", e.sentence}, {"expected", e.expected}, {"produced", e.produced}});
  }
  return json{{"tp", r.counts.tp},
              {"fp", r.counts.fp},
              {"fn", r.counts.fn},
              {"precision", r.metrics.precision},
              {"recall", r.metrics.recall},
              {"f1", r.metrics.f1},
              {"negative_accuracy", r.negative_accuracy},
              {"positive_softmatch_accuracy", r.positive_accuracy},
              {"errors", std::move(errors)}};
}

EvaluationResult evaluation_from_json(const json& j, const std::string& entity) {
  EvaluationResult r;
  r.counts = {entity, j.at("tp").get<std::size_t>(), j.at("fp").get<std::size_t>(),
              j.at("fn").get<std::size_t>()};
  r.metrics = {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
  r.negative_accuracy = j.at("negative_accuracy").get<double>();
  r.positive_accuracy = j.at("positive_softmatch_accuracy").get<double>();
  for (const auto& e : j.at("errors")) {
    r.errors.push_back({e.at("sentence").get<std::string>(), e.at("expected").get<std::vector<std::string>>(),
                        e.at("produced").get<std::vector<std::string>>()});
  }
  return r;
}

}  // namespace

void write_candidates(const std::filesystem::path& path, const std::string& entity,
                      const std::vector<CandidatePrompt>& candidates) {
  json list = json::array();
  for (const auto& c : candidates) {
    json rounds = json::array();
    for (const auto& r : c.rounds) {
      json rj{{"round", r.round},
              {"verification_passed", r.verification_passed},
              {"violations", r.violations},
              {"refine_attempts", r.refine_attempts},
              {"error_examples_fed", r.error_examples_fed},
              {"validation", r.validation ? evaluation_json(*r.validation) : json(nullptr)},
              {"note", r.note},
              {"prompt", r.prompt}};
      rounds.push_back(std::move(rj));
    }
    list.push_back(json{{"candidate_id", c.candidate_id},
                        {"failed", c.failed()},
                        {"best_round", c.best_round ? json(*c.best_round) : json(nullptr)},
                        {"best_val_f1", c.best_val_f1},
                        {"test", c.test ? evaluation_json(*c.test) : json(nullptr)},
                        {"text", c.text},
                        {"rounds", std::move(rounds)}});
  }
  jsonl::write_file(path, json{{"entity", entity}, {"candidates", std::move(list)}}.dump(2) + "\n");
}

std::vector<CandidatePrompt> read_candidates(const std::filesystem::path& path) {
  try {
    const json doc = json::parse(jsonl::read_file(path));
    const std::string entity = doc.at("entity").get<std::string>();
    std::vector<CandidatePrompt> out;
    for (const auto& cj : doc.at("candidates")) {
      CandidatePrompt c;
      c.entity = entity;
      c.candidate_id = cj.at("candidate_id").get<int>();
      if (!cj.at("best_round").is_null()) c.best_round = cj.at("best_round").get<std::size_t>();
      c.best_val_f1 = cj.at("best_val_f1").get<double>();
      if (!cj.at("test").is_null()) c.test = evaluation_from_json(cj.at("test"), entity);
      c.text = cj.at("text").get<std::string>();
      for (const auto& rj : cj.at("rounds")) {
        RoundRecord r;
        r.round = rj.at("round").get<std::size_t>();
        r.verification_passed = rj.at("verification_passed").get<bool>();
        r.violations = rj.at("violations").get<std::vector<std::string>>();
        r.refine_attempts = rj.at("refine_attempts").get<std::size_t>();
        r.error_examples_fed = rj.at("error_examples_fed").get<std::size_t>();
        if (!rj.at("validation").is_null()) r.validation = evaluation_from_json(rj.at("validation"), entity);
        r.note = rj.at("note").get<std::string>();
        r.prompt = rj.at("prompt").get<std::string>();
        c.rounds.push_back(std::move(r));
      }
      out.push_back(std::move(c));
    }
    return out;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_ensemble(const std::filesystem::path& path, const ensemble::PromptEnsemble& ens,
                    const std::vector<double>& test_f1) {
  json prompts = json::array();
  for (std::size_t i = 0; i < ens.prompts.size(); ++i) {
    json pj{{"candidate_id", ens.prompts[i].candidate_id}};
    if (i < test_f1.size()) pj["test_f1"] = test_f1[i];
    pj["text"] = ens.prompts[i].text;
    prompts.push_back(std::move(pj));
  }
  jsonl::write_file(path, json{{"entity", ens.entity}, {"prompts", std::move(prompts)}}.dump(2) + "\n");
}

ensemble::PromptEnsemble read_ensemble(const std::filesystem::path& path) {
  try {
    const json doc = json::parse(jsonl::read_file(path));
    ensemble::PromptEnsemble ens;
    ens.entity = doc.at("entity").get<std::string>();
    for (const auto& pj : doc.at("prompts")) {
      ens.prompts.push_back({pj.at("candidate_id").get<int>(), pj.at("text").get<std::string>()});
    }
    if (ens.prompts.empty()) throw DataError(path.string() + ": ensemble has no prompts");
    return ens;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace promptner::promptgen
