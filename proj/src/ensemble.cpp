#include "promptner/ensemble.hpp"

#include "promptner/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <optional>
#include <unordered_set>

namespace promptner::ensemble {

using backend::ChatMessage;
using backend::GenerationRequest;
using backend::Role;

namespace {

// Returns the payload of `line` if it starts with the sentinel (any case),
// after stripping markdown emphasis around the line.
std::optional<std::string_view> sentinel_payload(std::string_view line) {
  line = text::trim(line);
  while (!line.empty() && (line.front() == '*' || line.front() == '#')) line.remove_prefix(1);
  while (!line.empty() && line.back() == '*') line.remove_suffix(1);
  line = text::trim(line);
  if (line.size() < kAnswerSentinel.size()) return std::nullopt;
  if (text::to_lower(line.substr(0, kAnswerSentinel.size())) != text::to_lower(kAnswerSentinel)) {
    return std::nullopt;
  }
  auto payload = line.substr(kAnswerSentinel.size());
  while (!payload.empty() && payload.front() == '*') payload.remove_prefix(1);
  return text::trim(payload);
}

std::string reasoning_before(const std::vector<std::string>& lines, std::size_t idx) {
  std::vector<std::string> head(lines.begin(), lines.begin() + static_cast<std::ptrdiff_t>(idx));
  return std::string(text::trim(text::join(head, "\n")));
}

// Parses ["a", 'b'] with backslash escapes. Returns nullopt on any syntax
// error, including trailing content other than a period.
std::optional<std::vector<std::string>> parse_quoted_list(std::string_view s) {
  std::size_t i = 0;
  auto skip_ws = [&] {
    while (i < s.size() && text::is_space(s[i])) ++i;
  };
  skip_ws();
  if (i >= s.size() || s[i] != '[') return std::nullopt;
  ++i;
  std::vector<std::string> items;
  skip_ws();
  if (i < s.size() && s[i] == ']') {
    ++i;
  } else {
    while (true) {
      skip_ws();
      if (i >= s.size() || (s[i] != '"' && s[i] != '\'')) return std::nullopt;
      const char quote = s[i++];
      std::string item;
      bool closed = false;
      while (i < s.size()) {
        char c = s[i++];
        if (c == '\\' && i < s.size()) {
          char e = s[i++];
          item.push_back(e == 'n' ? '\n' : e == 't' ? '\t' : e);
        } else if (c == quote) {
          closed = true;
          break;
        } else {
          item.push_back(c);
        }
      }
      if (!closed) return std::nullopt;
      items.push_back(std::move(item));
      skip_ws();
      if (i < s.size() && s[i] == ',') {
        ++i;
        continue;
      }
      if (i < s.size() && s[i] == ']') {
        ++i;
        break;
      }
      return std::nullopt;
    }
  }
  skip_ws();
  if (i < s.size() && s[i] == '.') ++i;
  skip_ws();
  if (i != s.size()) return std::nullopt;
  return items;
}

}  // namespace

BooleanAnswer parse_boolean(std::string_view response) {
  const auto lines = text::split_lines(response);
  for (std::size_t k = lines.size(); k-- > 0;) {
    auto payload = sentinel_payload(lines[k]);
    if (!payload) continue;
    std::string word = text::to_lower(*payload);
    if (!word.empty() && word.back() == '.') word.pop_back();
    if (word != "yes" && word != "no") continue;
    return {reasoning_before(lines, k), word == "yes", true};
  }
  return {std::string(text::trim(response)), false, false};
}

ListAnswer parse_extraction(std::string_view response) {
  const auto lines = text::split_lines(response);
  for (std::size_t k = lines.size(); k-- > 0;) {
    auto payload = sentinel_payload(lines[k]);
    if (!payload) continue;
    ListAnswer out;
    out.reasoning = reasoning_before(lines, k);
    out.answer_line = std::string(text::trim(lines[k]));
    std::string_view p = *payload;
    if (!p.empty() && p.back() == '.') p.remove_suffix(1);
    if (text::trim(p) == kNoneToken) {
      out.parse_ok = true;
      return out;
    }
    if (auto items = parse_quoted_list(*payload)) {
      for (auto& item : *items) {
        auto trimmed = text::trim(item);
        if (!trimmed.empty()) out.answer.emplace_back(trimmed);
      }
      out.parse_ok = true;
    }
    return out;
  }
  return {std::string(text::trim(response)), {}, false, {}};
}

std::string format_answer_line(const std::vector<std::string>& items) {
  std::string line(kAnswerSentinel);
  if (items.empty()) return line + " " + std::string(kNoneToken);
  line += " [";
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) line += ", ";
    line += nlohmann::json(items[i]).dump();
  }
  return line + "]";
}

std::string dedup_key(std::string_view mention) {
  std::string key = text::normalize(mention);
  auto strip = [](unsigned char c) { return std::ispunct(c) != 0 || text::is_space(static_cast<char>(c)); };
  std::size_t b = 0, e = key.size();
  while (b < e && strip(static_cast<unsigned char>(key[b]))) ++b;
  while (e > b && strip(static_cast<unsigned char>(key[e - 1]))) --e;
  return key.substr(b, e - b);
}

std::vector<std::string> merge_extractions(const std::vector<std::vector<std::string>>& per_prompt) {
  std::vector<std::string> merged;
  std::unordered_set<std::string> seen;
  for (const auto& list : per_prompt) {
    for (const auto& item : list) {
      std::string key = dedup_key(item);
      if (key.empty()) continue;
      if (seen.insert(std::move(key)).second) merged.push_back(item);
    }
  }
  return merged;
}

std::string_view vote_name(Vote vote) {
  switch (vote) {
    case Vote::Yes:
      return "yes";
    case Vote::No:
      return "no";
    case Vote::Unparsed:
      return "unparsed";
    case Vote::Failed:
      return "failed";
  }
  return "failed";
}

GenerationRequest screening_request(const corpus::EntityType& entity, std::string_view prompt,
                                    std::string_view sentence_text, const InferenceOptions& options) {
  std::string user = "TASK: SCREEN\nEntity: " + entity.name +
                     "\nDecide whether the sentence below mentions the target entity. Reason "
                     "briefly, then end with a final line \"ANSWER: YES\" or \"ANSWER: NO\".\n"
                     "Sentence: " +
                     std::string(sentence_text);
  return {{ChatMessage{Role::System, std::string(prompt)}, ChatMessage{Role::User, std::move(user)}},
          options.screen_max_tokens,
          true,
          options.model};
}

GenerationRequest extraction_request(const corpus::EntityType& entity, std::string_view prompt,
                                     std::string_view sentence_text, const InferenceOptions& options) {
  std::string user = "TASK: EXTRACT\nEntity: " + entity.name +
                     "\nList every mention of the target entity in the sentence below, copied "
                     "verbatim. Reason briefly, then end with a final line ANSWER: [\"mention\", "
                     "...] or ANSWER: NONE.\nSentence: " +
                     std::string(sentence_text);
  return {{ChatMessage{Role::System, std::string(prompt)}, ChatMessage{Role::User, std::move(user)}},
          options.extract_max_tokens,
          true,
          options.model};
}

namespace {

std::string sentence_ref(const corpus::Sentence& s) {
  return s.note_id + "#" + std::to_string(s.index);
}

}  // namespace

std::vector<ScreeningResult> screen(const std::vector<corpus::Sentence>& sentences,
                                    const corpus::EntityType& entity, const PromptEnsemble& ensemble,
                                    scheduler::Scheduler& scheduler, std::vector<std::string>* log,
                                    const InferenceOptions& options) {
  const std::size_t k = ensemble.prompts.size();
  if (k == 0) throw std::invalid_argument("screen: empty ensemble");
  std::vector<GenerationRequest> requests;
  requests.reserve(sentences.size() * k);
  for (const auto& s : sentences) {
    for (const auto& p : ensemble.prompts) {
      requests.push_back(screening_request(entity, p.text, s.text, options));
    }
  }
  const auto result = scheduler.run(options.stage_prefix + "screening", requests);

  std::vector<ScreeningResult> out;
  out.reserve(sentences.size());
  for (std::size_t si = 0; si < sentences.size(); ++si) {
    ScreeningResult r{corpus::key_of(sentences[si]), {}, 0, k, false};
    for (std::size_t pi = 0; pi < k; ++pi) {
      const std::size_t id = si * k + pi;
      Vote vote = Vote::Failed;
      if (auto it = result.responses.find(id); it != result.responses.end()) {
        const auto parsed = parse_boolean(it->second.text);
        vote = !parsed.parse_ok ? Vote::Unparsed : parsed.answer ? Vote::Yes : Vote::No;
      }
      if (log && (vote == Vote::Unparsed || vote == Vote::Failed)) {
        std::string why = vote == Vote::Failed ? result.failures.at(id) : "no answer line";
        log->push_back("screening " + sentence_ref(sentences[si]) + " prompt " +
                       std::to_string(ensemble.prompts[pi].candidate_id) + ": " +
                       std::string(vote_name(vote)) + " (" + why + "), counted as NO");
      }
      if (vote == Vote::Yes) ++r.votes_positive;
      r.votes.push_back(vote);
    }
    r.advanced = strict_majority(r.votes_positive, r.votes_total);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Extraction> extract(const std::vector<corpus::Sentence>& advanced,
                                const corpus::EntityType& entity, const PromptEnsemble& ensemble,
                                scheduler::Scheduler& scheduler, std::vector<std::string>* log,
                                const InferenceOptions& options, std::size_t* failed_queries) {
  const std::size_t k = ensemble.prompts.size();
  if (k == 0) throw std::invalid_argument("extract: empty ensemble");
  std::vector<GenerationRequest> requests;
  requests.reserve(advanced.size() * k);
  for (const auto& s : advanced) {
    for (const auto& p : ensemble.prompts) {
      requests.push_back(extraction_request(entity, p.text, s.text, options));
    }
  }
  const auto result = scheduler.run(options.stage_prefix + "extraction", requests);

  std::vector<Extraction> out;
  out.reserve(advanced.size());
  for (std::size_t si = 0; si < advanced.size(); ++si) {
    std::vector<std::vector<std::string>> per_prompt;
    for (std::size_t pi = 0; pi < k; ++pi) {
      const std::size_t id = si * k + pi;
      auto it = result.responses.find(id);
      if (it == result.responses.end()) {
        if (failed_queries) ++*failed_queries;
        if (log) {
          log->push_back("extraction " + sentence_ref(advanced[si]) + " prompt " +
                         std::to_string(ensemble.prompts[pi].candidate_id) + ": failed (" +
                         result.failures.at(id) + ")");
        }
        per_prompt.emplace_back();
        continue;
      }
      auto parsed = parse_extraction(it->second.text);
      if (!parsed.parse_ok && log) {
        log->push_back("extraction " + sentence_ref(advanced[si]) + " prompt " +
                       std::to_string(ensemble.prompts[pi].candidate_id) +
                       ": unparsed answer, treated as empty");
      }
      per_prompt.push_back(std::move(parsed.answer));
    }
    out.push_back({advanced[si].note_id, advanced[si].index, entity.name, merge_extractions(per_prompt)});
  }
  return out;
}

EntityRun run_sentences(const std::vector<corpus::Sentence>& sentences,
                        const corpus::EntityType& entity, const PromptEnsemble& ensemble,
                        scheduler::Scheduler& scheduler, const InferenceOptions& options) {
  EntityRun run;
  run.screening = screen(sentences, entity, ensemble, scheduler, &run.log, options);
  run.screening_queries = sentences.size() * ensemble.prompts.size();
  for (const auto& r : run.screening) {
    run.failed_queries += static_cast<std::size_t>(std::count(r.votes.begin(), r.votes.end(), Vote::Failed));
  }
  std::vector<corpus::Sentence> advanced;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (run.screening[i].advanced) advanced.push_back(sentences[i]);
  }
  run.extraction_queries = advanced.size() * ensemble.prompts.size();
  if (!advanced.empty()) {
    run.extractions =
        extract(advanced, entity, ensemble, scheduler, &run.log, options, &run.failed_queries);
  }
  return run;
}

EntityRun run_entity(const std::vector<corpus::Note>& notes, const corpus::EntityType& entity,
                     const PromptEnsemble& ensemble, scheduler::Scheduler& scheduler,
                     const corpus::Segmenter& segmenter, const InferenceOptions& options) {
  std::vector<corpus::Sentence> sentences;
  for (const auto& note : notes) {
    auto segmented = segmenter.segment(note);
    sentences.insert(sentences.end(), segmented.begin(), segmented.end());
  }
  return run_sentences(sentences, entity, ensemble, scheduler, options);
}

}  // namespace promptner::ensemble
