#include "promptner/corpus.hpp"

#include "promptner/errors.hpp"
#include "promptner/evalkit.hpp"
#include "promptner/jsonl.hpp"
#include "promptner/text.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>
#include <tuple>
#include <unordered_set>

namespace promptner::corpus {

EntityRegistry EntityRegistry::builtin() {
  EntityRegistry r;
  r.add({"Age",
         "Numerical expressions indicating a patient's age, such as '56 y/o,' '25 years old,' or "
         "'infant'."});
  r.add({"Race",
         "Explicit mentions of a patient's racial group or geographic/physical origin (e.g., "
         "'White,' 'Caucasian,' 'Black,' 'African American,' 'Asian,' 'Chinese')."});
  r.add({"Ethnicity",
         "Explicit mentions of Hispanic, Latino, or Spanish origin (e.g., 'Hispanic,' 'Latina,' "
         "'Latinx,' 'Mexican-American'), excludes of the patient's race (EXAMPLES)."});
  r.add({"Sex", "Explicitly stated gender-related terms, including 'Male,' 'Female,' or 'Transgender'."});
  r.add({"Perio Diagnoses",
         "Explicit mentions or classification of the patient's periodontal status, strictly limited "
         "to three categories: Periodontitis, Gingivitis, or Gingival Health. The diagnosis is "
         "typically stated directly (e.g., generalized Stage III Grade B periodontitis), but the "
         "term Periodontitis may sometimes be implied by the presence of specific modifiers (Stage "
         "or Grade). Note that Gingivitis typically associates with Extent and Subtype, while "
         "Gingival Health associates with Subtype only."});
  r.add({"Stage",
         "Explicit mentions of the severity classification for Periodontitis, denoted strictly as "
         "Stage I, Stage II, Stage III, or Stage IV."});
  r.add({"Grade",
         "Explicit mentions of the progression rate or risk factor for Periodontitis, denoted "
         "strictly as Grade A, Grade B, or Grade C."});
  r.add({"Extent",
         "Explicit mentions of the spatial distribution or area affected by the condition "
         "(applicable to both Periodontitis and Gingivitis), such as Localized or Generalized."});
  r.add({"Subtype",
         "Explicit mentions of the specific state of the periodontal tissues or historical context "
         "(applicable to Gingivitis or Gingival Health), such as Intact Periodontium, Reduced "
         "Periodontium, Stable Periodontitis, or Non-Periodontitis."});
  r.add({"Social Factors",
         "Explicit references to health-impacting social behaviors, such as 'smoking,' 'drinking "
         "alcohol,' 'tobacco use,' or 'drug use'. Excludes negated statements (e.g., "
         "'non-smoker,' 'denies drug use')."});
  r.add({"HbA1c Levels",
         "Explicit numerical mentions of 'HbA1c test results', including units when provided "
         "(e.g., 'HbA1c 6.5%,' 'HbA1c level of 7.2%')."});
  r.add({"Systemic Condition",
         "Explicit mentions of diagnosed medical conditions, systemic diseases, or disorders, "
         "whether currently active or historical (e.g., hypertension, Type 2 Diabetes, asthma, "
         "obesity, history of stroke)."});
  r.add({"Family History Disease",
         "Explicit mentions of medical conditions in the patient's family members or inherited "
         "diseases (e.g., family history of heart disease, mother has diabetes)."});
  r.add({"Previous Medical Procedure",
         "Explicit mentions of surgical interventions, therapeutic treatments, implants, or "
         "hospitalizations that occurred prior to the current visit (e.g., appendectomy, "
         "chemotherapy, previous C-section, stent placement, pacemaker)."});
  r.add({"Medication Allergy",
         "Explicit mentions of allergic reactions to medications (e.g., penicillin allergy), "
         "excluding negated statements or indications of no allergy (e.g., no allergy to "
         "penicillin, denies medication allergies, NKDA - No Known Drug Allergies)."});
  r.add({"Medication Taken",
         "Explicit mentions of medications or supplements currently taken, prescribed for home "
         "use, or previously used by the patient (e.g., taking metformin, Amoxicillin, vitamin "
         "B12). Excludes hypothetical suggestions or recommendations, dosage instructions, and "
         "medications administered acutely as part of the current procedure or visit."});
  r.add({"Brushing frequency",
         "Mentions of the patient's toothbrushing frequency or habits (e.g., \"brushes twice a "
         "day\"). Exclude negated statements (e.g., \"does not brush\"), suggestions or "
         "instructions, and brushing done only during an in-office procedure."});
  r.add({"Flossing",
         "Mentions of flossing frequency or habits, including proxy brush, interdental brush, or "
         "Waterpik use at home (e.g., \"flosses daily,\" \"uses Waterpik nightly\"). Exclude "
         "negated statements, suggestions or advice, and interdental cleaning done only during "
         "in-office procedures."});
  r.add({"Other Home Care",
         "Mentions of at-home oral hygiene behaviors other than brushing and flossing (e.g., "
         "mouthwash, fluoride products, tongue cleaning). Exclude negated behaviors, suggestions "
         "or instructions, and products applied or used only as part of in-office treatment or "
         "procedures."});
  return r;
}

void EntityRegistry::add(EntityType entity) {
  if (text::trim(entity.name).empty()) throw std::invalid_argument("entity name is empty");
  if (find(entity.name)) throw std::invalid_argument("duplicate entity: " + entity.name);
  entities_.push_back(std::move(entity));
}

const EntityType* EntityRegistry::find(std::string_view name) const {
  for (const auto& e : entities_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const EntityType& EntityRegistry::at(std::string_view name) const {
  if (const auto* e = find(name)) return *e;
  throw std::out_of_range("unknown entity: " + std::string(name));
}

Corpus load_corpus(const std::filesystem::path& notes_path,
                   const std::filesystem::path& annotations_path, const EntityRegistry& registry) {
  Corpus corpus;
  std::unordered_set<std::string> ids;
  jsonl::for_each(notes_path, [&](std::size_t, const jsonl::json& r) {
    Note note{jsonl::string_field(r, "note_id"), jsonl::string_field(r, "text")};
    if (!ids.insert(note.note_id).second) throw DataError("duplicate note_id " + note.note_id);
    corpus.notes.push_back(std::move(note));
  });

  std::set<std::tuple<std::string, std::string, std::string>> seen;
  jsonl::for_each(annotations_path, [&](std::size_t, const jsonl::json& r) {
    GoldAnnotation a{jsonl::string_field(r, "note_id"), jsonl::string_field(r, "entity"),
                     jsonl::string_field(r, "text")};
    if (!ids.count(a.note_id)) throw DataError("annotation references unknown note_id " + a.note_id);
    if (!registry.find(a.entity)) throw DataError("unregistered entity \"" + a.entity + "\"");
    if (text::normalize(a.text).empty()) throw DataError("blank annotation text");
    if (seen.emplace(a.note_id, a.entity, a.text).second) corpus.annotations.push_back(std::move(a));
  });
  return corpus;
}

void write_notes(const std::filesystem::path& path, const std::vector<Note>& notes) {
  std::vector<jsonl::json> records;
  for (const auto& n : notes) records.push_back({{"note_id", n.note_id}, {"text", n.text}});
  jsonl::write(path, records);
}

void write_annotations(const std::filesystem::path& path,
                       const std::vector<GoldAnnotation>& annotations) {
  std::vector<jsonl::json> records;
  for (const auto& a : annotations) {
    records.push_back({{"note_id", a.note_id}, {"entity", a.entity}, {"text", a.text}});
  }
  jsonl::write(path, records);
}

// ---------------------------------------------------------------------------
// Segmentation

RuleSegmenter::RuleSegmenter()
    : abbreviations_{"y/o.", "yo.", "pt.", "pts.", "hx.", "dx.", "tx.", "rx.", "sx.", "fx.",
                     "approx.", "e.g.", "i.e.", "etc.", "vs.", "wk.", "wks.", "mo.", "mos.",
                     "yr.", "yrs.", "min.", "max.", "no.", "b.i.d.", "t.i.d.", "q.i.d.", "p.r.n.",
                     "bid.", "tid.", "qd.", "prn.", "mg.", "ml."},
      titles_{"dr.", "mr.", "mrs.", "ms.", "st.", "prof."} {}

namespace {

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }
bool is_closer(char c) { return c == ')' || c == ']' || c == '"' || c == '\''; }

void emit(const Note& note, std::size_t start, std::size_t end, std::vector<Sentence>& out) {
  while (start < end && text::is_space(note.text[start])) ++start;
  while (end > start && text::is_space(note.text[end - 1])) --end;
  if (start == end) return;
  out.push_back({note.note_id, out.size(), note.text.substr(start, end - start), {start, end}});
}

}  // namespace

std::vector<Sentence> RuleSegmenter::segment(const Note& note) const {
  const std::string& t = note.text;
  std::vector<Sentence> out;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < t.size()) {
    if (t[i] == '\n') {
      emit(note, start, i, out);
      start = ++i;
      continue;
    }
    if (!is_terminator(t[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < t.size() && is_terminator(t[j])) ++j;
    const bool single_period = j == i + 1 && t[i] == '.';
    while (j < t.size() && is_closer(t[j])) ++j;
    if (j < t.size() && !text::is_space(t[j])) {
      i = j;
      continue;
    }
    if (single_period) {
      std::size_t w = i;
      while (w > start && !text::is_space(t[w - 1])) --w;
      while (w < i && (t[w] == '(' || t[w] == '"' || t[w] == '\'')) ++w;
      const std::string token = text::to_lower(std::string_view(t).substr(w, i + 1 - w));
      auto listed = [&](const std::vector<std::string>& list) {
        return std::find(list.begin(), list.end(), token) != list.end();
      };
      if (listed(titles_)) {
        i = j;
        continue;
      }
      if (listed(abbreviations_)) {
        std::size_t k = j;
        while (k < t.size() && t[k] != '\n' && text::is_space(t[k])) ++k;
        const bool upper_next =
            k < t.size() && std::isupper(static_cast<unsigned char>(t[k])) != 0;
        if (!upper_next) {
          i = j;
          continue;
        }
      }
    }
    emit(note, start, j, out);
    start = i = j;
  }
  emit(note, start, t.size(), out);
  return out;
}

std::vector<Sentence> segment(const Note& note) {
  static const RuleSegmenter segmenter;
  return segmenter.segment(note);
}

// ---------------------------------------------------------------------------
// Labeling

bool contains_span(std::string_view sentence_text, std::string_view gold_text, double threshold) {
  const std::string s = text::normalize(sentence_text);
  const std::string g = text::normalize(gold_text);
  if (g.empty()) return false;
  if (s.find(g) != std::string::npos) return true;
  return evalkit::partial_similarity(s, g) >= threshold;
}

LabeledSplit label_sentences(const std::vector<Sentence>& sentences,
                             const std::vector<GoldAnnotation>& golds, std::string_view entity,
                             double threshold) {
  LabeledSplit split;
  for (const auto& s : sentences) {
    LabeledSentence labeled{s, {}};
    for (const auto& g : golds) {
      if (g.entity != entity || g.note_id != s.note_id) continue;
      if (contains_span(s.text, g.text, threshold)) labeled.golds.push_back(g.text);
    }
    (labeled.positive() ? split.positives : split.negatives).push_back(std::move(labeled));
  }
  return split;
}

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences) {
  std::vector<jsonl::json> records;
  for (const auto& s : sentences) {
    records.push_back({{"note_id", s.note_id},
                       {"index", s.index},
                       {"start", s.range.start},
                       {"end", s.range.end},
                       {"text", s.text}});
  }
  jsonl::write(path, records);
}

std::vector<Sentence> read_sentences(const std::filesystem::path& path) {
  std::vector<Sentence> out;
  jsonl::for_each(path, [&](std::size_t, const jsonl::json& r) {
    out.push_back({jsonl::string_field(r, "note_id"), r.at("index").get<std::size_t>(),
                   jsonl::string_field(r, "text"),
                   {r.at("start").get<std::size_t>(), r.at("end").get<std::size_t>()}});
  });
  return out;
}

}  // namespace promptner::corpus
