#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace promptner::corpus {

struct Note {
  std::string note_id;
  std::string text;
};

/// Half-open byte range into the owning note's text.
struct CharRange {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const CharRange&) const = default;
};

struct Sentence {
  std::string note_id;
  std::size_t index = 0;
  std::string text;
  CharRange range;
  bool operator==(const Sentence&) const = default;
};

/// (note_id, index) identity used for disjointness checks and manifests.
using SentenceKey = std::pair<std::string, std::size_t>;
inline SentenceKey key_of(const Sentence& s) { return {s.note_id, s.index}; }

struct EntityType {
  std::string name;
  std::string description;
  bool operator==(const EntityType&) const = default;
};

/// Ordered set of entity types with unique names.
class EntityRegistry {
 public:
  /// The 19 dental entity categories with their bundled descriptions.
  static EntityRegistry builtin();

  /// Throws std::invalid_argument on a duplicate or empty name.
  void add(EntityType entity);
  const EntityType* find(std::string_view name) const;
  const EntityType& at(std::string_view name) const;
  const std::vector<EntityType>& all() const { return entities_; }
  std::size_t size() const { return entities_.size(); }

 private:
  std::vector<EntityType> entities_;
};

struct GoldAnnotation {
  std::string note_id;
  std::string entity;
  std::string text;
  bool operator==(const GoldAnnotation&) const = default;
};

struct Corpus {
  std::vector<Note> notes;
  std::vector<GoldAnnotation> annotations;
};

/// Reads the line-delimited notes and annotations files. Duplicate
/// (note_id, entity, text) triples collapse to the first occurrence. Throws
/// DataError naming the file and line for malformed records, duplicate note
/// ids, unknown note ids, unregistered entities, or blank annotation text.
Corpus load_corpus(const std::filesystem::path& notes_path,
                   const std::filesystem::path& annotations_path,
                   const EntityRegistry& registry = EntityRegistry::builtin());

void write_notes(const std::filesystem::path& path, const std::vector<Note>& notes);
void write_annotations(const std::filesystem::path& path,
                       const std::vector<GoldAnnotation>& annotations);

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual std::vector<Sentence> segment(const Note& note) const = 0;
};

/// Splits on newlines and on runs of . ! ? that are followed by whitespace or
/// end of text. A period closing a known abbreviation only ends a sentence
/// when the next word starts with an uppercase letter; title abbreviations
/// ("Dr.", "Mr.", ...) never do. Ranges are trimmed of surrounding whitespace.
class RuleSegmenter final : public Segmenter {
 public:
  RuleSegmenter();
  std::vector<Sentence> segment(const Note& note) const override;

 private:
  std::vector<std::string> abbreviations_;
  std::vector<std::string> titles_;
};

std::vector<Sentence> segment(const Note& note);

/// A sentence plus the gold spans of one entity type that it contains.
struct LabeledSentence {
  Sentence sentence;
  std::vector<std::string> golds;
  bool positive() const { return !golds.empty(); }
};

struct LabeledSplit {
  std::vector<LabeledSentence> positives;
  std::vector<LabeledSentence> negatives;
};

/// A gold span is contained in a sentence when its normalized text is a
/// substring of the normalized sentence, or failing that when their soft
/// similarity reaches `threshold`.
bool contains_span(std::string_view sentence_text, std::string_view gold_text,
                   double threshold = 80.0);

/// Partitions `sentences` by whether any gold annotation of `entity` for the
/// same note is contained in the sentence. Input order is preserved.
LabeledSplit label_sentences(const std::vector<Sentence>& sentences,
                             const std::vector<GoldAnnotation>& golds, std::string_view entity,
                             double threshold = 80.0);

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences);
std::vector<Sentence> read_sentences(const std::filesystem::path& path);

}  // namespace promptner::corpus
