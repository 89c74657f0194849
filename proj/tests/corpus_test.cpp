#include "promptner/corpus.hpp"
#include "promptner/errors.hpp"
#include "promptner/jsonl.hpp"
#include "test_util.hpp"

#include <doctest.h>

using namespace promptner;
using namespace promptner::corpus;

namespace {

std::vector<std::string> texts(const std::string& note_text) {
  std::vector<std::string> out;
  for (const auto& s : segment(Note{"n", note_text})) out.push_back(s.text);
  return out;
}

}  // namespace

TEST_CASE("builtin registry") {
  const auto reg = EntityRegistry::builtin();
  CHECK(reg.size() == 19);
  CHECK(reg.all().front().name == "Age");
  CHECK(reg.find("Medication Taken") != nullptr);
  CHECK(reg.find("medication taken") == nullptr);
  CHECK_THROWS_AS(reg.at("Nope"), std::out_of_range);
  for (const auto& e : reg.all()) CHECK_FALSE(e.description.empty());

  EntityRegistry custom;
  custom.add({"X", "d"});
  CHECK_THROWS_AS(custom.add({"X", "e"}), std::invalid_argument);
  CHECK_THROWS_AS(custom.add({"", "e"}), std::invalid_argument);
}

TEST_CASE("segmenter splits on terminators and newlines") {
  CHECK(texts("He brushes twice a day. She flosses!  Really?") ==
        std::vector<std::string>{"He brushes twice a day.", "She flosses!", "Really?"});
  CHECK(texts("Line one\nLine two\n\n") == std::vector<std::string>{"Line one", "Line two"});
  CHECK(texts("Wait... what?! Ok") == std::vector<std::string>{"Wait...", "what?!", "Ok"});
  CHECK(texts("") .empty());
  CHECK(texts("   \n  ").empty());
}

TEST_CASE("segmenter keeps decimals, abbreviations and titles together") {
  CHECK(texts("HbA1c was 7.2 percent. Next") == std::vector<std::string>{"HbA1c was 7.2 percent.", "Next"});
  CHECK(texts("Seen by Dr. Smith today. Stable.") ==
        std::vector<std::string>{"Seen by Dr. Smith today.", "Stable."});
  CHECK(texts("Takes metformin 500 mg. twice daily.") ==
        std::vector<std::string>{"Takes metformin 500 mg. twice daily."});
  CHECK(texts("Takes metformin 500 mg. She is stable.") ==
        std::vector<std::string>{"Takes metformin 500 mg.", "She is stable."});
  CHECK(texts("Pain for 2 wks. and swelling, e.g. at night.") ==
        std::vector<std::string>{"Pain for 2 wks. and swelling, e.g. at night."});
  CHECK(texts("He said \"stop.\" Then left.") == std::vector<std::string>{"He said \"stop.\"", "Then left."});
}

TEST_CASE("segment offsets point into the note") {
  const Note note{"T1", "  Patient is 56 y/o.  Hx. of asthma.\nUses inhaler (albuterol). "};
  const auto sentences = segment(note);
  REQUIRE(sentences.size() == 3);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    CHECK(s.index == i);
    CHECK(s.note_id == "T1");
    CHECK(note.text.substr(s.range.start, s.range.end - s.range.start) == s.text);
  }
  CHECK(sentences[1].text == "Hx. of asthma.");
}

TEST_CASE("mini corpus segmentation is stable") {
  const auto corpus = load_corpus(testutil::mini_dir() / "train_notes.jsonl",
                                  testutil::mini_dir() / "train_annotations.jsonl");
  REQUIRE(corpus.notes.size() == 20);
  const auto first = segment(corpus.notes[0]);
  CHECK(first.size() == 6);
  CHECK(first[0].text == "Patient is a 56 y/o male presenting for periodontal evaluation.");
  CHECK(first[4].text == "Diagnosis is generalized Stage III periodontitis.");
  std::size_t total = 0;
  for (const auto& n : corpus.notes) total += segment(n).size();
  CHECK(total == 88);
}

TEST_CASE("contains_span and labeling") {
  CHECK(contains_span("He brushes Twice a day.", "twice  a day"));
  CHECK(contains_span("Takes metformin daily", "metformn"));
  CHECK_FALSE(contains_span("No medications.", "lisinopril"));
  CHECK_FALSE(contains_span("anything", "   "));

  const std::vector<Sentence> sentences = {
      {"N1", 0, "Patient is 56 y/o.", {}},
      {"N1", 1, "He takes aspirin.", {}},
      {"N2", 0, "She is 40 y/o.", {}},
  };
  const std::vector<GoldAnnotation> golds = {
      {"N1", "Age", "56 y/o"}, {"N1", "Medication Taken", "aspirin"}, {"N2", "Age", "41 y/o"}};
  const auto split = label_sentences(sentences, golds, "Age");
  REQUIRE(split.positives.size() == 2);
  CHECK(split.positives[0].golds == std::vector<std::string>{"56 y/o"});
  CHECK(split.positives[1].sentence.note_id == "N2");  // soft match, 40 vs 41
  REQUIRE(split.negatives.size() == 1);
  CHECK(split.negatives[0].sentence.index == 1);
}

TEST_CASE("corpus loading validates records") {
  testutil::TempDir dir("corpus");
  const auto notes = dir.path() / "notes.jsonl";
  const auto anns = dir.path() / "anns.jsonl";
  write_notes(notes, {{"A", "Patient is 30 y/o."}, {"B", "No history."}});

  SUBCASE("duplicates collapse") {
    write_annotations(anns, {{"A", "Age", "30 y/o"}, {"A", "Age", "30 y/o"}});
    CHECK(load_corpus(notes, anns).annotations.size() == 1);
  }
  SUBCASE("unknown note") {
    write_annotations(anns, {{"Z", "Age", "30 y/o"}});
    CHECK_THROWS_AS(load_corpus(notes, anns), DataError);
  }
  SUBCASE("unregistered entity") {
    write_annotations(anns, {{"A", "Shoe Size", "9"}});
    CHECK_THROWS_AS(load_corpus(notes, anns), DataError);
  }
  SUBCASE("blank text") {
    write_annotations(anns, {{"A", "Age", "  "}});
    CHECK_THROWS_AS(load_corpus(notes, anns), DataError);
  }
  SUBCASE("duplicate note id") {
    write_notes(notes, {{"A", "x"}, {"A", "y"}});
    write_annotations(anns, {});
    CHECK_THROWS_AS(load_corpus(notes, anns), DataError);
  }
  SUBCASE("missing field names the line") {
    jsonl::write_file(anns, "{\"note_id\":\"A\",\"entity\":\"Age\",\"text\":\"30 y/o\"}\n{\"note_id\":\"A\"}\n");
    try {
      load_corpus(notes, anns);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
  }
}

TEST_CASE("sentences round trip") {
  testutil::TempDir dir("sentences");
  const auto sentences = segment(Note{"N", "One. Two three.\nFour"});
  write_sentences(dir.path() / "s.jsonl", sentences);
  CHECK(read_sentences(dir.path() / "s.jsonl") == sentences);
}
