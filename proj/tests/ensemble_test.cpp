#include "promptner/ensemble.hpp"
#include "properties.hpp"

#include <doctest.h>

#include <random>

using namespace promptner;
using namespace promptner::ensemble;
using backend::MockRule;

namespace {

MockRule rule(std::optional<std::string> system, std::string user, std::string response, bool format = false) {
  return {std::move(system), std::move(user), std::nullopt, std::move(response), format, std::nullopt};
}

const corpus::EntityType kMed{"Medication Taken", "Drugs the patient takes."};

}  // namespace

TEST_CASE("boolean answers") {
  auto a = parse_boolean("The sentence names a drug.\nANSWER: YES");
  CHECK(a.parse_ok);
  CHECK(a.answer);
  CHECK(a.reasoning == "The sentence names a drug.");
  CHECK(parse_boolean("answer: no.").parse_ok);
  CHECK_FALSE(parse_boolean("answer: no.").answer);
  CHECK(parse_boolean("**ANSWER: Yes**").answer);
  // the last sentinel line decides
  CHECK_FALSE(parse_boolean("ANSWER: YES\nOn reflection...\nANSWER: NO").answer);
  CHECK_FALSE(parse_boolean("I think yes").parse_ok);
  CHECK_FALSE(parse_boolean("ANSWER: probably").parse_ok);
}

TEST_CASE("extraction answers") {
  auto a = parse_extraction("Reasoning here.\nANSWER: [\"metformin\", 'insulin']");
  CHECK(a.parse_ok);
  CHECK(a.answer == std::vector<std::string>{"metformin", "insulin"});
  CHECK(a.answer_line == "ANSWER: [\"metformin\", 'insulin']");

  auto none = parse_extraction("nothing relevant\nANSWER: NONE.");
  CHECK(none.parse_ok);
  CHECK(none.answer.empty());

  CHECK(parse_extraction("ANSWER: []").parse_ok);
  CHECK(parse_extraction("ANSWER: [\"a \\\"quoted\\\" b\"]").answer == std::vector<std::string>{"a \"quoted\" b"});
  CHECK(parse_extraction("ANSWER: [\"  \", \"x\"]").answer == std::vector<std::string>{"x"});
  CHECK_FALSE(parse_extraction("ANSWER: [\"unterminated]").parse_ok);
  CHECK_FALSE(parse_extraction("ANSWER: metformin").parse_ok);
  CHECK_FALSE(parse_extraction("ANSWER: [\"a\"] trailing").parse_ok);
  CHECK_FALSE(parse_extraction("no sentinel at all").parse_ok);
}

TEST_CASE("answer lines round trip") {
  CHECK(format_answer_line({}) == "ANSWER: NONE");
  CHECK(format_answer_line({"56 y/o"}) == "ANSWER: [\"56 y/o\"]");
  std::mt19937 rng(17);
  const std::string chars = "ab \"'\\,[]y/o.";
  for (int i = 0; i < 300; ++i) {
    std::vector<std::string> items;
    for (int n = rng() % 4; n > 0; --n) {
      std::string s = "x";
      for (int l = rng() % 6; l > 0; --l) s += chars[rng() % chars.size()];
      s += "z";
      items.push_back(s);
    }
    const auto parsed = parse_extraction(format_answer_line(items));
    REQUIRE(parsed.parse_ok);
    CHECK(parsed.answer == items);
  }
}

TEST_CASE("union dedup keeps first-seen forms") {
  CHECK(dedup_key("  Metformin. ") == "metformin");
  CHECK(dedup_key("\"Stage  III\"") == "stage iii");
  const auto merged = merge_extractions({{"Metformin", "insulin"}, {"metformin.", "Aspirin"}, {"INSULIN", "..."}});
  CHECK(merged == std::vector<std::string>{"Metformin", "insulin", "Aspirin"});
  CHECK(merge_extractions({}).empty());
}

TEST_CASE("strict majority") {
  CHECK_FALSE(strict_majority(1, 2));
  CHECK(strict_majority(2, 3));
  CHECK_FALSE(strict_majority(0, 1));
  CHECK(strict_majority(1, 1));
  CHECK_FALSE(strict_majority(2, 4));
}

TEST_CASE("screening advances exactly on strict majorities") {
  for (std::size_t k = 1; k <= 5; ++k) {
    INFO("ensemble size ", k);
    CHECK(props::check_majority_law(k) == "");
  }
}

TEST_CASE("requests carry the prompt, task and model") {
  InferenceOptions opts;
  opts.model = "m2";
  const auto s = screening_request(kMed, "PROMPT", "He takes aspirin.", opts);
  REQUIRE(s.messages.size() == 2);
  CHECK(s.messages[0].content == "PROMPT");
  CHECK(s.messages[1].content.rfind("TASK: SCREEN\nEntity: Medication Taken\n", 0) == 0);
  CHECK(s.messages[1].content.find("Sentence: He takes aspirin.") != std::string::npos);
  CHECK(s.model == "m2");
  CHECK(s.max_new_tokens == 256);
  const auto e = extraction_request(kMed, "PROMPT", "x", opts);
  CHECK(e.messages[1].content.rfind("TASK: EXTRACT\n", 0) == 0);
  CHECK(e.max_new_tokens == 512);
}

TEST_CASE("two-stage run over notes") {
  backend::MockBackend mock({
      rule(std::string("^P2$"), "TASK: SCREEN.*allergic", "allergy, not a medication\nANSWER: NO"),
      rule(std::nullopt, "TASK: SCREEN.*Sentence: .*(aspirin|amoxicillin)", "ANSWER: YES"),
      rule(std::nullopt, "TASK: SCREEN", "ANSWER: NO"),
      rule(std::string("^P1$"), "TASK: EXTRACT.*Sentence: .*?(aspirin|amoxicillin)", "ANSWER: [\"$1\"]", true),
      rule(std::string("^P2$"), "TASK: EXTRACT.*Sentence: .*?(aspirin|amoxicillin)", "ANSWER: [\"$1\", \"daily\"]",
           true),
      rule(std::nullopt, "TASK: EXTRACT", "ANSWER: NONE"),
  });
  scheduler::TokenLedger ledger;
  scheduler::Scheduler sched(mock, {}, &ledger);
  const PromptEnsemble ens{kMed.name, {{1, "P1"}, {2, "P2"}, {3, "P3"}}};
  const std::vector<corpus::Note> notes = {
      {"A", "She takes aspirin daily. She is allergic to amoxicillin."},
      {"B", "No medications."},
  };
  InferenceOptions opts;
  opts.stage_prefix = "t/";
  const auto run = run_entity(notes, kMed, ens, sched, corpus::RuleSegmenter(), opts);

  CHECK(run.screening_queries == 9);
  CHECK(run.failed_queries == 0);
  REQUIRE(run.screening.size() == 3);
  CHECK(run.screening[0].advanced);
  CHECK(run.screening[1].votes_positive == 2);
  CHECK(run.screening[1].advanced);  // 2 of 3
  CHECK(run.screening[1].votes[1] == Vote::No);
  CHECK_FALSE(run.screening[2].advanced);

  REQUIRE(run.extractions.size() == 2);
  CHECK(run.extraction_queries == 6);
  CHECK(run.extractions[0].texts == std::vector<std::string>{"aspirin", "daily"});
  CHECK(run.extractions[1].note_id == "A");
  CHECK(run.extractions[1].sentence_index == 1);
  CHECK(ledger.stages().at("t/screening").responses == 9);
  CHECK(ledger.stages().at("t/extraction").responses == 6);
}

TEST_CASE("unparsed and failed votes count as no") {
  backend::MockBackend mock({
      {std::string("^P1$"), std::string("TASK: SCREEN"), std::nullopt, "", false, backend::ErrorKind::Status},
      rule(std::string("^P2$"), "TASK: SCREEN", "I cannot tell."),
      rule(std::nullopt, "TASK: SCREEN", "ANSWER: YES"),
  });
  scheduler::Scheduler sched(mock, {});
  const PromptEnsemble ens{kMed.name, {{1, "P1"}, {2, "P2"}, {3, "P3"}}};
  std::vector<std::string> log;
  const auto res = screen({{"N", 0, "He takes aspirin.", {}}}, kMed, ens, sched, &log);
  REQUIRE(res.size() == 1);
  CHECK(res[0].votes == std::vector<Vote>{Vote::Failed, Vote::Unparsed, Vote::Yes});
  CHECK(res[0].votes_positive == 1);
  CHECK_FALSE(res[0].advanced);
  CHECK(log.size() == 2);
  CHECK(vote_name(Vote::Unparsed) == "unparsed");
}

TEST_CASE("extraction failures are counted") {
  backend::MockBackend mock({
      {std::string("^P1$"), std::string("TASK: EXTRACT"), std::nullopt, "", false, backend::ErrorKind::Status},
      rule(std::nullopt, "TASK: EXTRACT", "ANSWER: [\"aspirin\"]"),
  });
  scheduler::Scheduler sched(mock, {});
  const PromptEnsemble ens{kMed.name, {{1, "P1"}, {2, "P2"}}};
  std::size_t failed = 0;
  const auto out = extract({{"N", 0, "He takes aspirin.", {}}}, kMed, ens, sched, nullptr, {}, &failed);
  REQUIRE(out.size() == 1);
  CHECK(out[0].texts == std::vector<std::string>{"aspirin"});
  CHECK(failed == 1);
}
