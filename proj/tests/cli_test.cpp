#include "promptner/digest.hpp"
#include "promptner/evalkit.hpp"
#include "promptner/posttrain.hpp"
#include "promptner/scheduler.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"

#include <doctest.h>

#include <regex>

using namespace promptner;
using jsonl::json;
namespace fs = std::filesystem;

namespace {

// Hand tally of the mini evaluation set against the scripted backend.
struct Expected {
  const char* entity;
  std::size_t tp, fp, fn;
};
constexpr Expected kTally[] = {
    {"Age", 9, 3, 1},
    {"Brushing frequency", 2, 0, 2},
    {"Medication Taken", 6, 2, 1},
    {"Stage", 1, 0, 0},
    {"Systemic Condition", 6, 1, 2},
};

// The sentences the SFT rules answer wrongly, one pattern per entity.
const std::map<std::string, std::string> kScriptedErrors = {
    {"Age", "43 y/o"},
    {"Medication Taken", "albuterol"},
    {"Systemic Condition", "osteoporosis"},
    {"Brushing frequency", "Recall visit"},
};

const fs::path& golden_workdir() {
  static testutil::TempDir dir("golden");
  static const bool ran = [] {
    const auto results = pipeline::run_all(dir.path());
    for (const auto& [cmd, r] : results) {
      if (r.code != 0) FAIL(cmd << " exited " << r.code << ": " << r.err);
    }
    return results.size() == pipeline::commands().size();
  }();
  REQUIRE(ran);
  return dir.path();
}

std::vector<json> jsonl_records(const fs::path& p) {
  std::vector<json> out;
  jsonl::for_each(p, [&](std::size_t, const json& r) { out.push_back(r); });
  return out;
}

fs::path write_rules(const fs::path& dir, const std::string& content) {
  const auto p = dir / "rules.jsonl";
  jsonl::write_file(p, content);
  return p;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  testutil::TempDir dir("usage");
  CHECK(pipeline::run("frobnicate", {}).code == cli::kUsageError);
  CHECK(pipeline::run("ingest", {"--no-such-flag"}).code == cli::kUsageError);
  CHECK(pipeline::run("--help", {}).code == cli::kOk);

  auto args = pipeline::mini_args(dir.path());
  args.insert(args.end(), {"--backend", "cloud"});
  const auto bad_backend = pipeline::run("ingest", args);
  CHECK(bad_backend.code == cli::kUsageError);
  CHECK(bad_backend.err.find("backend must be mock or remote") != std::string::npos);

  args = pipeline::mini_args(dir.path());
  args.insert(args.end(), {"--train_ratio", "0.9"});
  CHECK(pipeline::run("ingest", args).code == cli::kUsageError);

  args = pipeline::mini_args(dir.path());
  REQUIRE(pipeline::run("ingest", args).code == 0);
  REQUIRE(pipeline::run("segment", args).code == 0);
  REQUIRE(pipeline::run("build-datasets", args).code == 0);
  auto https = args;
  https.insert(https.end(), {"--backend", "remote", "--endpoint", "https://example.org/v1"});
  const auto tls = pipeline::run("gen-prompts", https);
  CHECK(tls.code == cli::kUsageError);
  CHECK(tls.err.find("only http://") != std::string::npos);

  args.insert(args.end(), {"--entities", "Age, Shoe size"});
  const auto unknown = pipeline::run("build-datasets", args);
  CHECK(unknown.code == cli::kUsageError);
  CHECK(unknown.err.find("Shoe size") != std::string::npos);
}

TEST_CASE("missing artifacts exit 2 with a remediation") {
  testutil::TempDir dir("missing");
  const auto args = pipeline::mini_args(dir.path());
  const auto early = pipeline::run("segment", args);
  CHECK(early.code == cli::kDataError);
  CHECK(early.err.find("run `promptner ingest` first") != std::string::npos);

  for (const char* c : {"ingest", "segment", "build-datasets"}) REQUIRE(pipeline::run(c, args).code == 0);
  const auto infer = pipeline::run("infer", args);
  CHECK(infer.code == cli::kDataError);
  CHECK(infer.err.find("prompts/ensembles/") != std::string::npos);
  CHECK(infer.err.find("run `promptner select-prompts` first") != std::string::npos);

  auto missing_input = pipeline::mini_args(dir.path());
  missing_input.insert(missing_input.end(), {"--notes", (dir.path() / "nope.jsonl").string()});
  const auto ingest = pipeline::run("ingest", missing_input);
  CHECK(ingest.code == cli::kDataError);
  CHECK(ingest.err.find("input file not found") != std::string::npos);
}

TEST_CASE("an exhausted backend exits 3") {
  testutil::TempDir dir("exhausted");
  const auto broken = write_rules(dir.path(), "{\"user\":\".\",\"error\":\"status\"}\n");

  SUBCASE("no candidate survives prompt generation") {
    auto args = pipeline::mini_args(dir.path() / "w");
    args.insert(args.end(), {"--mock_rules", broken.string(), "--entities", "Stage"});
    for (const char* c : {"ingest", "segment", "build-datasets"}) REQUIRE(pipeline::run(c, args).code == 0);
    const auto gen = pipeline::run("gen-prompts", args);
    CHECK(gen.code == cli::kBackendExhausted);
    CHECK(gen.err.find("no candidate prompt for Stage") != std::string::npos);
    CHECK(fs::exists(dir.path() / "w" / "logs" / "gen-prompts.log"));
  }

  SUBCASE("inference gets no answers") {
    const auto work = dir.path() / "w";
    const auto results = pipeline::run_all(work);
    REQUIRE(results.at("select-prompts").code == 0);
    auto args = pipeline::mini_args(work);
    args.insert(args.end(), {"--mock_rules", broken.string()});
    const auto infer = pipeline::run("infer", args);
    CHECK(infer.code == cli::kBackendExhausted);
    CHECK(infer.err.find("answered none of the inference queries") != std::string::npos);

    // an unreachable remote endpoint fails the same way
    args = pipeline::mini_args(work);
    args.insert(args.end(), {"--backend", "remote", "--endpoint", "http://127.0.0.1:1/v1", "--timeout_ms", "300"});
    CHECK(pipeline::run("infer", args).code == cli::kBackendExhausted);
  }
}

TEST_CASE("golden run reproduces the frozen outputs") {
  const auto& work = golden_workdir();
  const auto golden = testutil::mini_dir() / "golden";
  CHECK(pipeline::read(work / "evaluation/metrics.json") == pipeline::read(golden / "metrics.json"));
  CHECK(pipeline::read(work / "evaluation/metrics.txt") == pipeline::read(golden / "metrics.txt"));
  CHECK(pipeline::read(work / "inference/predictions.jsonl") == pipeline::read(golden / "predictions.jsonl"));
  CHECK(pipeline::read(work / "posttrain/dpo_pairs.jsonl") == pipeline::read(golden / "dpo_pairs.jsonl"));
}

TEST_CASE("golden metrics match the hand tally") {
  const auto report = evalkit::parse_report_json(pipeline::read(golden_workdir() / "evaluation/metrics.json"));
  std::vector<oracle::Counts> rows;
  for (const auto& e : kTally) {
    INFO(e.entity);
    const auto& c = report.counts.at(e.entity);
    CHECK(c.tp == e.tp);
    CHECK(c.fp == e.fp);
    CHECK(c.fn == e.fn);
    rows.push_back({e.tp, e.fp, e.fn});
  }
  CHECK(report.counts.size() == std::size(kTally));
  const auto [micro, macro] = oracle::micro_macro(rows);
  CHECK(report.micro.f1 == micro.f);
  CHECK(report.macro.precision == macro.p);
  CHECK(report.macro.recall == macro.r);
  CHECK(report.macro.f1 == macro.f);
  CHECK(report.micro.f1 == doctest::Approx(0.8));
}

TEST_CASE("command output") {
  testutil::TempDir dir("output");
  const auto results = pipeline::run_all(dir.path());
  REQUIRE(results.size() == pipeline::commands().size());
  CHECK(results.at("ingest").out == "ingested 20 training notes, 10 evaluation notes\n");
  CHECK(results.at("segment").out == "segmented 123 sentences\n");
  CHECK(results.at("select-prompts").out.find("Age: selected #1 #2 #3\n") != std::string::npos);
  CHECK(results.at("infer").out.find(", 615 queries, 0 failed\n") != std::string::npos);
  CHECK(results.at("export-sft").out == "SFT export: 264 training and 27 validation records\n");
  CHECK(results.at("gate-dpo").out.rfind("DPO gate open", 0) == 0);

  const auto golden_table = pipeline::read(testutil::mini_dir() / "golden/metrics.txt");
  CHECK(results.at("evaluate").out == golden_table);
  CHECK(results.at("report").out == golden_table);
  CHECK(pipeline::read(dir.path() / "evaluation/report.txt") == golden_table);

  const auto usage = results.at("token-usage").out;
  CHECK(usage.rfind("stage ", 0) == 0);
  const std::regex row(R"(^(\S.*?)\s+(\d+)\s+(\d+)\s+(\d+)\s+(\d+)$)");
  std::istringstream lines(usage);
  std::string line, last;
  std::getline(lines, line);
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    std::smatch m;
    REQUIRE(std::regex_match(line, m, row));
    CHECK(std::stoull(m[2]) + std::stoull(m[3]) == std::stoull(m[4]));
    last = m[1];
    ++rows;
  }
  CHECK(last == "total");
  CHECK(rows > 5);
  const auto ledger = scheduler::TokenLedger::from_json(pipeline::read(dir.path() / "ledger.json"));
  CHECK(ledger.stages().count("inference/screening") == 1);
  CHECK(ledger.stages().count("sft-train") == 1);
  CHECK(ledger.stages().count("revision") == 1);
}

TEST_CASE("runs are byte-identical") {
  testutil::TempDir dir("repeat");
  REQUIRE(pipeline::run_all(dir.path()).size() == pipeline::commands().size());
  const auto first = pipeline::snapshot(dir.path());
  CHECK(first == pipeline::snapshot(golden_workdir()));

  // rerunning in place rewrites every file with the same bytes
  REQUIRE(pipeline::run_all(dir.path()).size() == pipeline::commands().size());
  CHECK(pipeline::snapshot(dir.path()) == first);
}

TEST_CASE("manifests chain inputs to producer outputs") {
  const auto& work = golden_workdir();
  std::map<std::string, std::string> produced;  // path -> sha256
  for (const auto& c : pipeline::commands()) {
    INFO(c);
    const auto manifest = json::parse(pipeline::read(work / "manifests" / (c + ".json")));
    CHECK(manifest.at("command") == c);
    CHECK(manifest.at("config_sha256").get<std::string>().size() == 64);
    for (const auto& in : manifest.at("inputs")) {
      const auto path = in.at("path").get<std::string>();
      if (fs::path(path).is_absolute()) continue;  // an external input file
      REQUIRE_MESSAGE(produced.count(path), path);
      CHECK(produced.at(path) == in.at("sha256"));
    }
    for (const auto& out : manifest.at("outputs")) {
      const auto path = out.at("path").get<std::string>();
      produced[path] = out.at("sha256");
      CHECK(digest::file_sha256(work / path) == out.at("sha256").get<std::string>());
    }
  }
  const auto a = json::parse(pipeline::read(work / "manifests/infer.json"));
  const auto b = json::parse(pipeline::read(work / "manifests/evaluate.json"));
  CHECK(a.at("config_sha256") == b.at("config_sha256"));
}

TEST_CASE("post-training exports of the golden run") {
  const auto& work = golden_workdir();
  const auto stats = json::parse(pipeline::read(work / "posttrain/sft_stats.json"));
  std::size_t train_total = 0, val_total = 0;
  for (const auto& e : stats.at("entities")) {
    INFO(e.at("entity").get<std::string>());
    CHECK(e.at("train_neg").get<std::size_t>() == 3 * e.at("train_pos").get<std::size_t>());
    CHECK(e.at("train_pos").get<std::size_t>() + e.at("val_pos").get<std::size_t>() ==
          e.at("corpus_pos").get<std::size_t>());
    train_total += e.at("train_pos").get<std::size_t>() + e.at("train_neg").get<std::size_t>();
    val_total += e.at("val_pos").get<std::size_t>() + e.at("val_neg").get<std::size_t>();
  }
  const auto train = posttrain::read_sft(work / "posttrain/sft_train.jsonl");
  const auto val = posttrain::read_sft(work / "posttrain/sft_val.jsonl");
  CHECK(train.size() == train_total);
  CHECK(val.size() == val_total);
  for (const auto& ex : train) {
    REQUIRE(ex.messages.size() == 3);
    CHECK(ex.positive == !ex.golds.empty());
  }

  const auto pairs = posttrain::read_dpo(work / "posttrain/dpo_pairs.jsonl");
  const auto index = jsonl_records(work / "posttrain/dpo_index.jsonl");
  REQUIRE(pairs.size() == 4);
  REQUIRE(index.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto entity = index[i].at("entity").get<std::string>();
    INFO(entity);
    REQUIRE(kScriptedErrors.count(entity));
    CHECK(pairs[i].prompt.at(1).content.find(kScriptedErrors.at(entity)) != std::string::npos);
    CHECK(pairs[i].chosen != pairs[i].rejected);
  }

  const auto gate = json::parse(pipeline::read(work / "posttrain/gate.json"));
  CHECK(gate.at("eligible") == true);
  CHECK(gate.at("min_f1") == 0.6);
}

TEST_CASE("gate-dpo reads an explicit report") {
  testutil::TempDir dir("gate");
  evalkit::MetricsReport boundary;
  boundary.counts["Age"] = {"Age", 3, 2, 2};
  boundary.per_entity["Age"] = {0.6, 0.6, 0.6};
  boundary.micro = boundary.macro = {0.6, 0.6, 0.6};
  const auto path = dir.path() / "report.json";
  jsonl::write_file(path, evalkit::render_report_json(boundary));

  auto args = pipeline::mini_args(dir.path() / "w");
  args.insert(args.end(), {"--report", path.string()});
  const auto closed = pipeline::run("gate-dpo", args);
  REQUIRE(closed.code == 0);
  CHECK(closed.out.rfind("DPO gate closed", 0) == 0);
  CHECK(json::parse(pipeline::read(dir.path() / "w/posttrain/gate.json")).at("eligible") == false);

  args.insert(args.end(), {"--dpo_min_f1", "0.59"});
  CHECK(pipeline::run("gate-dpo", args).out.rfind("DPO gate open", 0) == 0);
}
