#include "promptner/scheduler.hpp"
#include "properties.hpp"

#include <doctest.h>

using namespace promptner;
using namespace promptner::scheduler;
using backend::BatchFault;

TEST_CASE("token budget floors") {
  CHECK(token_budget(8192, 0.8) == 6553);
  CHECK(token_budget(100, 0.05) == 5);
  CHECK(token_budget(10, 0.33) == 3);
}

TEST_CASE("retry policy validation") {
  CHECK_NOTHROW(RetryPolicy{}.validate());
  CHECK_THROWS_AS((RetryPolicy{0.8, 1.0, 0.05}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((RetryPolicy{0.8, 0.5, 0.9}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((RetryPolicy{1.5, 0.5, 0.05}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((RetryPolicy{0.8, 0.5, 0.0}.validate()), std::invalid_argument);
}

TEST_CASE("greedy first-fit planning") {
  const std::vector<WorkItem> items = {{0, 40}, {1, 50}, {2, 10}, {3, 120}, {4, 30}, {5, 70}};
  const auto plan = plan_batches(items, 200, 0.5);  // budget 100
  CHECK(plan.budget == 100);
  REQUIRE(plan.batches.size() == 3);
  CHECK(plan.batches[0].ids == std::vector<std::size_t>{0, 1, 2});
  CHECK(plan.batches[0].token_estimate == 100);
  CHECK(plan.batches[1].ids == std::vector<std::size_t>{3});
  CHECK(plan.batches[1].oversize);
  CHECK(plan.batches[2].ids == std::vector<std::size_t>{4, 5});  // exactly at the budget
  CHECK(plan_batches({}, 100, 0.5).batches.empty());
}

TEST_CASE("greedy first-fit does not look ahead") {
  // 60 + 50 overflows, so 50 opens a new batch even though 40 would fit.
  const std::vector<WorkItem> items = {{0, 60}, {1, 50}, {2, 40}};
  const auto plan = plan_batches(items, 100, 1.0);
  REQUIRE(plan.batches.size() == 2);
  CHECK(plan.batches[0].ids == std::vector<std::size_t>{0});
  CHECK(plan.batches[1].ids == std::vector<std::size_t>{1, 2});
}

TEST_CASE("exactly-once delivery under scripted capacity faults") {
  for (std::uint32_t seed = 0; seed < 15; ++seed) {
    CHECK(props::check_exactly_once({BatchFault::Kind::None, 0, 0}, 40, seed) == "");
    CHECK(props::check_exactly_once({BatchFault::Kind::OverSize, 2, 0}, 40, seed) == "");
    CHECK(props::check_exactly_once({BatchFault::Kind::FirstN, 0, seed % 5}, 40, seed) == "");
    CHECK(props::check_exactly_once({BatchFault::Kind::FirstN, 0, 5 + seed}, 40, seed) == "");
    CHECK(props::check_exactly_once({BatchFault::Kind::Always, 0, 0}, 25, seed) == "");
  }
}

TEST_CASE("capacity failures shrink the ratio down to the floor") {
  auto mock = props::echo_backend(1000);
  mock.set_fault({BatchFault::Kind::OverSize, 1, 0});
  std::vector<backend::GenerationRequest> requests;
  std::vector<WorkItem> items;
  for (std::size_t i = 0; i < 8; ++i) {
    requests.push_back({{{backend::Role::User, "item " + std::to_string(i)}}, 10, true, {}});
    items.push_back({i, 12});
  }
  TokenLedger ledger;
  const auto result = execute_with_retry(
      items, {0.8, 0.5, 0.05}, 1000, mock, [&](std::size_t id) { return requests[id]; }, &ledger, "x");
  CHECK(result.responses.size() == 8);
  CHECK(result.failures.empty());
  std::vector<double> ratios;
  for (const auto& d : result.dispatches) ratios.push_back(d.ratio);
  // 0.8 -> 0.4 -> 0.2 -> 0.1 -> 0.05 (budget 50: four items per batch) -> singles at the floor
  CHECK(ratios.front() == 0.8);
  CHECK(*std::min_element(ratios.begin(), ratios.end()) == 0.05);
  CHECK(ledger.stages().at("x").responses == 8);
}

TEST_CASE("non-capacity errors fall back to single dispatch") {
  backend::MockBackend mock({{std::nullopt, std::string("item 3$"), std::nullopt, "", false,
                              backend::ErrorKind::Status},
                             {std::nullopt, std::string("^item"), std::nullopt, "ok", false, std::nullopt}});
  std::vector<backend::GenerationRequest> requests;
  for (std::size_t i = 0; i < 6; ++i) {
    requests.push_back({{{backend::Role::User, "item " + std::to_string(i)}}, 10, true, {}});
  }
  Scheduler sched(mock, {});
  const auto result = sched.run("stage", requests);
  CHECK(result.responses.size() == 5);
  REQUIRE(result.failures.size() == 1);
  CHECK(result.failures.count(3) == 1);
  // one failed group, then six singles
  CHECK(mock.dispatch_sizes() == std::vector<std::size_t>{6, 1, 1, 1, 1, 1, 1});
}

TEST_CASE("precondition failures are terminal per item") {
  auto mock = props::echo_backend(64);
  std::vector<backend::GenerationRequest> requests = {
      {{{backend::Role::User, "item 0"}}, 8, true, {}},
      {{{backend::Role::User, "item 1" + std::string(400, ' ')}}, 8, true, {}},
  };
  Scheduler sched(mock, {});
  const auto result = sched.run("s", requests);
  CHECK(result.responses.count(0) == 1);
  CHECK(result.failures.count(1) == 1);
}

TEST_CASE("ledger accounting and json") {
  TokenLedger a;
  a.record("screening", {"x", 10, 2});
  a.record("screening", {"y", 5, 1});
  a.record("extraction", {"z", 7, 3});
  CHECK(a.totals() == LedgerCounts{22, 6, 3});
  CHECK(a.stages().at("screening") == LedgerCounts{15, 3, 2});

  TokenLedger b;
  b.record("screening", {"w", 1, 1});
  b.merge(a);
  b.merge(b);
  CHECK(b.totals() == LedgerCounts{23, 7, 4});

  const auto back = TokenLedger::from_json(a.to_json());
  CHECK(back.stages() == a.stages());
  CHECK(back.to_json() == a.to_json());
}

TEST_CASE("complete_metered records usage") {
  auto mock = props::echo_backend();
  TokenLedger ledger;
  const auto r = complete_metered(mock, {{{backend::Role::User, "item 7"}}, 4, true, {}}, &ledger, "gen");
  CHECK(r.text == "reply 7");
  CHECK(ledger.stages().at("gen").responses == 1);
  CHECK(ledger.totals().prompt_tokens == r.prompt_tokens);
}
