#include "promptner/scheduler.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace promptner::scheduler {

using backend::BackendError;
using backend::ErrorKind;
using backend::GenerationRequest;
using backend::GenerationResponse;
using json = nlohmann::ordered_json;

void RetryPolicy::validate() const {
  if (!(min_ratio > 0.0 && min_ratio <= input_ratio && input_ratio <= 1.0)) {
    throw std::invalid_argument("retry policy needs 0 < min_ratio <= input_ratio <= 1");
  }
  if (!(reduction_factor > 0.0 && reduction_factor < 1.0)) {
    throw std::invalid_argument("retry policy needs 0 < reduction_factor < 1");
  }
}

std::size_t token_budget(std::size_t context_window, double ratio) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(context_window) * ratio));
}

BatchPlan plan_batches(std::span<const WorkItem> items, std::size_t context_window, double ratio) {
  BatchPlan plan;
  plan.budget = token_budget(context_window, ratio);
  Batch current;
  auto close = [&] {
    if (!current.ids.empty()) plan.batches.push_back(std::move(current));
    current = Batch{};
  };
  for (const auto& item : items) {
    if (item.token_estimate > plan.budget) {
      close();
      plan.batches.push_back({{item.id}, item.token_estimate, true});
      continue;
    }
    if (current.token_estimate + item.token_estimate > plan.budget) close();
    current.ids.push_back(item.id);
    current.token_estimate += item.token_estimate;
  }
  close();
  return plan;
}

// ---------------------------------------------------------------------------

void TokenLedger::record(std::string_view stage, const GenerationResponse& response) {
  std::lock_guard lock(mu_);
  auto& c = stages_[std::string(stage)];
  c.prompt_tokens += response.prompt_tokens;
  c.completion_tokens += response.completion_tokens;
  ++c.responses;
}

void TokenLedger::merge(const TokenLedger& other) {
  if (&other == this) return;
  const auto theirs = other.stages();
  std::lock_guard lock(mu_);
  for (const auto& [stage, c] : theirs) {
    auto& mine = stages_[stage];
    mine.prompt_tokens += c.prompt_tokens;
    mine.completion_tokens += c.completion_tokens;
    mine.responses += c.responses;
  }
}

LedgerCounts TokenLedger::totals() const {
  std::lock_guard lock(mu_);
  LedgerCounts total;
  for (const auto& [stage, c] : stages_) {
    total.prompt_tokens += c.prompt_tokens;
    total.completion_tokens += c.completion_tokens;
    total.responses += c.responses;
  }
  return total;
}

std::map<std::string, LedgerCounts> TokenLedger::stages() const {
  std::lock_guard lock(mu_);
  return stages_;
}

namespace {

json counts_json(const LedgerCounts& c) {
  return json{{"prompt_tokens", c.prompt_tokens},
              {"completion_tokens", c.completion_tokens},
              {"total_tokens", c.total()},
              {"responses", c.responses}};
}

}  // namespace

std::string TokenLedger::to_json() const {
  json stages = json::object();
  for (const auto& [stage, c] : this->stages()) stages[stage] = counts_json(c);
  json doc{{"stages", stages}, {"total", counts_json(totals())}};
  return doc.dump(2) + "\n";
}

TokenLedger TokenLedger::from_json(std::string_view json_text) {
  TokenLedger ledger;
  const json doc = json::parse(json_text);
  for (const auto& [stage, c] : doc.at("stages").items()) {
    ledger.stages_[stage] = {c.at("prompt_tokens").get<std::size_t>(),
                             c.at("completion_tokens").get<std::size_t>(),
                             c.at("responses").get<std::size_t>()};
  }
  return ledger;
}

GenerationResponse complete_metered(backend::GenerationBackend& backend,
                                    const GenerationRequest& request, TokenLedger* ledger,
                                    std::string_view stage) {
  GenerationResponse response = backend.complete(request);
  if (ledger) ledger->record(stage, response);
  return response;
}

// ---------------------------------------------------------------------------

namespace {

class RetryRun {
 public:
  RetryRun(const RetryPolicy& policy, std::size_t window, backend::GenerationBackend& backend,
           const RequestFactory& make_request, TokenLedger* ledger, std::string_view stage)
      : policy_(policy), window_(window), backend_(backend), make_request_(make_request),
        ledger_(ledger), stage_(stage) {}

  void process(const std::vector<WorkItem>& items, double ratio) {
    const BatchPlan plan = plan_batches(items, window_, ratio);
    for (const auto& batch : plan.batches) run_batch(batch, plan.budget, ratio);
  }

  ExecutionResult take() { return std::move(result_); }

  void add_estimate(const WorkItem& item) { estimates_[item.id] = item.token_estimate; }

 private:
  // Returns the error on failure, or nullopt when every item was answered.
  std::optional<BackendError> dispatch(const Batch& batch, std::size_t budget, double ratio) {
    std::vector<GenerationRequest> requests;
    requests.reserve(batch.ids.size());
    for (auto id : batch.ids) requests.push_back(make_request_(id));

    DispatchRecord record{batch.ids, batch.token_estimate, budget, ratio, batch.oversize, false, {}};
    try {
      auto responses = backend_.complete_batch(requests);
      for (std::size_t i = 0; i < batch.ids.size(); ++i) {
        if (ledger_) ledger_->record(stage_, responses[i]);
        result_.responses.emplace(batch.ids[i], std::move(responses[i]));
      }
      record.succeeded = true;
      result_.dispatches.push_back(std::move(record));
      return std::nullopt;
    } catch (const BackendError& e) {
      record.error = e.what();
      result_.dispatches.push_back(std::move(record));
      return e;
    }
  }

  void run_batch(const Batch& batch, std::size_t budget, double ratio) {
    auto error = dispatch(batch, budget, ratio);
    if (!error) return;

    if (error->kind() == ErrorKind::CapacityExceeded && ratio > policy_.min_ratio) {
      const double reduced = std::max(ratio * policy_.reduction_factor, policy_.min_ratio);
      std::vector<WorkItem> items;
      for (auto id : batch.ids) items.push_back({id, estimates_.at(id)});
      process(items, reduced);
      return;
    }
    if (batch.ids.size() == 1) {
      result_.failures.emplace(batch.ids.front(), error->what());
      return;
    }
    for (auto id : batch.ids) {
      const std::size_t estimate = estimates_.at(id);
      Batch single{{id}, estimate, estimate > budget};
      if (auto e = dispatch(single, budget, ratio)) result_.failures.emplace(id, e->what());
    }
  }

  const RetryPolicy& policy_;
  std::size_t window_;
  backend::GenerationBackend& backend_;
  const RequestFactory& make_request_;
  TokenLedger* ledger_;
  std::string stage_;
  std::map<std::size_t, std::size_t> estimates_;
  ExecutionResult result_;
};

}  // namespace

ExecutionResult execute_with_retry(std::span<const WorkItem> items, const RetryPolicy& policy,
                                   std::size_t context_window, backend::GenerationBackend& backend,
                                   const RequestFactory& make_request, TokenLedger* ledger,
                                   std::string_view stage) {
  policy.validate();
  RetryRun run(policy, context_window, backend, make_request, ledger, stage);
  std::vector<WorkItem> all(items.begin(), items.end());
  for (const auto& item : all) run.add_estimate(item);
  run.process(all, policy.input_ratio);
  return run.take();
}

Scheduler::Scheduler(backend::GenerationBackend& backend, RetryPolicy policy, TokenLedger* ledger)
    : backend_(backend), policy_(policy), ledger_(ledger) {
  policy_.validate();
}

ExecutionResult Scheduler::run(std::string_view stage, const std::vector<GenerationRequest>& requests) {
  std::vector<WorkItem> items;
  items.reserve(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    items.push_back({i, backend::estimate_request_tokens(requests[i], backend_.token_counter())});
  }
  return execute_with_retry(items, policy_, backend_.context_window(), backend_,
                            [&](std::size_t id) { return requests.at(id); }, ledger_, stage);
}

}  // namespace promptner::scheduler
