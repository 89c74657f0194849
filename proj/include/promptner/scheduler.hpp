#pragma once

#include "promptner/backend.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace promptner::scheduler {

struct RetryPolicy {
  double input_ratio = 0.8;
  double reduction_factor = 0.5;
  double min_ratio = 0.05;

  /// Throws std::invalid_argument unless 0 < min <= input <= 1 and
  /// 0 < reduction < 1.
  void validate() const;
};

struct WorkItem {
  std::size_t id = 0;
  std::size_t token_estimate = 0;
};

struct Batch {
  std::vector<std::size_t> ids;
  std::size_t token_estimate = 0;
  // A single item that alone exceeds the budget.
  bool oversize = false;
};

struct BatchPlan {
  std::size_t budget = 0;
  std::vector<Batch> batches;
};

/// floor(context_window * ratio).
std::size_t token_budget(std::size_t context_window, double ratio);

/// Greedy first-fit in input order: a batch is closed as soon as the next
/// item would push it past the budget. Items larger than the budget become
/// flagged singleton batches.
BatchPlan plan_batches(std::span<const WorkItem> items, std::size_t context_window, double ratio);

struct LedgerCounts {
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
  std::size_t responses = 0;

  std::size_t total() const { return prompt_tokens + completion_tokens; }
  bool operator==(const LedgerCounts&) const = default;
};

/// Global token accounting, per stage and overall. Thread-safe; counters
/// only ever grow.
class TokenLedger {
 public:
  TokenLedger() = default;
  TokenLedger(const TokenLedger& other) : stages_(other.stages()) {}
  TokenLedger& operator=(const TokenLedger& other) {
    if (this != &other) {
      auto copy = other.stages();
      std::lock_guard lock(mu_);
      stages_ = std::move(copy);
    }
    return *this;
  }

  void record(std::string_view stage, const backend::GenerationResponse& response);
  void merge(const TokenLedger& other);

  LedgerCounts totals() const;
  std::map<std::string, LedgerCounts> stages() const;

  std::string to_json() const;
  static TokenLedger from_json(std::string_view json_text);

 private:
  mutable std::mutex mu_;
  std::map<std::string, LedgerCounts> stages_;
};

/// Sends one request through the backend and records its usage.
backend::GenerationResponse complete_metered(backend::GenerationBackend& backend,
                                             const backend::GenerationRequest& request,
                                             TokenLedger* ledger, std::string_view stage);

struct DispatchRecord {
  std::vector<std::size_t> ids;
  std::size_t token_estimate = 0;
  std::size_t budget = 0;
  double ratio = 0.0;
  bool oversize = false;
  bool succeeded = false;
  std::string error;
};

struct ExecutionResult {
  std::map<std::size_t, backend::GenerationResponse> responses;
  std::map<std::size_t, std::string> failures;
  std::vector<DispatchRecord> dispatches;
};

using RequestFactory = std::function<backend::GenerationRequest(std::size_t id)>;

/// Plans at policy.input_ratio and dispatches batch by batch. A batch that
/// fails with capacity-exceeded is re-planned at ratio * reduction_factor
/// (never below min_ratio) and retried; once the floor is reached, or on any
/// other error, each item of the failed batch is dispatched alone once more
/// and residual failures are reported per item. Every item ends up in
/// exactly one of `responses` or `failures`; the ledger sees every success.
ExecutionResult execute_with_retry(std::span<const WorkItem> items, const RetryPolicy& policy,
                                   std::size_t context_window, backend::GenerationBackend& backend,
                                   const RequestFactory& make_request, TokenLedger* ledger = nullptr,
                                   std::string_view stage = "inference");

/// Convenience front end over a fixed backend, policy and ledger: item ids are
/// positions in the request list and estimates come from the backend's
/// token counter.
class Scheduler {
 public:
  Scheduler(backend::GenerationBackend& backend, RetryPolicy policy, TokenLedger* ledger = nullptr);

  ExecutionResult run(std::string_view stage, const std::vector<backend::GenerationRequest>& requests);

  backend::GenerationBackend& backend() { return backend_; }
  TokenLedger* ledger() { return ledger_; }
  const RetryPolicy& policy() const { return policy_; }

 private:
  backend::GenerationBackend& backend_;
  RetryPolicy policy_;
  TokenLedger* ledger_;
};

}  // namespace promptner::scheduler
