#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/regex.hpp>
#include <memory>

namespace promptner::backend {

enum class Role { System, User, Assistant };

std::string_view role_name(Role role);
Role parse_role(std::string_view name);

struct ChatMessage {
  Role role = Role::User;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct GenerationRequest {
  std::vector<ChatMessage> messages;
  std::size_t max_new_tokens = 512;
  // Always true inside the pipeline: greedy, single-sample decoding.
  bool deterministic = true;
  // Overrides the backend's configured model when non-empty.
  std::string model;
};

struct GenerationResponse {
  std::string text;
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
  bool operator==(const GenerationResponse&) const = default;
};

enum class ErrorKind {
  Transport,         // no usable HTTP exchange
  Status,            // non-success status, or a mock with no matching rule
  CapacityExceeded,  // server ran out of memory or context; retry smaller
  Precondition,      // request rejected locally, nothing was sent
};

std::string_view error_kind_name(ErrorKind kind);

class BackendError : public std::runtime_error {
 public:
  BackendError(ErrorKind kind, const std::string& what, int status = 0)
      : std::runtime_error(what), kind_(kind), status_(status) {}
  ErrorKind kind() const noexcept { return kind_; }
  int status() const noexcept { return status_; }

 private:
  ErrorKind kind_;
  int status_;
};

using TokenCounter = std::function<std::size_t(std::string_view)>;

/// ceil(bytes / 4).
std::size_t count_tokens(std::string_view text);

/// Sum of message token counts plus the completion allowance.
std::size_t estimate_request_tokens(const GenerationRequest& request,
                                    const TokenCounter& counter = count_tokens);

struct BackendConfig {
  std::string endpoint_url = "http://127.0.0.1:8000/v1";
  std::string model_name = "local-model";
  std::size_t context_window = 8192;
  std::chrono::milliseconds request_timeout{120'000};
  std::size_t max_concurrent_requests = 4;
  std::string api_key;
  // A failed response is capacity-exceeded when its status is listed here
  // (empty list: any status) and its body contains one of the patterns,
  // compared case-insensitively.
  std::vector<int> capacity_statuses{400, 413, 500, 503, 507};
  std::vector<std::string> capacity_patterns{"out of memory", "context length", "maximum context",
                                             "too many tokens", "kv cache"};
};

/// Uniform generation interface. complete() enforces the context-window
/// precondition before the implementation sees the request.
class GenerationBackend {
 public:
  explicit GenerationBackend(std::size_t context_window,
                             TokenCounter counter = &promptner::backend::count_tokens);
  virtual ~GenerationBackend() = default;
  GenerationBackend(const GenerationBackend&) = delete;
  GenerationBackend& operator=(const GenerationBackend&) = delete;

  GenerationResponse complete(const GenerationRequest& request);

  /// Dispatches a group of requests as one unit. Either every request gets a
  /// response (in input order) or the whole group fails with one error;
  /// capacity-exceeded anywhere in the group fails the group as capacity.
  std::vector<GenerationResponse> complete_batch(std::span<const GenerationRequest> requests);

  std::size_t context_window() const noexcept { return context_window_; }
  std::size_t count_tokens(std::string_view text) const { return counter_(text); }
  const TokenCounter& token_counter() const noexcept { return counter_; }

 protected:
  virtual GenerationResponse do_complete(const GenerationRequest& request) = 0;
  virtual std::vector<GenerationResponse> do_complete_batch(
      std::span<const GenerationRequest> requests);

 private:
  void check_fits(const GenerationRequest& request) const;

  std::size_t context_window_;
  TokenCounter counter_;
};

// ---------------------------------------------------------------------------
// Scripted mock

struct MockRule {
  std::optional<std::string> system;  // regex searched in the first system message
  std::optional<std::string> user;    // regex searched in the last user message
  std::optional<std::string> model;   // regex searched in the request model name
  std::string response;
  // Expand $1.. from the user match into the response.
  bool format = false;
  std::optional<ErrorKind> error;
};

/// Capacity failures injected at group dispatch, independent of content.
struct BatchFault {
  enum class Kind { None, OverSize, FirstN, Always };
  Kind kind = Kind::None;
  std::size_t limit = 0;  // OverSize: fail groups larger than this
  std::size_t count = 0;  // FirstN: fail the first `count` dispatches
};

struct TranscriptEntry {
  std::vector<ChatMessage> messages;
  std::string model;
  std::string response;
};

/// Deterministic backend driven by a rule table; the first matching rule
/// wins. Rule-table file: one JSON record per line, either a rule
/// {"system"?, "user"?, "model"?, "response", "format"?, "error"?} or a fault
/// {"fault": "batch_over"|"first_n"|"always", "limit"?, "count"?}.
class MockBackend final : public GenerationBackend {
 public:
  MockBackend(std::vector<MockRule> rules, std::size_t context_window = 8192,
              std::string model_name = "mock");

  static std::unique_ptr<MockBackend> from_file(const std::filesystem::path& path,
                                                std::size_t context_window = 8192,
                                                std::string model_name = "mock");

  void set_fault(BatchFault fault);
  BatchFault fault() const;

  std::vector<TranscriptEntry> transcript() const;
  std::size_t dispatch_count() const;
  std::vector<std::size_t> dispatch_sizes() const;

 protected:
  GenerationResponse do_complete(const GenerationRequest& request) override;
  std::vector<GenerationResponse> do_complete_batch(
      std::span<const GenerationRequest> requests) override;

 private:
  struct CompiledRule {
    std::optional<boost::regex> system, user, model;
  };

  std::vector<MockRule> rules_;
  std::vector<CompiledRule> compiled_;
  std::string model_name_;
  mutable std::mutex mu_;
  BatchFault fault_;
  std::vector<TranscriptEntry> transcript_;
  std::vector<std::size_t> dispatch_sizes_;
};

// ---------------------------------------------------------------------------
// Remote chat-completions endpoint

/// Client for an OpenAI-compatible chat-completions server. Deterministic
/// requests are sent as temperature 0, n 1. At most max_concurrent_requests
/// are in flight across all callers.
class RemoteBackend final : public GenerationBackend {
 public:
  explicit RemoteBackend(BackendConfig config);

  const BackendConfig& config() const noexcept { return config_; }

  /// Serialized request body; exposed for wire-format tests.
  std::string request_body(const GenerationRequest& request) const;

  /// Maps a failed HTTP exchange to an error class.
  ErrorKind classify_failure(int status, std::string_view body) const;

 protected:
  GenerationResponse do_complete(const GenerationRequest& request) override;
  std::vector<GenerationResponse> do_complete_batch(
      std::span<const GenerationRequest> requests) override;

 private:
  void acquire();
  void release();

  BackendConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  std::mutex slots_mu_;
  std::condition_variable slots_cv_;
  std::size_t in_flight_ = 0;
};

}  // namespace promptner::backend
