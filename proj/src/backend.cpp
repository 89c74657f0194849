#include "promptner/backend.hpp"

#include "promptner/errors.hpp"
#include "promptner/jsonl.hpp"
#include "promptner/text.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>

namespace promptner::backend {

using json = nlohmann::ordered_json;

std::string_view role_name(Role role) {
  switch (role) {
    case Role::System:
      return "system";
    case Role::User:
      return "user";
    case Role::Assistant:
      return "assistant";
  }
  return "user";
}

Role parse_role(std::string_view name) {
  if (name == "system") return Role::System;
  if (name == "user") return Role::User;
  if (name == "assistant") return Role::Assistant;
  throw DataError("unknown chat role \"" + std::string(name) + "\"");
}

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Transport:
      return "transport";
    case ErrorKind::Status:
      return "status";
    case ErrorKind::CapacityExceeded:
      return "capacity";
    case ErrorKind::Precondition:
      return "precondition";
  }
  return "status";
}

namespace {

ErrorKind parse_error_kind(std::string_view name) {
  for (auto k : {ErrorKind::Transport, ErrorKind::Status, ErrorKind::CapacityExceeded,
                 ErrorKind::Precondition}) {
    if (error_kind_name(k) == name) return k;
  }
  throw DataError("unknown error kind \"" + std::string(name) + "\"");
}

const std::string* first_of(const std::vector<ChatMessage>& messages, Role role, bool last) {
  const std::string* found = nullptr;
  for (const auto& m : messages) {
    if (m.role != role) continue;
    found = &m.content;
    if (!last) break;
  }
  return found;
}

std::size_t prompt_tokens_of(const GenerationRequest& request, const TokenCounter& counter) {
  std::size_t total = 0;
  for (const auto& m : request.messages) total += counter(m.content);
  return total;
}

}  // namespace

std::size_t count_tokens(std::string_view text) { return (text.size() + 3) / 4; }

std::size_t estimate_request_tokens(const GenerationRequest& request, const TokenCounter& counter) {
  return prompt_tokens_of(request, counter) + request.max_new_tokens;
}

// ---------------------------------------------------------------------------

GenerationBackend::GenerationBackend(std::size_t context_window, TokenCounter counter)
    : context_window_(context_window), counter_(std::move(counter)) {
  if (context_window_ == 0) throw std::invalid_argument("context_window must be positive");
}

void GenerationBackend::check_fits(const GenerationRequest& request) const {
  for (const auto& m : request.messages) {
    if (m.role != Role::Assistant && m.content.empty()) {
      throw BackendError(ErrorKind::Precondition, "empty system/user message");
    }
  }
  const std::size_t estimate = estimate_request_tokens(request, counter_);
  if (estimate >= context_window_) {
    throw BackendError(ErrorKind::Precondition,
                       "request needs ~" + std::to_string(estimate) +
                           " tokens, context window is " + std::to_string(context_window_));
  }
}

GenerationResponse GenerationBackend::complete(const GenerationRequest& request) {
  check_fits(request);
  return do_complete(request);
}

std::vector<GenerationResponse> GenerationBackend::complete_batch(
    std::span<const GenerationRequest> requests) {
  for (const auto& r : requests) check_fits(r);
  return do_complete_batch(requests);
}

std::vector<GenerationResponse> GenerationBackend::do_complete_batch(
    std::span<const GenerationRequest> requests) {
  std::vector<GenerationResponse> out;
  out.reserve(requests.size());
  for (const auto& r : requests) out.push_back(do_complete(r));
  return out;
}

// ---------------------------------------------------------------------------
// MockBackend

MockBackend::MockBackend(std::vector<MockRule> rules, std::size_t context_window,
                         std::string model_name)
    : GenerationBackend(context_window), rules_(std::move(rules)), model_name_(std::move(model_name)) {
  auto compile = [](const std::optional<std::string>& pattern) -> std::optional<boost::regex> {
    if (!pattern) return std::nullopt;
    try {
      return boost::regex(*pattern, boost::regex::perl);
    } catch (const boost::regex_error& e) {
      throw DataError("bad mock pattern \"" + *pattern + "\": " + e.what());
    }
  };
  for (const auto& r : rules_) compiled_.push_back({compile(r.system), compile(r.user), compile(r.model)});
}

std::unique_ptr<MockBackend> MockBackend::from_file(const std::filesystem::path& path,
                                                    std::size_t context_window,
                                                    std::string model_name) {
  std::vector<MockRule> rules;
  BatchFault fault;
  jsonl::for_each(path, [&](std::size_t, const jsonl::json& r) {
    if (r.contains("fault")) {
      const auto kind = r.at("fault").get<std::string>();
      if (kind == "batch_over") {
        fault = {BatchFault::Kind::OverSize, r.at("limit").get<std::size_t>(), 0};
      } else if (kind == "first_n") {
        fault = {BatchFault::Kind::FirstN, 0, r.at("count").get<std::size_t>()};
      } else if (kind == "always") {
        fault = {BatchFault::Kind::Always, 0, 0};
      } else {
        throw DataError("unknown fault \"" + kind + "\"");
      }
      return;
    }
    MockRule rule;
    auto opt = [&](const char* key) -> std::optional<std::string> {
      if (!r.contains(key)) return std::nullopt;
      return r.at(key).get<std::string>();
    };
    rule.system = opt("system");
    rule.user = opt("user");
    rule.model = opt("model");
    rule.response = r.value("response", std::string());
    rule.format = r.value("format", false);
    if (auto e = opt("error")) rule.error = parse_error_kind(*e);
    if (!rule.error && !r.contains("response")) throw DataError("rule needs \"response\" or \"error\"");
    rules.push_back(std::move(rule));
  });
  auto mock = std::make_unique<MockBackend>(std::move(rules), context_window, std::move(model_name));
  mock->set_fault(fault);
  return mock;
}

void MockBackend::set_fault(BatchFault fault) {
  std::lock_guard lock(mu_);
  fault_ = fault;
}

BatchFault MockBackend::fault() const {
  std::lock_guard lock(mu_);
  return fault_;
}

std::vector<TranscriptEntry> MockBackend::transcript() const {
  std::lock_guard lock(mu_);
  return transcript_;
}

std::size_t MockBackend::dispatch_count() const {
  std::lock_guard lock(mu_);
  return dispatch_sizes_.size();
}

std::vector<std::size_t> MockBackend::dispatch_sizes() const {
  std::lock_guard lock(mu_);
  return dispatch_sizes_;
}

GenerationResponse MockBackend::do_complete(const GenerationRequest& request) {
  static const std::string kEmpty;
  const std::string* system = first_of(request.messages, Role::System, false);
  const std::string* user = first_of(request.messages, Role::User, true);
  const std::string& model = request.model.empty() ? model_name_ : request.model;

  for (std::size_t i = 0; i < rules_.size(); ++i) {
    const auto& rule = rules_[i];
    const auto& compiled = compiled_[i];
    if (compiled.system && !boost::regex_search(system ? *system : kEmpty, *compiled.system)) continue;
    if (compiled.model && !boost::regex_search(model, *compiled.model)) continue;
    boost::smatch user_match;
    const std::string& user_text = user ? *user : kEmpty;
    if (compiled.user && !boost::regex_search(user_text, user_match, *compiled.user)) continue;

    if (rule.error) {
      throw BackendError(*rule.error, "mock rule " + std::to_string(i) + " scripted failure");
    }
    GenerationResponse response;
    response.text = rule.format && compiled.user
                        ? user_match.format(rule.response, boost::format_perl)
                        : rule.response;
    response.prompt_tokens = prompt_tokens_of(request, token_counter());
    response.completion_tokens = count_tokens(response.text);
    std::lock_guard lock(mu_);
    transcript_.push_back({request.messages, model, response.text});
    return response;
  }
  throw BackendError(ErrorKind::Status, "mock: no rule matches request", 404);
}

std::vector<GenerationResponse> MockBackend::do_complete_batch(
    std::span<const GenerationRequest> requests) {
  {
    std::lock_guard lock(mu_);
    const std::size_t ordinal = dispatch_sizes_.size();
    dispatch_sizes_.push_back(requests.size());
    bool fail = false;
    switch (fault_.kind) {
      case BatchFault::Kind::None:
        break;
      case BatchFault::Kind::OverSize:
        fail = requests.size() > fault_.limit;
        break;
      case BatchFault::Kind::FirstN:
        fail = ordinal < fault_.count;
        break;
      case BatchFault::Kind::Always:
        fail = true;
        break;
    }
    if (fail) {
      throw BackendError(ErrorKind::CapacityExceeded,
                         "mock: out of memory for batch of " + std::to_string(requests.size()), 503);
    }
  }
  return GenerationBackend::do_complete_batch(requests);
}

// ---------------------------------------------------------------------------
// RemoteBackend

RemoteBackend::RemoteBackend(BackendConfig config)
    : GenerationBackend(config.context_window), config_(std::move(config)) {
  if (config_.max_concurrent_requests == 0) {
    throw std::invalid_argument("max_concurrent_requests must be at least 1");
  }
  const auto& url = config_.endpoint_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("endpoint_url needs a scheme: " + url);
  if (url.substr(0, scheme_end) != "http") {
    throw std::invalid_argument("only http:// endpoints are supported (put a TLS proxy in front): " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  path_ = prefix + "/chat/completions";
}

std::string RemoteBackend::request_body(const GenerationRequest& request) const {
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"role", role_name(m.role)}, {"content", m.content}});
  }
  json body{{"model", request.model.empty() ? config_.model_name : request.model},
            {"messages", messages},
            {"max_tokens", request.max_new_tokens},
            {"stream", false}};
  if (request.deterministic) {
    body["temperature"] = 0;
    body["n"] = 1;
  }
  return body.dump();
}

ErrorKind RemoteBackend::classify_failure(int status, std::string_view body) const {
  const bool status_listed =
      config_.capacity_statuses.empty() ||
      std::find(config_.capacity_statuses.begin(), config_.capacity_statuses.end(), status) !=
          config_.capacity_statuses.end();
  if (status_listed) {
    for (const auto& p : config_.capacity_patterns) {
      if (text::contains_ci(body, p)) return ErrorKind::CapacityExceeded;
    }
  }
  return ErrorKind::Status;
}

void RemoteBackend::acquire() {
  std::unique_lock lock(slots_mu_);
  slots_cv_.wait(lock, [&] { return in_flight_ < config_.max_concurrent_requests; });
  ++in_flight_;
}

void RemoteBackend::release() {
  {
    std::lock_guard lock(slots_mu_);
    --in_flight_;
  }
  slots_cv_.notify_one();
}

GenerationResponse RemoteBackend::do_complete(const GenerationRequest& request) {
  acquire();
  struct Release {
    RemoteBackend* self;
    ~Release() { self->release(); }
  } guard{this};

  httplib::Client client(scheme_host_port_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.request_timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.request_timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  auto result = client.Post(path_, headers, request_body(request), "application/json");
  if (!result) {
    throw BackendError(ErrorKind::Transport,
                       "request to " + scheme_host_port_ + path_ + " failed: " + httplib::to_string(result.error()));
  }
  if (result->status < 200 || result->status >= 300) {
    throw BackendError(classify_failure(result->status, result->body),
                       "HTTP " + std::to_string(result->status) + ": " + result->body.substr(0, 300),
                       result->status);
  }
  try {
    const json doc = json::parse(result->body);
    GenerationResponse response;
    const auto& content = doc.at("choices").at(0).at("message").at("content");
    response.text = content.is_null() ? std::string() : content.get<std::string>();
    if (doc.contains("usage") && doc["usage"].is_object()) {
      response.prompt_tokens = doc["usage"].value("prompt_tokens", std::size_t{0});
      response.completion_tokens = doc["usage"].value("completion_tokens", std::size_t{0});
    } else {
      response.prompt_tokens = prompt_tokens_of(request, token_counter());
      response.completion_tokens = count_tokens(response.text);
    }
    return response;
  } catch (const json::exception& e) {
    throw BackendError(ErrorKind::Status, std::string("malformed completion body: ") + e.what(),
                       result->status);
  }
}

std::vector<GenerationResponse> RemoteBackend::do_complete_batch(
    std::span<const GenerationRequest> requests) {
  std::vector<GenerationResponse> out(requests.size());
  std::vector<std::exception_ptr> errors(requests.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        out[i] = do_complete(requests[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(config_.max_concurrent_requests, requests.size());
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  std::exception_ptr first;
  for (const auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const BackendError& be) {
      if (be.kind() == ErrorKind::CapacityExceeded) throw;
    } catch (...) {
    }
    if (!first) first = e;
  }
  if (first) std::rethrow_exception(first);
  return out;
}

}  // namespace promptner::backend
