#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <atomic>
#include <semaphore>
#include <stdexcept>
#include <string>

namespace crsim {

struct LmRequest {
  std::string prompt;
  double temperature = 0.7;
  int max_tokens = 128;
};

struct LmResponse {
  std::string text;
  std::string finish_reason;
};

/// Base for failures talking to a language model endpoint.
class LmTransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LmTimeoutError : public LmTransportError {
 public:
  using LmTransportError::LmTransportError;
};

class LmHttpError : public LmTransportError {
 public:
  LmHttpError(int status, const std::string& what) : LmTransportError(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

class LmProtocolError : public LmTransportError {
 public:
  using LmTransportError::LmTransportError;
};

/// Text generation backend. Implementations must be safe for concurrent use.
class LmClient {
 public:
  virtual ~LmClient() = default;
  virtual LmResponse generate(const LmRequest& request) = 0;
};

/// Answers from a fixed prompt -> text map; unknown prompts get `fallback`
/// or raise LmTransportError when no fallback is set.
class CannedLm : public LmClient {
 public:
  explicit CannedLm(std::map<std::string, std::string> canned, std::optional<std::string> fallback = {});
  LmResponse generate(const LmRequest& request) override;

 private:
  std::map<std::string, std::string> canned_;
  std::optional<std::string> fallback_;
};

/// Wraps an arbitrary function; serializes calls so scripted mocks can keep
/// state.
class FunctionLm : public LmClient {
 public:
  using Fn = std::function<LmResponse(const LmRequest&)>;
  explicit FunctionLm(Fn fn) : fn_(std::move(fn)) {}
  LmResponse generate(const LmRequest& request) override;

 private:
  Fn fn_;
  std::mutex mutex_;
};

struct HttpLmConfig {
  /// Full endpoint, e.g. http://localhost:8080/v1/generate
  std::string url;
  /// Environment variable holding the bearer token.
  std::string token_env = "LM_API_TOKEN";
  std::chrono::milliseconds timeout{30000};
  std::size_t max_retries = 4;
  std::chrono::milliseconds initial_backoff{500};
  double backoff_multiplier = 2.0;
  std::size_t max_in_flight = 8;
};

/// POSTs {"prompt","temperature","max_tokens"} as JSON and reads {"text"}.
/// Retries 429 and 5xx with exponential backoff; at most max_in_flight
/// requests are outstanding at once.
class HttpLm : public LmClient {
 public:
  /// Throws ConfigError when the URL is malformed or the token is unset.
  explicit HttpLm(HttpLmConfig config);
  ~HttpLm() override;

  LmResponse generate(const LmRequest& request) override;

  std::size_t attempts() const { return attempts_.load(); }

 private:
  HttpLmConfig config_;
  std::string token_;
  std::string scheme_host_port_;
  std::string path_;
  std::unique_ptr<std::counting_semaphore<>> in_flight_;
  std::atomic<std::size_t> attempts_{0};
};

}  // namespace crsim
