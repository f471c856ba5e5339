#include "crsim/lm_client.hpp"

#include "crsim/errors.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cstdlib>
#include <thread>

namespace crsim {

CannedLm::CannedLm(std::map<std::string, std::string> canned, std::optional<std::string> fallback)
    : canned_(std::move(canned)), fallback_(std::move(fallback)) {}

LmResponse CannedLm::generate(const LmRequest& request) {
  if (auto it = canned_.find(request.prompt); it != canned_.end()) return LmResponse{it->second, "stop"};
  if (fallback_) return LmResponse{*fallback_, "stop"};
  throw LmTransportError("no canned reply for prompt");
}

LmResponse FunctionLm::generate(const LmRequest& request) {
  std::lock_guard lock(mutex_);
  return fn_(request);
}

namespace {

struct SemaphoreGuard {
  explicit SemaphoreGuard(std::counting_semaphore<>& s) : sem(s) { sem.acquire(); }
  ~SemaphoreGuard() { sem.release(); }
  std::counting_semaphore<>& sem;
};

bool retryable_status(int status) { return status == 429 || status >= 500; }

}  // namespace

HttpLm::HttpLm(HttpLmConfig config) : config_(std::move(config)) {
  const std::string& url = config_.url;
  const auto scheme_end = url.find("://");
  if (url.empty() || scheme_end == std::string::npos) throw ConfigError("lm.url must look like http://host[:port]/path");
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  if (scheme_host_port_.size() <= scheme_end + 3) throw ConfigError("lm.url has no host");

  const char* token = std::getenv(config_.token_env.c_str());
  if (token == nullptr || *token == '\0')
    throw ConfigError("environment variable " + config_.token_env + " must hold the LM API token");
  token_ = token;
  if (config_.max_in_flight < 1) throw ConfigError("lm.max_in_flight must be >= 1");
  in_flight_ = std::make_unique<std::counting_semaphore<>>(static_cast<std::ptrdiff_t>(config_.max_in_flight));
}

HttpLm::~HttpLm() = default;

LmResponse HttpLm::generate(const LmRequest& request) {
  if (request.prompt.empty()) throw LmProtocolError("LM request prompt is empty");
  SemaphoreGuard guard(*in_flight_);

  const std::string body =
      nlohmann::json{{"prompt", request.prompt}, {"temperature", request.temperature}, {"max_tokens", request.max_tokens}}
          .dump();
  const httplib::Headers headers = {{"Authorization", "Bearer " + token_}};
  const auto timeout_s = config_.timeout.count() / 1000;
  const auto timeout_us = (config_.timeout.count() % 1000) * 1000;

  auto backoff = config_.initial_backoff;
  std::string last_error = "no attempt made";
  bool last_was_timeout = false;
  int last_status = 0;
  for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(backoff.count()) * config_.backoff_multiplier));
    }
    ++attempts_;
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(timeout_s, timeout_us);
    client.set_read_timeout(timeout_s, timeout_us);
    client.set_write_timeout(timeout_s, timeout_us);
    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) {
      const auto err = res.error();
      last_was_timeout = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read;
      last_error = "LM request failed: " + httplib::to_string(err);
      last_status = 0;
      continue;
    }
    last_was_timeout = false;
    if (retryable_status(res->status)) {
      last_status = res->status;
      last_error = "LM endpoint returned HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status < 200 || res->status >= 300)
      throw LmHttpError(res->status, "LM endpoint returned HTTP " + std::to_string(res->status));
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw LmProtocolError(std::string("malformed LM response: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("text") || !doc["text"].is_string())
      throw LmProtocolError("LM response has no string field 'text'");
    LmResponse out;
    out.text = doc["text"].get<std::string>();
    out.finish_reason = doc.value("finish_reason", std::string("stop"));
    return out;
  }
  if (last_was_timeout) throw LmTimeoutError(last_error);
  if (last_status != 0) throw LmHttpError(last_status, last_error + " after retries");
  throw LmTransportError(last_error);
}

}  // namespace crsim
