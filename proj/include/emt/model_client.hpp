#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <semaphore>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "emt/prompts.hpp"

namespace emt {

class ClientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Connection failures or timeouts that survived every retry.
class TransportError : public ClientError {
 public:
  using ClientError::ClientError;
};

class HttpStatusError : public ClientError {
 public:
  HttpStatusError(int status, std::string body)
      : ClientError("HTTP " + std::to_string(status) + ": " + body),
        status_(status),
        body_(std::move(body)) {}
  int status() const { return status_; }
  const std::string& body() const { return body_; }

 private:
  int status_;
  std::string body_;
};

class MalformedResponse : public ClientError {
 public:
  using ClientError::ClientError;
};

/// A judge call failed; carries the prompt so it can be re-judged later.
class JudgeCallError : public ClientError {
 public:
  JudgeCallError(std::string prompt, const std::string& cause)
      : ClientError("judge call failed: " + cause), prompt_(std::move(prompt)) {}
  const std::string& prompt() const { return prompt_; }

 private:
  std::string prompt_;
};

struct EndpointConfig {
  std::string base_url;
  std::string model;
  /// Name of the environment variable holding the bearer token; empty for none.
  std::string auth_token_env;
  double timeout_s = 60.0;
  int max_retries = 3;
  int parallelism = 4;
  int backoff_base_ms = 500;
  int backoff_max_ms = 30000;

  void validate() const;
};

nlohmann::json to_json(const EndpointConfig& cfg);
EndpointConfig endpoint_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SamplingParams& p);
SamplingParams sampling_from_json(const nlohmann::json& j);

struct ImageAttachment {
  std::string bytes;
  std::string media_type = "image/png";
};

struct ChatRequest {
  std::string prompt;
  std::optional<ImageAttachment> image;
  SamplingParams params;
  std::optional<std::string> system_message;
};

struct Usage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
  int total_tokens = 0;
};

struct ModelResponse {
  std::string text;
  double latency_ms = 0.0;
  std::optional<Usage> usage;
  bool from_cache = false;
  int retry_count = 0;
  /// UTC time the response was first received (preserved through the cache).
  std::string fetched_at;
};

/// Request body for POST {base}/v1/chat/completions.
nlohmann::json chat_request_body(const std::string& model, const ChatRequest& req);

/// Content-addressed digest of (model, prompt, image, sampling params, system message).
std::string chat_cache_key(const std::string& model, const ChatRequest& req);
std::string embedding_cache_key(const std::string& model, std::string_view text);

/// One JSON file per key; writes go through a temp file and rename.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);
  std::optional<nlohmann::json> get(const std::string& key) const;
  void put(const std::string& key, const nlohmann::json& value) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path path_for(const std::string& key) const;
  std::filesystem::path dir_;
};

/// Chat and embedding client. Safe to share across threads; at most
/// `parallelism` requests are in flight at once.
class ModelClient {
 public:
  explicit ModelClient(EndpointConfig cfg,
                       std::optional<std::filesystem::path> cache_dir = std::nullopt);

  ModelResponse complete(const ChatRequest& req);
  /// Judge queries never carry an image. Failures become JudgeCallError.
  ModelResponse judge_complete(const std::string& judge_prompt, const SamplingParams& params = {},
                               const std::optional<std::string>& system_message = std::nullopt);
  /// Vector exactly as returned by the endpoint.
  std::vector<double> fetch_embedding(std::string_view text);

  const EndpointConfig& config() const { return cfg_; }
  /// HTTP attempts issued (cache hits excluded).
  int network_requests() const { return network_requests_.load(); }

 private:
  struct Reply {
    nlohmann::json body;
    int retries = 0;
    double latency_ms = 0.0;
  };
  Reply post_with_retries(const std::string& route, const nlohmann::json& body);

  EndpointConfig cfg_;
  std::string host_;
  std::string path_prefix_;
  std::optional<std::string> bearer_;
  std::optional<ResponseCache> cache_;
  std::unique_ptr<std::counting_semaphore<>> slots_;
  std::atomic<int> network_requests_{0};
};

/// Retryable: 429 and every 5xx.
bool is_retryable_status(int status);

/// Current UTC time, ISO-8601 with milliseconds.
std::string utc_timestamp();

}  // namespace emt
