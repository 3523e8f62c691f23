#include "emt/model_client.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "emt/digest.hpp"

namespace emt {

using json = nlohmann::json;

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void add_params(FieldHasher& h, const SamplingParams& p) {
  h.add(format_double(p.temperature))
      .add(std::to_string(p.max_tokens))
      .add(format_double(p.top_p))
      .add(format_double(p.frequency_penalty))
      .add(format_double(p.presence_penalty));
}

std::chrono::milliseconds backoff_delay(const EndpointConfig& cfg, int attempt) {
  thread_local std::mt19937_64 jitter{std::random_device{}()};
  const double capped = std::min<double>(cfg.backoff_max_ms,
                                         cfg.backoff_base_ms * std::pow(2.0, attempt));
  std::uniform_real_distribution<double> frac(0.5, 1.0);
  return std::chrono::milliseconds(static_cast<long>(capped * frac(jitter)));
}

std::string http_error_name(httplib::Error e) { return httplib::to_string(e); }

}  // namespace

void EndpointConfig::validate() const {
  static const std::regex url_re(R"(^https?://[^/\s]+(/.*)?$)");
  if (!std::regex_match(base_url, url_re))
    throw std::invalid_argument("endpoint base_url must look like http(s)://host[:port][/prefix], got \"" +
                                base_url + "\"");
  if (model.empty()) throw std::invalid_argument("endpoint model name is empty");
  if (!(timeout_s > 0.0)) throw std::invalid_argument("endpoint timeout must be positive");
  if (max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
  if (parallelism < 1) throw std::invalid_argument("parallelism must be >= 1");
}

json to_json(const EndpointConfig& c) {
  return json{{"base_url", c.base_url},          {"model", c.model},
              {"auth_token_env", c.auth_token_env}, {"timeout_s", c.timeout_s},
              {"max_retries", c.max_retries},    {"parallelism", c.parallelism},
              {"backoff_base_ms", c.backoff_base_ms}, {"backoff_max_ms", c.backoff_max_ms}};
}

EndpointConfig endpoint_from_json(const json& j) {
  EndpointConfig c;
  c.base_url = j.at("base_url").get<std::string>();
  c.model = j.at("model").get<std::string>();
  c.auth_token_env = j.value("auth_token_env", c.auth_token_env);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.parallelism = j.value("parallelism", c.parallelism);
  c.backoff_base_ms = j.value("backoff_base_ms", c.backoff_base_ms);
  c.backoff_max_ms = j.value("backoff_max_ms", c.backoff_max_ms);
  c.validate();
  return c;
}

json to_json(const SamplingParams& p) {
  return json{{"temperature", p.temperature},
              {"max_tokens", p.max_tokens},
              {"top_p", p.top_p},
              {"frequency_penalty", p.frequency_penalty},
              {"presence_penalty", p.presence_penalty}};
}

SamplingParams sampling_from_json(const json& j) {
  SamplingParams p;
  p.temperature = j.value("temperature", p.temperature);
  p.max_tokens = j.value("max_tokens", p.max_tokens);
  p.top_p = j.value("top_p", p.top_p);
  p.frequency_penalty = j.value("frequency_penalty", p.frequency_penalty);
  p.presence_penalty = j.value("presence_penalty", p.presence_penalty);
  return p;
}

json chat_request_body(const std::string& model, const ChatRequest& req) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", req.prompt}});
  if (req.image) {
    content.push_back({{"type", "image_url"},
                       {"image_url",
                        {{"url", "data:" + req.image->media_type + ";base64," +
                                     base64_encode(req.image->bytes)}}}});
  }
  json messages = json::array();
  if (req.system_message) messages.push_back({{"role", "system"}, {"content", *req.system_message}});
  messages.push_back({{"role", "user"}, {"content", std::move(content)}});
  json body = to_json(req.params);
  body["model"] = model;
  body["messages"] = std::move(messages);
  return body;
}

std::string chat_cache_key(const std::string& model, const ChatRequest& req) {
  FieldHasher h;
  h.add("chat/v1").add(model).add(req.prompt);
  h.add(req.image ? req.image->media_type : "").add(req.image ? req.image->bytes : "");
  add_params(h, req.params);
  h.add(req.system_message ? "1" : "0").add(req.system_message.value_or(""));
  return h.hex();
}

std::string embedding_cache_key(const std::string& model, std::string_view text) {
  FieldHasher h;
  h.add("embedding/v1").add(model).add(text);
  return h.hex();
}

bool is_retryable_status(int status) { return status == 429 || (status >= 500 && status <= 599); }

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()) % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[80];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                static_cast<int>(ms.count()));
  return buf;
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::filesystem::path ResponseCache::path_for(const std::string& key) const {
  return dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<json> ResponseCache::get(const std::string& key) const {
  std::ifstream in(path_for(key), std::ios::binary);
  if (!in) return std::nullopt;
  try {
    return json::parse(in);
  } catch (const json::parse_error&) {
    return std::nullopt;  // torn or foreign file; refetch
  }
}

void ResponseCache::put(const std::string& key, const json& value) const {
  const auto target = path_for(key);
  std::filesystem::create_directories(target.parent_path());
  std::ostringstream tag;
  tag << ".tmp." << std::this_thread::get_id() << '.'
      << std::chrono::steady_clock::now().time_since_epoch().count();
  const auto tmp = target.string() + tag.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write cache file " + tmp);
    out << value.dump();
    if (!out.flush()) throw std::runtime_error("short write on cache file " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

ModelClient::ModelClient(EndpointConfig cfg, std::optional<std::filesystem::path> cache_dir)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  static const std::regex split_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  std::regex_match(cfg_.base_url, m, split_re);
  host_ = m[1].str();
  path_prefix_ = m[2].matched ? m[2].str() : "";
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();

  if (!cfg_.auth_token_env.empty()) {
    const char* token = std::getenv(cfg_.auth_token_env.c_str());
    if (!token || !*token)
      throw std::invalid_argument("environment variable " + cfg_.auth_token_env +
                                  " (auth_token_env) is not set");
    bearer_ = token;
  }
  if (cache_dir) cache_.emplace(*cache_dir);
  slots_ = std::make_unique<std::counting_semaphore<>>(cfg_.parallelism);
}

ModelClient::Reply ModelClient::post_with_retries(const std::string& route, const json& body) {
  const auto payload = body.dump();
  const auto path = path_prefix_ + route;
  const auto timeout = std::chrono::duration<double>(cfg_.timeout_s);
  const auto timeout_us = std::chrono::duration_cast<std::chrono::microseconds>(timeout);

  std::string last_error;
  int last_status = 0;
  std::string last_body;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(backoff_delay(cfg_, attempt - 1));

    httplib::Client cli(host_);
    cli.set_connection_timeout(timeout_us);
    cli.set_read_timeout(timeout_us);
    cli.set_write_timeout(timeout_us);
    httplib::Headers headers;
    if (bearer_) headers.emplace("Authorization", "Bearer " + *bearer_);

    slots_->acquire();
    const auto t0 = std::chrono::steady_clock::now();
    ++network_requests_;
    auto res = cli.Post(path, headers, payload, "application/json");
    const auto t1 = std::chrono::steady_clock::now();
    slots_->release();

    if (!res) {
      last_error = http_error_name(res.error());
      last_status = 0;
      continue;
    }
    if (res->status >= 200 && res->status < 300) {
      Reply r;
      r.retries = attempt;
      r.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      try {
        r.body = json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw MalformedResponse(std::string("response body is not JSON: ") + e.what());
      }
      return r;
    }
    if (!is_retryable_status(res->status)) throw HttpStatusError(res->status, res->body);
    last_status = res->status;
    last_body = res->body;
  }
  if (last_status != 0) throw HttpStatusError(last_status, last_body);
  throw TransportError(host_ + path + ": " + last_error + " after " +
                       std::to_string(cfg_.max_retries + 1) + " attempt(s)");
}

ModelResponse ModelClient::complete(const ChatRequest& req) {
  const auto key = chat_cache_key(cfg_.model, req);
  if (cache_) {
    if (auto hit = cache_->get(key); hit && hit->contains("text")) {
      ModelResponse r;
      r.text = hit->at("text").get<std::string>();
      r.latency_ms = hit->value("latency_ms", 0.0);
      r.fetched_at = hit->value("fetched_at", "");
      if (hit->contains("usage")) {
        const auto& u = hit->at("usage");
        r.usage = Usage{u.value("prompt_tokens", 0), u.value("completion_tokens", 0),
                        u.value("total_tokens", 0)};
      }
      r.from_cache = true;
      return r;
    }
  }

  const auto reply = post_with_retries("/v1/chat/completions", chat_request_body(cfg_.model, req));
  const auto& body = reply.body;
  if (!body.contains("choices") || !body["choices"].is_array() || body["choices"].empty())
    throw MalformedResponse("chat response has no choices");
  const auto& msg = body["choices"][0].value("message", json::object());
  if (!msg.contains("content")) throw MalformedResponse("chat response choice has no message content");

  ModelResponse r;
  r.text = msg["content"].is_string() ? msg["content"].get<std::string>() : std::string();
  r.latency_ms = reply.latency_ms;
  r.retry_count = reply.retries;
  r.fetched_at = utc_timestamp();
  json entry{{"text", r.text}, {"latency_ms", r.latency_ms}, {"fetched_at", r.fetched_at}};
  if (body.contains("usage") && body["usage"].is_object()) {
    const auto& u = body["usage"];
    r.usage = Usage{u.value("prompt_tokens", 0), u.value("completion_tokens", 0),
                    u.value("total_tokens", 0)};
    entry["usage"] = u;
  }
  if (cache_) cache_->put(key, entry);
  return r;
}

ModelResponse ModelClient::judge_complete(const std::string& judge_prompt,
                                          const SamplingParams& params,
                                          const std::optional<std::string>& system_message) {
  try {
    return complete(ChatRequest{judge_prompt, std::nullopt, params, system_message});
  } catch (const ClientError& e) {
    throw JudgeCallError(judge_prompt, e.what());
  }
}

std::vector<double> ModelClient::fetch_embedding(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("embedding input text is empty");
  const auto key = embedding_cache_key(cfg_.model, text);
  if (cache_) {
    if (auto hit = cache_->get(key); hit && hit->contains("embedding"))
      return hit->at("embedding").get<std::vector<double>>();
  }
  const auto reply =
      post_with_retries("/v1/embeddings", json{{"model", cfg_.model}, {"input", std::string(text)}});
  const auto& body = reply.body;
  if (!body.contains("data") || !body["data"].is_array() || body["data"].empty() ||
      !body["data"][0].contains("embedding"))
    throw MalformedResponse("embedding response has no data[0].embedding");
  auto vec = body["data"][0]["embedding"].get<std::vector<double>>();
  if (cache_) cache_->put(key, json{{"embedding", vec}});
  return vec;
}

}  // namespace emt
