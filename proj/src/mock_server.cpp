#include "emt/mock_server.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "emt/digest.hpp"

namespace emt {

using json = nlohmann::json;

namespace {

std::optional<std::regex> compile(const std::optional<std::string>& pattern, std::size_t rule,
                                  const char* field) {
  if (!pattern) return std::nullopt;
  try {
    return std::regex(*pattern, std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw MockScriptError("rule " + std::to_string(rule) + ": bad " + field + ": " + e.what());
  }
}

int whitespace_tokens(const std::string& s) {
  std::istringstream in(s);
  std::string w;
  int n = 0;
  while (in >> w) ++n;
  return n;
}

// Text parts of the last user message, joined by newlines, plus the first image.
void read_chat(const json& body, std::string& prompt, std::optional<std::string>& image) {
  const auto& messages = body.at("messages");
  for (const auto& msg : messages) {
    if (msg.value("role", "") != "user") continue;
    prompt.clear();
    image.reset();
    const auto& content = msg.at("content");
    if (content.is_string()) {
      prompt = content.get<std::string>();
      continue;
    }
    for (const auto& part : content) {
      const auto type = part.value("type", "");
      if (type == "text") {
        if (!prompt.empty()) prompt += '\n';
        prompt += part.value("text", "");
      } else if (type == "image_url" && !image) {
        const auto url = part.at("image_url").at("url").get<std::string>();
        const auto comma = url.find(',');
        if (url.rfind("data:", 0) == 0 && comma != std::string::npos &&
            url.substr(0, comma).find(";base64") != std::string::npos) {
          image = base64_decode(std::string_view(url).substr(comma + 1));
        } else {
          image = url;
        }
      }
    }
  }
}

}  // namespace

MockScript MockScript::parse(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw MockScriptError(std::string("mock script is not valid JSON: ") + e.what());
  }
  if (!doc.is_array()) throw MockScriptError("mock script must be a JSON list of rules");
  MockScript script;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& r = doc[i];
    MockRule rule;
    try {
      if (r.contains("match")) {
        const auto& m = r.at("match");
        if (m.contains("prompt_regex")) rule.prompt_regex = m.at("prompt_regex").get<std::string>();
        if (m.contains("has_image")) rule.has_image = m.at("has_image").get<bool>();
        if (m.contains("image_regex")) rule.image_regex = m.at("image_regex").get<std::string>();
      }
      if (r.contains("reply")) rule.reply = r.at("reply").get<std::string>();
      if (r.contains("embedding")) rule.embedding = r.at("embedding").get<std::vector<double>>();
      if (r.contains("status_sequence"))
        rule.status_sequence = r.at("status_sequence").get<std::vector<int>>();
      rule.delay_ms = r.value("delay_ms", 0);
    } catch (const json::exception& e) {
      throw MockScriptError("rule " + std::to_string(i) + ": " + e.what());
    }
    if (!rule.reply && !rule.embedding)
      throw MockScriptError("rule " + std::to_string(i) + " has neither reply nor embedding");
    compile(rule.prompt_regex, i, "prompt_regex");
    compile(rule.image_regex, i, "image_regex");
    for (int s : rule.status_sequence)
      if (s < 100 || s > 599)
        throw MockScriptError("rule " + std::to_string(i) + ": invalid status " + std::to_string(s));
    script.rules.push_back(std::move(rule));
  }
  return script;
}

MockScript MockScript::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MockScriptError("cannot open mock script " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

MockServer::MockServer(MockScript script) {
  for (std::size_t i = 0; i < script.rules.size(); ++i) {
    auto& rule = script.rules[i];
    CompiledRule c;
    c.prompt_re = compile(rule.prompt_regex, i, "prompt_regex");
    c.image_re = compile(rule.image_regex, i, "image_regex");
    c.rule = std::move(rule);
    rules_.push_back(std::move(c));
  }

  server_ = std::make_unique<httplib::Server>();
  server_->new_task_queue = [] { return new httplib::ThreadPool(32); };

  auto track = [this](auto&& fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      const int now = ++in_flight_;
      int seen = max_in_flight_.load();
      while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
      }
      try {
        fn(req, res);
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
      }
      --in_flight_;
    };
  };

  server_->Get("/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"status":"ok"})", "application/json");
  });

  server_->Post("/v1/chat/completions", track([this](const httplib::Request& req,
                                                      httplib::Response& res) {
    ++chat_requests_;
    const auto body = json::parse(req.body);
    std::string prompt;
    std::optional<std::string> image;
    read_chat(body, prompt, image);
    const auto out = dispatch(prompt, image, false);
    if (out.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(out.delay_ms));
    if (!out.matched) {
      res.status = 404;
      res.set_content(R"({"error":{"message":"no mock rule matched"}})", "application/json");
      return;
    }
    if (out.status != 200) {
      res.status = out.status;
      res.set_content(json{{"error", {{"message", "scripted status " + std::to_string(out.status)}}}}.dump(),
                      "application/json");
      return;
    }
    const int pt = whitespace_tokens(prompt), ct = whitespace_tokens(out.text);
    json reply{{"id", "mock-" + std::to_string(requests_.load())},
               {"object", "chat.completion"},
               {"model", body.value("model", "")},
               {"choices", json::array({json{{"index", 0},
                                             {"message", {{"role", "assistant"}, {"content", out.text}}},
                                             {"finish_reason", "stop"}}})},
               {"usage", {{"prompt_tokens", pt}, {"completion_tokens", ct}, {"total_tokens", pt + ct}}}};
    res.set_content(reply.dump(), "application/json");
  }));

  server_->Post("/v1/embeddings", track([this](const httplib::Request& req, httplib::Response& res) {
    ++embedding_requests_;
    const auto body = json::parse(req.body);
    const auto input = body.at("input").get<std::string>();
    const auto out = dispatch(input, std::nullopt, true);
    if (out.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(out.delay_ms));
    if (!out.matched) {
      res.status = 404;
      res.set_content(R"({"error":{"message":"no mock rule matched"}})", "application/json");
      return;
    }
    if (out.status != 200) {
      res.status = out.status;
      res.set_content(json{{"error", {{"message", "scripted status " + std::to_string(out.status)}}}}.dump(),
                      "application/json");
      return;
    }
    json reply{{"object", "list"},
               {"model", body.value("model", "")},
               {"data", json::array({json{{"object", "embedding"}, {"index", 0}, {"embedding", out.embedding}}})}};
    res.set_content(reply.dump(), "application/json");
  }));
}

MockServer::~MockServer() { stop(); }

MockServer::Outcome MockServer::dispatch(const std::string& prompt,
                                         const std::optional<std::string>& image, bool embedding) {
  std::lock_guard lock(mutex_);
  for (auto& c : rules_) {
    const auto& rule = c.rule;
    if (embedding ? !rule.embedding : !rule.reply) continue;
    if (rule.has_image && *rule.has_image != image.has_value()) continue;

    std::smatch prompt_m, image_m;
    if (c.prompt_re && !std::regex_search(prompt, prompt_m, *c.prompt_re)) continue;
    if (c.image_re && (!image || !std::regex_search(*image, image_m, *c.image_re))) continue;

    Outcome out;
    out.matched = true;
    out.delay_ms = rule.delay_ms;
    const auto hit = static_cast<std::size_t>(c.hits++);
    if (hit < rule.status_sequence.size()) out.status = rule.status_sequence[hit];
    if (embedding) {
      out.embedding = *rule.embedding;
    } else {
      out.text = *rule.reply;
      if (out.text.find('$') != std::string::npos) {
        if (c.image_re) out.text = image_m.format(out.text);
        else if (c.prompt_re) out.text = prompt_m.format(out.text);
      }
    }
    return out;
  }
  return {};
}

int MockServer::start(int port, const std::string& host) {
  if (thread_.joinable()) throw std::runtime_error("mock server already running");
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
    if (port_ < 0) throw std::runtime_error("mock server could not bind " + host);
  } else {
    if (!server_->bind_to_port(host, port))
      throw std::runtime_error("mock server could not bind " + host + ":" + std::to_string(port) +
                               " (port in use?)");
    port_ = port;
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void MockServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

void MockServer::wait() {
  if (thread_.joinable()) thread_.join();
}

std::string MockServer::base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

MockStats MockServer::stats() const {
  return {requests_.load(), chat_requests_.load(), embedding_requests_.load(),
          max_in_flight_.load()};
}

void MockServer::reset_stats() {
  requests_ = 0;
  chat_requests_ = 0;
  embedding_requests_ = 0;
  max_in_flight_ = 0;
}

}  // namespace emt
