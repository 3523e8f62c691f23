#pragma once

// Scripted stand-in for a chat-completion / embedding endpoint, used by the
// integration tests and by `emt mock-serve`.
//
// Script format: a JSON list of rules, first match wins.
//   {"match": {"prompt_regex": "...", "has_image": true, "image_regex": "..."},
//    "reply": "text",                 // chat rules
//    "embedding": [0.0, 1.0],         // embedding rules (input text is the "prompt")
//    "status_sequence": [429, 429],   // statuses for the rule's first hits, then 200
//    "delay_ms": 0}
// `image_regex` runs over the decoded image bytes. When the reply contains '$',
// it is expanded with the capture groups of the image (or else prompt) regex,
// ECMAScript format ("$1"; "$$" for a literal dollar).

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace emt {

class MockScriptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MockRule {
  std::optional<std::string> prompt_regex;
  std::optional<bool> has_image;
  std::optional<std::string> image_regex;
  std::optional<std::string> reply;
  std::optional<std::vector<double>> embedding;
  std::vector<int> status_sequence;
  int delay_ms = 0;
};

struct MockScript {
  std::vector<MockRule> rules;

  static MockScript parse(std::string_view json_text);
  static MockScript load(const std::filesystem::path& path);
};

struct MockStats {
  int requests = 0;
  int chat_requests = 0;
  int embedding_requests = 0;
  int max_in_flight = 0;
};

class MockServer {
 public:
  explicit MockServer(MockScript script);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  /// Binds 127.0.0.1:port (0 picks a free port) and serves on a background
  /// thread. Throws std::runtime_error when the port is taken.
  int start(int port = 0, const std::string& host = "127.0.0.1");
  void stop();
  /// Blocks until stop() is called from elsewhere.
  void wait();

  int port() const { return port_; }
  std::string base_url() const;
  MockStats stats() const;
  void reset_stats();

 private:
  struct CompiledRule {
    MockRule rule;
    std::optional<std::regex> prompt_re;
    std::optional<std::regex> image_re;
    int hits = 0;
  };
  struct Outcome {
    int status = 200;
    std::string text;
    std::vector<double> embedding;
    int delay_ms = 0;
    bool matched = false;
  };
  Outcome dispatch(const std::string& prompt, const std::optional<std::string>& image,
                   bool embedding);

  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::vector<CompiledRule> rules_;
  std::mutex mutex_;
  int port_ = 0;

  std::atomic<int> requests_{0};
  std::atomic<int> chat_requests_{0};
  std::atomic<int> embedding_requests_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
};

}  // namespace emt
