#include "emt/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "emt/digest.hpp"

namespace emt {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, std::string_view text) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string media_type_for(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "application/octet-stream";
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Per-item exceptions
// are collected, never propagated.
std::vector<std::string> parallel_items(std::size_t n, int threads,
                                        const std::function<void(std::size_t)>& fn) {
  std::vector<std::string> errors;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        errors.push_back(e.what());
      }
    }
  };
  const auto count = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return errors;
}

// Single append-only writer shared by the graders.
class RecordSink {
 public:
  explicit RecordSink(const fs::path& path) : out_(path, std::ios::binary | std::ios::app) {
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for appending");
  }
  void append(const RunRecord& r) {
    const auto line = record_to_json_line(r);
    std::lock_guard lock(mu_);
    out_ << line << '\n';
    out_.flush();
  }

 private:
  std::mutex mu_;
  std::ofstream out_;
};

struct Dataset {
  DatasetManifest manifest;  // already subsampled
  std::vector<std::size_t> original_index;
  fs::path dir;
  std::string prompt;
};

// Strategy machinery shared by eval and judge.
class Grader {
 public:
  Grader(const RunConfig& cfg, ModelClient* model_client) : cfg_(cfg) {
    const auto& spec = cfg.strategy;
    if (spec.alias_file) aliases_ = load_alias_file(*spec.alias_file);
    if (spec.strategy == Strategy::Judge) judge_ = std::make_unique<ModelClient>(*cfg.judge_endpoint, cfg.effective_cache_dir());
    if (spec.strategy == Strategy::Embed) {
      table_ = load_embedding_table(*spec.embedding_table);
      if (spec.embedding_endpoint) {
        own_embedder_ = std::make_unique<ModelClient>(*spec.embedding_endpoint, cfg.effective_cache_dir());
        embedder_ = own_embedder_.get();
      } else if (model_client) {
        embedder_ = model_client;
      } else {
        own_embedder_ = std::make_unique<ModelClient>(cfg.endpoint, cfg.effective_cache_dir());
        embedder_ = own_embedder_.get();
      }
    }
  }

  void check_labels(const LabelSet& labels) const {
    if (!table_) return;
    for (const auto& l : labels.labels())
      if (!table_->labels.find(l))
        throw ConfigError("embedding table has no vector for label \"" + l + "\"");
  }

  int parallelism() const {
    if (judge_) return judge_->config().parallelism;
    if (embedder_) return embedder_->config().parallelism;
    return 1;
  }

  void grade(RunRecord& r, const LabelSet& labels) const {
    const auto match = rule_match(r.output, labels, aliases_ ? &*aliases_ : nullptr);
    r.matched_labels.clear();
    for (const auto& h : match.hits) r.matched_labels.push_back(labels.canonical(h.label));
    const auto truth = labels.find(r.truth);
    if (!truth) throw ConfigError("truth label \"" + r.truth + "\" is not in the dataset's label set");
    r.strategy = cfg_.strategy.strategy;
    const bool blank = std::all_of(r.output.begin(), r.output.end(),
                                   [](unsigned char c) { return std::isspace(c); });
    switch (r.strategy) {
      case Strategy::Rule:
        r.verdict = classify_verdict(*truth, labels, r.output, match, std::nullopt);
        break;
      case Strategy::Judge: {
        if (blank) {
          r.verdict = Verdict::Unparseable;
          break;
        }
        const auto reply = judge_->judge_complete(judge_prompt(labels.display(*truth), r.output), cfg_.judge_params);
        r.judge_text = reply.text;
        r.judge_params = cfg_.judge_params;
        try {
          r.verdict = classify_verdict(*truth, labels, r.output, match, judge_parse(reply.text));
        } catch (const UnparseableJudge&) {
          r.verdict = Verdict::Unparseable;
        }
        break;
      }
      case Strategy::Embed: {
        if (blank) {
          r.verdict = Verdict::Unparseable;
          break;
        }
        auto q = embedder_->fetch_embedding(r.output);
        if (table_->normalized) {
          double sq = 0.0;
          for (double v : q) sq += v * v;
          if (sq > 0.0)
            for (double& v : q) v /= std::sqrt(sq);
        }
        const auto m = embed_match(q, *table_);
        r.embed_label = table_->labels.canonical(m.label);
        r.embed_distance = m.distance;
        r.verdict = embed_verdict(*table_->labels.find(r.truth), r.output, m);
        break;
      }
    }
  }

 private:
  const RunConfig& cfg_;
  std::optional<AliasMap> aliases_;
  std::optional<EmbeddingTable> table_;
  std::unique_ptr<ModelClient> judge_;
  std::unique_ptr<ModelClient> own_embedder_;
  ModelClient* embedder_ = nullptr;
};

std::vector<Dataset> load_datasets(const RunConfig& cfg) {
  std::vector<Dataset> out;
  std::set<std::string> names;
  for (const auto& path : cfg.manifests) {
    DatasetManifest full;
    try {
      full = load_manifest(path);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    if (!names.insert(full.name).second) throw ConfigError("two manifests are named \"" + full.name + "\"");
    Dataset d;
    d.dir = path.parent_path();
    d.prompt = classification_prompt(full.labels, full.kind);
    // remember original positions so ids stay stable under subsampling
    DatasetManifest indexed = full;
    for (std::size_t i = 0; i < indexed.items.size(); ++i) indexed.items[i].image = std::to_string(i);
    const auto sub = sample_eval_subset(indexed, cfg.eval_fraction, cfg.eval_seed, cfg.stratified);
    d.manifest = full;
    d.manifest.items.clear();
    for (const auto& it : sub.items) {
      const auto idx = std::stoul(it.image);
      d.original_index.push_back(idx);
      d.manifest.items.push_back(full.items[idx]);
    }
    if (cfg.send_images)
      for (const auto& it : d.manifest.items)
        if (!fs::exists(resolve(d.dir, it.image)))
          throw ConfigError("image not found: " + resolve(d.dir, it.image).string());
    out.push_back(std::move(d));
  }
  return out;
}

std::map<std::string, LabelSet> label_sets(const RunConfig& cfg) {
  std::map<std::string, LabelSet> out;
  for (const auto& path : cfg.manifests) {
    try {
      auto m = load_manifest(path);
      out[m.name] = m.labels;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  return out;
}

void log_errors(std::ostream& log, const std::vector<std::string>& errors) {
  log << errors.size() << " item(s) failed\n";
  for (std::size_t i = 0; i < errors.size() && i < 5; ++i) log << "  " << errors[i] << '\n';
}

std::optional<LabelSet> topk_vocabulary(const RunConfig& cfg) {
  if (!cfg.topk_labels) return std::nullopt;
  try {
    return load_manifest(*cfg.topk_labels).labels;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  if (manifests.empty()) throw ConfigError("config lists no manifests");
  try {
    endpoint.validate();
    if (judge_endpoint) judge_endpoint->validate();
    if (strategy.embedding_endpoint) strategy.embedding_endpoint->validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(eval_fraction > 0.0 && eval_fraction <= 1.0)) throw ConfigError("eval_fraction must lie in (0, 1]");
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
  if (strategy.strategy == Strategy::Judge && !judge_endpoint)
    throw ConfigError("the judge strategy needs a judge_endpoint");
  if (strategy.strategy == Strategy::Embed && !strategy.embedding_table)
    throw ConfigError("the embed strategy needs strategy.embedding_table");
  if (strategy.embedding_table && !fs::exists(*strategy.embedding_table))
    throw ConfigError("embedding table not found: " + strategy.embedding_table->string());
  if (strategy.alias_file && !fs::exists(*strategy.alias_file))
    throw ConfigError("alias file not found: " + strategy.alias_file->string());
}

json to_json(const RunConfig& c) {
  json j{{"schema_version", kConfigSchemaVersion}};
  j["manifests"] = json::array();
  for (const auto& m : c.manifests) j["manifests"].push_back(fs::absolute(m).lexically_normal().string());
  j["endpoint"] = to_json(c.endpoint);
  j["checkpoint"] = c.checkpoint_name();
  j["sampling"] = to_json(c.sampling);
  json s{{"name", std::string(to_string(c.strategy.strategy))}};
  if (c.strategy.alias_file) s["alias_file"] = fs::absolute(*c.strategy.alias_file).lexically_normal().string();
  if (c.strategy.embedding_table)
    s["embedding_table"] = fs::absolute(*c.strategy.embedding_table).lexically_normal().string();
  if (c.strategy.embedding_endpoint) s["embedding_endpoint"] = to_json(*c.strategy.embedding_endpoint);
  j["strategy"] = s;
  if (c.judge_endpoint) j["judge_endpoint"] = to_json(*c.judge_endpoint);
  j["judge_params"] = to_json(c.judge_params);
  j["eval"] = {{"fraction", c.eval_fraction}, {"seed", c.eval_seed}, {"stratified", c.stratified}};
  j["top_k"] = c.top_k;
  if (c.topk_labels) j["topk_labels"] = fs::absolute(*c.topk_labels).lexically_normal().string();
  j["send_images"] = c.send_images;
  if (c.cache_dir) j["cache_dir"] = fs::absolute(*c.cache_dir).lexically_normal().string();
  return j;
}

RunConfig run_config_from_json(const json& j, const fs::path& base) {
  RunConfig c;
  try {
    const int version = j.value("schema_version", 0);
    if (version != kConfigSchemaVersion)
      throw ConfigError("config schema_version must be " + std::to_string(kConfigSchemaVersion) + ", got " +
                        std::to_string(version));
    for (const auto& m : j.at("manifests")) c.manifests.push_back(resolve(base, m.get<std::string>()));
    c.endpoint = endpoint_from_json(j.at("endpoint"));
    c.checkpoint = j.value("checkpoint", "");
    if (j.contains("sampling")) c.sampling = sampling_from_json(j["sampling"]);
    if (j.contains("strategy")) {
      const auto& s = j["strategy"];
      c.strategy.strategy = parse_strategy(s.value("name", "rule"));
      if (s.contains("alias_file")) c.strategy.alias_file = resolve(base, s["alias_file"].get<std::string>());
      if (s.contains("embedding_table"))
        c.strategy.embedding_table = resolve(base, s["embedding_table"].get<std::string>());
      if (s.contains("embedding_endpoint")) c.strategy.embedding_endpoint = endpoint_from_json(s["embedding_endpoint"]);
    }
    if (j.contains("judge_endpoint")) c.judge_endpoint = endpoint_from_json(j["judge_endpoint"]);
    if (j.contains("judge_params")) c.judge_params = sampling_from_json(j["judge_params"]);
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      c.eval_fraction = e.value("fraction", c.eval_fraction);
      c.eval_seed = e.value("seed", c.eval_seed);
      c.stratified = e.value("stratified", c.stratified);
    }
    c.top_k = j.value("top_k", c.top_k);
    if (j.contains("topk_labels")) c.topk_labels = resolve(base, j["topk_labels"].get<std::string>());
    c.send_images = j.value("send_images", c.send_images);
    if (j.contains("out_dir")) c.out_dir = resolve(base, j["out_dir"].get<std::string>());
    if (j.contains("cache_dir")) c.cache_dir = resolve(base, j["cache_dir"].get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

std::string record_id(const std::string& dataset, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return dataset + "/" + buf;
}

std::vector<RunRecord> load_records(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(std::move(line));
  std::vector<RunRecord> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(record_from_json_line(lines[i]));
    } catch (const std::exception& e) {
      if (i + 1 == lines.size()) break;  // torn tail from an interrupted write
      throw std::runtime_error(path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

void save_records(const fs::path& path, std::vector<RunRecord> records) {
  std::ostringstream out;
  write_records_jsonl(out, std::move(records));
  write_file(path, out.str());
}

void write_reports(const fs::path& out_dir, std::span<const RunRecord> records, const ReportOptions& opts) {
  fs::create_directories(out_dir);
  const auto report = build_report(records);
  write_file(out_dir / kAccuracyFile, accuracy_csv(report));
  write_file(out_dir / kVerdictsFile, verdicts_csv(report));
  const auto vocab = opts.topk_vocabulary ? *opts.topk_vocabulary : truth_vocabulary(records);
  write_file(out_dir / kTopKFile, top_k_csv(records, opts.top_k, &vocab));

  std::map<std::string, std::map<std::string, Percent>> rows;
  for (const auto& r : report.rows) rows[r] = report.row_percent(r);
  std::optional<std::string> base = opts.base;
  if (opts.base_csv) {
    std::map<std::string, std::map<std::string, Percent>> extra;
    try {
      extra = parse_accuracy_csv(read_file(*opts.base_csv));
    } catch (const std::exception& e) {
      throw ConfigError("base CSV: " + std::string(e.what()));
    }
    if (!base && extra.size() == 1) base = extra.begin()->first;
    for (auto& [name, row] : extra) rows.emplace(name, row);
  }
  if (!base) {
    fs::remove(out_dir / kGapFile);
    return;
  }
  const auto it = rows.find(*base);
  if (it == rows.end()) throw ConfigError("base checkpoint \"" + *base + "\" not found in records or base CSV");
  write_file(out_dir / kGapFile, gap_csv(report, it->second, *base));
}

int cmd_eval(const RunConfig& cfg, std::ostream& log) {
  std::vector<Dataset> datasets;
  std::unique_ptr<ModelClient> client;
  std::unique_ptr<Grader> grader;
  std::vector<RunRecord> existing;
  const auto records_path = cfg.out_dir / kRecordsFile;
  std::optional<LabelSet> vocab;
  try {
    cfg.validate();
    datasets = load_datasets(cfg);
    vocab = topk_vocabulary(cfg);
    if (cfg.resume && !fs::exists(records_path))
      throw ConfigError("--resume needs an existing " + records_path.string());
    fs::create_directories(cfg.out_dir);
    fs::create_directories(cfg.effective_cache_dir());
    client = std::make_unique<ModelClient>(cfg.endpoint, cfg.effective_cache_dir());
    grader = std::make_unique<Grader>(cfg, client.get());
    for (const auto& d : datasets) grader->check_labels(d.manifest.labels);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::runtime_error& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (cfg.resume) {
      existing = load_records(records_path);
      save_records(records_path, existing);  // drops a torn tail before appending
    } else {
      fs::remove(records_path);
    }
    write_file(cfg.out_dir / kEffectiveConfigFile, to_json(cfg).dump(2) + "\n");
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }

  struct Pending {
    const Dataset* dataset;
    std::size_t item;  // position in the subsampled manifest
  };
  std::set<std::string> done;
  for (const auto& r : existing) done.insert(r.id);
  std::vector<Pending> pending;
  std::size_t requested = 0;
  for (const auto& d : datasets)
    for (std::size_t i = 0; i < d.manifest.items.size(); ++i) {
      ++requested;
      if (!done.count(record_id(d.manifest.name, d.original_index[i]))) pending.push_back({&d, i});
    }
  log << "eval: " << requested << " item(s), " << (requested - pending.size()) << " already graded, "
      << pending.size() << " to query\n";

  std::vector<std::string> errors;
  {
    RecordSink sink(records_path);
    errors = parallel_items(pending.size(), cfg.endpoint.parallelism, [&](std::size_t n) {
      const auto& p = pending[n];
      const auto& d = *p.dataset;
      const auto& item = d.manifest.items[p.item];
      ChatRequest req;
      req.prompt = d.prompt;
      req.params = cfg.sampling;
      if (cfg.send_images) {
        const auto path = resolve(d.dir, item.image);
        req.image = ImageAttachment{read_file(path), media_type_for(path)};
      }
      const auto reply = client->complete(req);
      RunRecord r;
      r.id = record_id(d.manifest.name, d.original_index[p.item]);
      r.dataset = d.manifest.name;
      r.model = cfg.checkpoint_name();
      r.image = item.image;
      r.truth = d.manifest.labels.canonical(static_cast<std::size_t>(item.label));
      r.truth_index = static_cast<std::size_t>(item.label);
      r.prompt_digest = sha256_hex(d.prompt);
      r.output = reply.text;
      r.fetched_at = reply.fetched_at;
      grader->grade(r, d.manifest.labels);
      sink.append(r);
    });
  }

  std::vector<RunRecord> all;
  try {
    all = load_records(records_path);
    save_records(records_path, all);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
  if (!errors.empty()) {
    log_errors(log, errors);
    log << "partial records kept in " << records_path.string() << "; rerun with --resume\n";
    return 1;
  }

  try {
    ReportOptions ro;
    ro.top_k = cfg.top_k;
    ro.topk_vocabulary = vocab;
    write_reports(cfg.out_dir, all, ro);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
  const auto report = build_report(all);
  for (const auto& row : report.rows)
    for (const auto& [dataset, pct] : report.row_percent(row))
      log << "  " << row << " / " << dataset << ": " << pct.str() << '\n';
  return 0;
}

int cmd_judge(const RunConfig& cfg, const fs::path& records_path, std::ostream& log) {
  std::map<std::string, LabelSet> labels;
  std::unique_ptr<Grader> grader;
  std::vector<RunRecord> records;
  std::optional<LabelSet> vocab;
  try {
    cfg.validate();
    labels = label_sets(cfg);
    vocab = topk_vocabulary(cfg);
    fs::create_directories(cfg.effective_cache_dir());
    grader = std::make_unique<Grader>(cfg, nullptr);
    for (const auto& [_, ls] : labels) grader->check_labels(ls);
    const auto path = fs::is_directory(records_path) ? records_path / kRecordsFile : records_path;
    records = load_records(path);
    for (const auto& r : records)
      if (!labels.count(r.dataset))
        throw ConfigError("no manifest in the config for dataset \"" + r.dataset + "\"");
  } catch (const std::exception& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  }

  const auto errors = parallel_items(records.size(), grader->parallelism(), [&](std::size_t i) {
    grader->grade(records[i], labels.at(records[i].dataset));
  });
  if (!errors.empty()) {
    log_errors(log, errors);
    return 1;
  }
  try {
    fs::create_directories(cfg.out_dir);
    save_records(cfg.out_dir / kRecordsFile, records);
    ReportOptions ro;
    ro.top_k = cfg.top_k;
    ro.topk_vocabulary = vocab;
    write_reports(cfg.out_dir, records, ro);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
  log << "re-graded " << records.size() << " record(s) with strategy " << to_string(cfg.strategy.strategy) << '\n';
  return 0;
}

int cmd_report(const std::vector<fs::path>& records_paths, const fs::path& out_dir, const ReportOptions& opts,
               std::ostream& log) {
  std::vector<RunRecord> all;
  try {
    if (records_paths.empty()) throw ConfigError("report needs at least one records file");
    if (opts.top_k < 1) throw ConfigError("top_k must be >= 1");
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& p : records_paths) {
      const auto path = fs::is_directory(p) ? p / kRecordsFile : p;
      for (auto& r : load_records(path)) {
        if (!seen.insert({r.model, r.id}).second)
          throw ConfigError("record " + r.id + " of checkpoint " + r.model + " appears twice");
        all.push_back(std::move(r));
      }
    }
    if (all.empty()) throw ConfigError("no records to report");
  } catch (const std::exception& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  }
  try {
    write_reports(out_dir, all, opts);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
  log << read_file(out_dir / kAccuracyFile);
  if (fs::exists(out_dir / kGapFile)) log << read_file(out_dir / kGapFile);
  return 0;
}

}  // namespace emt
