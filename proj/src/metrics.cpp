#include "emt/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "emt/model_client.hpp"

namespace emt {

using json = nlohmann::ordered_json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

Percent parse_percent(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.back() == '%') s.remove_suffix(1);
  bool neg = false;
  if (!s.empty() && s.front() == '-') {
    neg = true;
    s.remove_prefix(1);
  }
  const auto dot = s.find('.');
  if (dot == std::string_view::npos || s.size() - dot != 3)
    throw std::invalid_argument("malformed percentage \"" + std::string(s) + "\"");
  const auto whole = std::stoll(std::string(s.substr(0, dot)));
  const auto frac = std::stoll(std::string(s.substr(dot + 1)));
  const auto centi = whole * 100 + frac;
  return Percent{neg ? -centi : centi};
}

std::vector<const RunRecord*> sorted_by_id(std::span<const RunRecord> records) {
  std::vector<const RunRecord*> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(&r);
  std::stable_sort(out.begin(), out.end(),
                   [](const RunRecord* a, const RunRecord* b) { return a->id < b->id; });
  return out;
}

}  // namespace

std::string record_to_json_line(const RunRecord& r) {
  json j{{"schema", kRecordSchemaVersion},
         {"id", r.id},
         {"dataset", r.dataset},
         {"model", r.model},
         {"image", r.image},
         {"truth", r.truth},
         {"truth_index", r.truth_index},
         {"prompt_digest", r.prompt_digest},
         {"output", r.output},
         {"strategy", std::string(to_string(r.strategy))},
         {"verdict", std::string(to_string(r.verdict))},
         {"matched_labels", r.matched_labels}};
  if (r.judge_text) j["judge_text"] = *r.judge_text;
  if (r.judge_params) j["judge_params"] = to_json(*r.judge_params);
  if (r.embed_label) j["embed_label"] = *r.embed_label;
  if (r.embed_distance) j["embed_distance"] = *r.embed_distance;
  j["fetched_at"] = r.fetched_at;
  return j.dump();
}

RunRecord record_from_json_line(std::string_view line) {
  const auto j = json::parse(line);
  const int schema = j.value("schema", 0);
  if (schema != kRecordSchemaVersion)
    throw std::invalid_argument("unsupported record schema version " + std::to_string(schema));
  RunRecord r;
  r.id = j.at("id").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.image = j.value("image", "");
  r.truth = j.at("truth").get<std::string>();
  r.truth_index = j.at("truth_index").get<std::size_t>();
  r.prompt_digest = j.value("prompt_digest", "");
  r.output = j.at("output").get<std::string>();
  r.strategy = parse_strategy(j.at("strategy").get<std::string>());
  r.verdict = parse_verdict(j.at("verdict").get<std::string>());
  r.matched_labels = j.value("matched_labels", std::vector<std::string>{});
  if (j.contains("judge_text")) r.judge_text = j["judge_text"].get<std::string>();
  if (j.contains("judge_params")) r.judge_params = sampling_from_json(j["judge_params"]);
  if (j.contains("embed_label")) r.embed_label = j["embed_label"].get<std::string>();
  if (j.contains("embed_distance")) r.embed_distance = j["embed_distance"].get<double>();
  r.fetched_at = j.value("fetched_at", "");
  return r;
}

void write_records_jsonl(std::ostream& out, std::vector<RunRecord> records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const RunRecord& a, const RunRecord& b) { return a.id < b.id; });
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
}

std::vector<RunRecord> read_records_jsonl(std::istream& in) {
  std::vector<RunRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json_line(line));
    } catch (const std::exception& e) {
      throw std::invalid_argument("records line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Percent Percent::ratio(std::int64_t num, std::int64_t den) {
  if (den <= 0) throw std::invalid_argument("percentage of an empty set");
  if (num < 0) return Percent{-ratio(-num, den).centi};
  return Percent{(2 * num * 10000 + den) / (2 * den)};
}

std::string Percent::digits() const {
  const auto mag = centi < 0 ? -centi : centi;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%lld.%02lld", centi < 0 ? "-" : "",
                static_cast<long long>(mag / 100), static_cast<long long>(mag % 100));
  return buf;
}

double accuracy(std::span<const RunRecord> records) {
  if (records.empty()) throw std::invalid_argument("accuracy of an empty record set");
  const auto correct = std::count_if(records.begin(), records.end(),
                                     [](const RunRecord& r) { return r.verdict == Verdict::Correct; });
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

Percent accuracy_percent(std::span<const RunRecord> records) {
  if (records.empty()) throw std::invalid_argument("accuracy of an empty record set");
  const auto correct = std::count_if(records.begin(), records.end(),
                                     [](const RunRecord& r) { return r.verdict == Verdict::Correct; });
  return Percent::ratio(correct, static_cast<std::int64_t>(records.size()));
}

const AccuracyCell* AccuracyReport::cell(const std::string& row, const std::string& col) const {
  const auto it = cells.find({row, col});
  return it == cells.end() ? nullptr : &it->second;
}

std::map<std::string, Percent> AccuracyReport::row_percent(const std::string& row) const {
  std::map<std::string, Percent> out;
  for (const auto& col : columns)
    if (const auto* c = cell(row, col)) out[col] = c->percent();
  return out;
}

AccuracyReport build_report(std::span<const RunRecord> records) {
  AccuracyReport rep;
  std::set<std::string> rows, cols;
  for (const auto& r : records) {
    rows.insert(r.model);
    cols.insert(r.dataset);
    auto& c = rep.cells[{r.model, r.dataset}];
    ++c.count;
    if (r.verdict == Verdict::Correct) ++c.correct;
    ++c.histogram[static_cast<std::size_t>(r.verdict)];
  }
  rep.rows.assign(rows.begin(), rows.end());
  rep.columns.assign(cols.begin(), cols.end());
  return rep;
}

ForgettingGap forgetting_gap(const std::map<std::string, Percent>& model,
                             const std::map<std::string, Percent>& base) {
  ForgettingGap gap;
  if (model.size() != base.size())
    throw std::invalid_argument("forgetting gap: model and base cover different datasets");
  for (const auto& [dataset, acc] : model) {
    const auto it = base.find(dataset);
    if (it == base.end())
      throw std::invalid_argument("forgetting gap: base has no accuracy for dataset " + dataset);
    gap.datasets.push_back(dataset);
    gap.gap_centi.push_back(it->second.centi - acc.centi);
    gap.total_centi += gap.gap_centi.back();
  }
  return gap;
}

std::string prediction_key(const RunRecord& r, const LabelSet* vocabulary) {
  if (r.strategy == Strategy::Embed && r.embed_label) return LabelSet::display_form(*r.embed_label);
  if (!r.matched_labels.empty()) return LabelSet::display_form(r.matched_labels.front());
  if (vocabulary) {
    const auto m = rule_match(r.output, *vocabulary);
    if (!m.hits.empty()) return vocabulary->display(m.hits.front().label);
  }
  return std::string(trim(r.output));
}

std::vector<TopKRow> top_k_distribution(std::span<const RunRecord> records, int k,
                                        const LabelSet* vocabulary) {
  if (k < 1) throw std::invalid_argument("top-k needs k >= 1");
  std::map<std::string, std::map<std::string, std::int64_t>> tally;
  for (const auto& r : records) ++tally[r.truth][prediction_key(r, vocabulary)];

  std::vector<TopKRow> out;
  for (const auto& [truth, counts] : tally) {
    TopKRow row;
    row.truth = truth;
    std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
    for (const auto& [_, n] : ranked) row.total += n;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    const auto keep = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < keep; ++i)
      row.entries.push_back({ranked[i].first, ranked[i].second,
                             Percent::ratio(ranked[i].second, row.total)});
    out.push_back(std::move(row));
  }
  return out;
}

LabelSet truth_vocabulary(std::span<const RunRecord> records) {
  std::vector<std::string> labels;
  std::set<std::string> seen;
  for (const auto* r : sorted_by_id(records)) {
    auto key = r->truth;
    for (auto& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (seen.insert(key).second) labels.push_back(r->truth);
  }
  if (labels.empty()) return LabelSet();
  return LabelSet(std::move(labels));
}

std::string accuracy_csv(const AccuracyReport& report) {
  std::ostringstream out;
  out << "checkpoint";
  for (const auto& col : report.columns) out << ',' << csv_field(col);
  out << '\n';
  for (const auto& row : report.rows) {
    out << csv_field(row);
    for (const auto& col : report.columns) {
      out << ',';
      if (const auto* c = report.cell(row, col)) out << c->percent().str();
    }
    out << '\n';
  }
  return out.str();
}

std::string verdicts_csv(const AccuracyReport& report) {
  std::ostringstream out;
  out << "checkpoint,dataset,count,accuracy";
  for (auto v : kAllVerdicts) out << ',' << to_string(v);
  out << '\n';
  for (const auto& row : report.rows) {
    for (const auto& col : report.columns) {
      const auto* c = report.cell(row, col);
      if (!c) continue;
      out << csv_field(row) << ',' << csv_field(col) << ',' << c->count << ','
          << c->percent().str();
      for (auto n : c->histogram) out << ',' << n;
      out << '\n';
    }
  }
  return out.str();
}

std::string top_k_csv(std::span<const RunRecord> records, int k, const LabelSet* vocabulary) {
  std::map<std::pair<std::string, std::string>, std::vector<RunRecord>> groups;
  for (const auto* r : sorted_by_id(records)) groups[{r->model, r->dataset}].push_back(*r);
  std::ostringstream out;
  out << "checkpoint,dataset,truth,total,rank,prediction,count,percent\n";
  for (const auto& [key, recs] : groups) {
    for (const auto& row : top_k_distribution(recs, k, vocabulary)) {
      for (std::size_t i = 0; i < row.entries.size(); ++i) {
        const auto& e = row.entries[i];
        out << csv_field(key.first) << ',' << csv_field(key.second) << ',' << csv_field(row.truth)
            << ',' << row.total << ',' << i + 1 << ',' << csv_field(e.prediction) << ',' << e.count
            << ',' << e.percent.str() << '\n';
      }
    }
  }
  return out.str();
}

std::string gap_csv(const AccuracyReport& report, const std::map<std::string, Percent>& base,
                    const std::string& base_name) {
  std::ostringstream out;
  out << "checkpoint,base";
  for (const auto& [dataset, _] : base) out << ',' << csv_field(dataset);
  out << ",total\n";
  for (const auto& row : report.rows) {
    if (row == base_name) continue;
    const auto model = report.row_percent(row);
    ForgettingGap gap;
    try {
      gap = forgetting_gap(model, base);
    } catch (const std::invalid_argument&) {
      continue;  // checkpoint not evaluated on every base dataset
    }
    out << csv_field(row) << ',' << csv_field(base_name);
    for (auto g : gap.gap_centi) out << ',' << Percent{g}.digits();
    out << ',' << Percent{gap.total_centi}.digits() << '\n';
  }
  return out.str();
}

std::map<std::string, std::map<std::string, Percent>> parse_accuracy_csv(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("accuracy CSV is empty");
  const auto header = split_csv_line(line);
  if (header.empty() || header.front() != "checkpoint")
    throw std::invalid_argument("accuracy CSV header must start with \"checkpoint\"");
  std::map<std::string, std::map<std::string, Percent>> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw std::invalid_argument("accuracy CSV row has " + std::to_string(fields.size()) +
                                  " fields, header has " + std::to_string(header.size()));
    auto& row = out[fields[0]];
    for (std::size_t i = 1; i < fields.size(); ++i)
      if (!trim(fields[i]).empty()) row[header[i]] = parse_percent(fields[i]);
  }
  return out;
}

}  // namespace emt
