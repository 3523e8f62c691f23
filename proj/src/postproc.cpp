#include "emt/postproc.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace emt {

using json = nlohmann::ordered_json;

namespace {

struct Token {
  std::string_view text;
  std::size_t offset = 0;
};

std::vector<Token> tokenize(std::string_view normalized) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < normalized.size()) {
    const auto end = normalized.find(' ', i);
    const auto stop = end == std::string_view::npos ? normalized.size() : end;
    out.push_back({normalized.substr(i, stop - i), i});
    i = stop + 1;
  }
  return out;
}

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  const auto norm = normalize_text(text);
  for (const auto& t : tokenize(norm)) out.emplace_back(t.text);
  return out;
}

struct Pattern {
  std::vector<std::string> words;
  std::size_t label = 0;
  std::size_t chars = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

}  // namespace

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Correct: return "Correct";
    case Verdict::Incorrect: return "Incorrect";
    case Verdict::IntrinsicHallucination: return "IntrinsicHallucination";
    case Verdict::ExtrinsicHallucination: return "ExtrinsicHallucination";
    case Verdict::Unparseable: return "Unparseable";
  }
  return "Unparseable";
}

Verdict parse_verdict(std::string_view s) {
  for (auto v : kAllVerdicts)
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown verdict \"" + std::string(s) + "\"");
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Rule: return "rule";
    case Strategy::Embed: return "embed";
    case Strategy::Judge: return "judge";
  }
  return "rule";
}

Strategy parse_strategy(std::string_view s) {
  if (s == "rule") return Strategy::Rule;
  if (s == "embed") return Strategy::Embed;
  if (s == "judge") return Strategy::Judge;
  throw std::invalid_argument("unknown strategy \"" + std::string(s) + "\" (rule, embed, judge)");
}

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool sep = c == '_' || std::isspace(c) || (c < 0x80 && std::ispunct(c));
    if (sep) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

AliasMap load_alias_file(const std::filesystem::path& path) {
  const auto doc = json::parse(read_file(path));
  if (!doc.is_object()) throw std::invalid_argument("alias file must be a JSON object");
  AliasMap out;
  for (const auto& [alias, canonical] : doc.items()) out[alias] = canonical.get<std::string>();
  return out;
}

MatchResult rule_match(std::string_view output, const LabelSet& labels, const AliasMap* aliases) {
  MatchResult res;
  res.normalized_output = normalize_text(output);
  const auto tokens = tokenize(res.normalized_output);
  if (tokens.empty()) return res;

  std::vector<Pattern> patterns;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    Pattern p{words(labels.display(k)), k, 0};
    for (const auto& w : p.words) p.chars += w.size();
    if (!p.words.empty()) patterns.push_back(std::move(p));
  }
  if (aliases) {
    for (const auto& [alias, canonical] : *aliases) {
      const auto k = labels.find(canonical);
      if (!k) continue;
      Pattern p{words(alias), *k, 0};
      for (const auto& w : p.words) p.chars += w.size();
      if (!p.words.empty()) patterns.push_back(std::move(p));
    }
  }
  std::stable_sort(patterns.begin(), patterns.end(), [](const Pattern& a, const Pattern& b) {
    if (a.words.size() != b.words.size()) return a.words.size() > b.words.size();
    return a.chars > b.chars;
  });

  std::vector<bool> claimed(tokens.size(), false);
  std::vector<std::optional<LabelHit>> first(labels.size());
  for (const auto& p : patterns) {
    const auto n = p.words.size();
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      bool ok = true;
      for (std::size_t j = 0; j < n && ok; ++j)
        ok = !claimed[i + j] && tokens[i + j].text == p.words[j];
      if (!ok) continue;
      for (std::size_t j = 0; j < n; ++j) claimed[i + j] = true;
      const auto& last = tokens[i + n - 1];
      LabelHit hit{p.label, tokens[i].offset, last.offset + last.text.size() - tokens[i].offset};
      auto& slot = first[p.label];
      if (!slot || hit.offset < slot->offset) slot = hit;
      i += n - 1;
    }
  }
  for (const auto& h : first)
    if (h) res.hits.push_back(*h);
  std::sort(res.hits.begin(), res.hits.end(),
            [](const LabelHit& a, const LabelHit& b) { return a.offset < b.offset; });
  return res;
}

void EmbeddingTable::validate() const {
  if (vectors.rows() != labels.size())
    throw EmbeddingTableError("embedding table has " + std::to_string(vectors.rows()) +
                              " vectors for " + std::to_string(labels.size()) + " labels");
  if (vectors.cols() == 0) throw EmbeddingTableError("embedding table has zero dimension");
  for (std::size_t k = 0; k < vectors.rows(); ++k)
    for (double v : vectors.row(k))
      if (!std::isfinite(v))
        throw EmbeddingTableError("embedding for \"" + labels.canonical(k) + "\" has a non-finite entry");
  if (normalized) {
    for (std::size_t k = 0; k < vectors.rows(); ++k) {
      double sq = 0.0;
      for (double v : vectors.row(k)) sq += v * v;
      const double norm = std::sqrt(sq);
      if (norm < 1.0 - 1e-6 || norm > 1.0 + 1e-6)
        throw EmbeddingTableError("embedding for \"" + labels.canonical(k) +
                                  "\" is marked normalized but has norm " + std::to_string(norm));
    }
  }
}

EmbeddingTable parse_embedding_table(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw EmbeddingTableError(std::string("embedding table is not valid JSON: ") + e.what());
  }
  EmbeddingTable t;
  try {
    const auto dim = doc.at("dim").get<std::size_t>();
    t.normalized = doc.value("normalized", false);
    const auto& entries = doc.at("entries");
    std::vector<std::string> names;
    t.vectors = Matrix(entries.size(), dim);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      names.push_back(entries[i].at("label").get<std::string>());
      const auto vec = entries[i].at("vector").get<std::vector<double>>();
      if (vec.size() != dim)
        throw EmbeddingTableError("entries[" + std::to_string(i) + "] has dimension " +
                                  std::to_string(vec.size()) + ", expected " + std::to_string(dim));
      std::copy(vec.begin(), vec.end(), t.vectors.row(i).begin());
    }
    t.labels = LabelSet(std::move(names));
  } catch (const json::exception& e) {
    throw EmbeddingTableError(std::string("embedding table schema error: ") + e.what());
  }
  t.validate();
  return t;
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  return parse_embedding_table(read_file(path));
}

std::string serialize_embedding_table(const EmbeddingTable& t) {
  json doc{{"dim", t.dim()}, {"normalized", t.normalized}, {"entries", json::array()}};
  for (std::size_t k = 0; k < t.labels.size(); ++k) {
    const auto row = t.vectors.row(k);
    doc["entries"].push_back({{"label", t.labels.canonical(k)},
                              {"vector", std::vector<double>(row.begin(), row.end())}});
  }
  return doc.dump(2) + "\n";
}

EmbeddingTable normalized(EmbeddingTable t) {
  for (std::size_t k = 0; k < t.vectors.rows(); ++k) {
    auto row = t.vectors.row(k);
    double sq = 0.0;
    for (double v : row) sq += v * v;
    if (sq == 0.0)
      throw EmbeddingTableError("cannot normalize zero embedding for \"" + t.labels.canonical(k) + "\"");
    const double inv = 1.0 / std::sqrt(sq);
    for (double& v : row) v *= inv;
  }
  t.normalized = true;
  return t;
}

EmbedMatch embed_match(std::span<const double> query, const EmbeddingTable& table) {
  Matrix q(1, query.size());
  std::copy(query.begin(), query.end(), q.row(0).begin());
  return embed_match_batch(q, table, kernels::Backend::Serial).front();
}

std::vector<EmbedMatch> embed_match_batch(const Matrix& queries, const EmbeddingTable& table,
                                          kernels::Backend backend) {
  if (queries.cols() != table.dim())
    throw EmbeddingTableError("query dimension " + std::to_string(queries.cols()) +
                              " does not match embedding table dimension " +
                              std::to_string(table.dim()));
  std::vector<std::size_t> idx(queries.rows());
  std::vector<double> dist(queries.rows());
  kernels::nearest_rows(backend, queries, table.vectors, idx, dist);
  std::vector<EmbedMatch> out(queries.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {idx[i], dist[i]};
  return out;
}

bool judge_parse(std::string_view text) {
  std::size_t i = 0;
  while (i < text.size() && !std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
  std::string word;
  while (i < text.size() && std::isalpha(static_cast<unsigned char>(text[i])))
    word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i++]))));
  if (word == "yes") return true;
  if (word == "no") return false;
  throw UnparseableJudge(std::string(text));
}

Verdict classify_verdict(std::size_t truth, const LabelSet& labels, std::string_view output,
                         const MatchResult& match, std::optional<bool> judge) {
  if (is_blank(output)) return Verdict::Unparseable;
  const bool truth_only = match.hits.size() == 1 && match.hits.front().label == truth;
  if (judge ? *judge : truth_only) return Verdict::Correct;
  if (match.hits.size() >= 2) return Verdict::IntrinsicHallucination;
  if (match.hits.size() == 1 && !truth_only) {
    // Words of the output not claimed by the matched label.
    const auto& hit = match.hits.front();
    std::set<std::string_view> loose;
    for (const auto& t : tokenize(match.normalized_output))
      if (t.offset < hit.offset || t.offset >= hit.offset + hit.length) loose.insert(t.text);
    const auto truth_words = words(labels.display(truth));
    const bool partial =
        truth_words.size() >= 2 &&
        std::any_of(truth_words.begin(), truth_words.end(),
                    [&](const std::string& w) { return loose.count(w) > 0; });
    return partial ? Verdict::ExtrinsicHallucination : Verdict::Incorrect;
  }
  return Verdict::ExtrinsicHallucination;
}

Verdict embed_verdict(std::size_t truth, std::string_view output, const EmbedMatch& match) {
  if (is_blank(output)) return Verdict::Unparseable;
  return match.label == truth ? Verdict::Correct : Verdict::Incorrect;
}

}  // namespace emt
