#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "regformer/rng.hpp"

namespace regformer {

// Fixed reserved token ids; tag and surface tokens follow.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kReservedTokens = 3;

enum class ReorderRule { identity, reverse, rotate_1 };

inline const char* reorder_rule_name(ReorderRule r) {
  switch (r) {
    case ReorderRule::identity: return "identity";
    case ReorderRule::reverse: return "reverse";
    case ReorderRule::rotate_1: return "rotate_1";
  }
  return "?";
}

inline ReorderRule reorder_rule_from_name(const std::string& s) {
  if (s == "identity") return ReorderRule::identity;
  if (s == "reverse") return ReorderRule::reverse;
  if (s == "rotate_1") return ReorderRule::rotate_1;
  throw std::invalid_argument("unknown reorder rule '" + s + "'");
}

inline std::vector<int> apply_reorder(ReorderRule rule, const std::vector<int>& xs) {
  std::vector<int> out = xs;
  switch (rule) {
    case ReorderRule::identity: break;
    case ReorderRule::reverse: std::reverse(out.begin(), out.end()); break;
    case ReorderRule::rotate_1:
      if (out.size() > 1) std::rotate(out.begin(), out.begin() + 1, out.end());
      break;
  }
  return out;
}

// An artificial language: a tag token, a private surface vocabulary of C
// tokens (one per concept), and a word-order rule.
struct LanguageSpec {
  int lang_id = 0;
  int tag_token = 0;
  std::vector<int> surface_tokens;  // indexed by concept id
  ReorderRule reorder_rule = ReorderRule::identity;
};

struct Vocabulary {
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;
  int num_languages = 0;
  int concepts_per_language = 0;

  int size() const { return int(id_to_token.size()); }

  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    if (it == token_to_id.end()) throw std::out_of_range("unknown token '" + token + "'");
    return it->second;
  }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    return id_to_token[size_t(id)];
  }

  int tag_id(int lang) const { return kReservedTokens + lang; }
  bool is_tag(int id) const { return id >= kReservedTokens && id < kReservedTokens + num_languages; }
  bool is_special(int id) const { return id < kReservedTokens + num_languages; }

  // Language owning a surface token id, or -1 for specials/tags.
  int surface_language(int id) const {
    const int base = kReservedTokens + num_languages;
    if (id < base || id >= size()) return -1;
    return (id - base) / concepts_per_language;
  }
};

// Deterministic language set: ids laid out as [pad bos eos | K tags |
// K*C surface tokens]. The seed shuffles each language's concept->token
// assignment; reorder rules cycle {identity, reverse, rotate_1}.
inline std::pair<std::vector<LanguageSpec>, Vocabulary> build_languages(int k, int c, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("build_languages: need at least 2 languages");
  if (c < 2) throw std::invalid_argument("build_languages: need at least 2 concepts per language");
  Vocabulary vocab;
  vocab.num_languages = k;
  vocab.concepts_per_language = c;
  vocab.id_to_token = {"<pad>", "<bos>", "<eos>"};
  for (int l = 0; l < k; ++l) vocab.id_to_token.push_back("<l" + std::to_string(l) + ">");
  for (int l = 0; l < k; ++l)
    for (int j = 0; j < c; ++j)
      vocab.id_to_token.push_back("w" + std::to_string(l) + "_" + std::to_string(j));
  for (int i = 0; i < vocab.size(); ++i) vocab.token_to_id[vocab.id_to_token[size_t(i)]] = i;

  std::vector<LanguageSpec> langs(static_cast<size_t>(k));
  const ReorderRule rules[3] = {ReorderRule::identity, ReorderRule::reverse, ReorderRule::rotate_1};
  for (int l = 0; l < k; ++l) {
    auto& spec = langs[size_t(l)];
    spec.lang_id = l;
    spec.tag_token = vocab.tag_id(l);
    spec.reorder_rule = rules[l % 3];
    spec.surface_tokens.resize(size_t(c));
    const int base = kReservedTokens + k + l * c;
    std::vector<int> perm(static_cast<size_t>(c), 0);
    for (int j = 0; j < c; ++j) perm[size_t(j)] = j;
    Rng rng(mix_seed(seed, 0x6c616e67ull, uint64_t(l)));
    for (int j = c - 1; j > 0; --j) std::swap(perm[size_t(j)], perm[rng.below(uint64_t(j) + 1)]);
    for (int j = 0; j < c; ++j) spec.surface_tokens[size_t(j)] = base + perm[size_t(j)];
  }
  return {std::move(langs), std::move(vocab)};
}

// Supervision graph over languages. Edges are ordered (src,tgt) pairs with
// training data; everything else is evaluated zero-shot.
struct ConnectivityGraph {
  int num_languages = 0;
  int pivot = 0;
  std::vector<std::vector<int>> groups;  // non-pivot language groups
  std::vector<int> bridges;              // bridge languages across all groups
  std::set<std::pair<int, int>> edges;

  bool is_supervised(int src, int tgt) const { return edges.count({src, tgt}) > 0; }

  std::vector<std::pair<int, int>> supervised_directions() const {
    return {edges.begin(), edges.end()};
  }

  std::vector<std::pair<int, int>> zero_shot_directions() const {
    std::vector<std::pair<int, int>> out;
    for (int s = 0; s < num_languages; ++s)
      for (int t = 0; t < num_languages; ++t)
        if (s != t && !is_supervised(s, t)) out.emplace_back(s, t);
    return out;
  }

  std::vector<std::pair<int, int>> all_directions() const {
    std::vector<std::pair<int, int>> out;
    for (int s = 0; s < num_languages; ++s)
      for (int t = 0; t < num_languages; ++t)
        if (s != t) out.emplace_back(s, t);
    return out;
  }
};

// Star topology: the pivot pairs with every other language, both ways.
inline ConnectivityGraph star_graph(int k, int pivot = 0) {
  if (k < 2) throw std::invalid_argument("star_graph: need at least 2 languages");
  if (pivot < 0 || pivot >= k) throw std::invalid_argument("star_graph: pivot out of range");
  ConnectivityGraph g;
  g.num_languages = k;
  g.pivot = pivot;
  for (int l = 0; l < k; ++l) {
    if (l == pivot) continue;
    g.edges.insert({pivot, l});
    g.edges.insert({l, pivot});
  }
  return g;
}

// Bridge topology: non-pivot languages are split into consecutive groups;
// the first bridges_per_group members of each group are bridges. The pivot
// pairs with everyone, bridges pair with each other, and bridges pair with
// the rest of their own group.
inline ConnectivityGraph bridged_graph(int k, int pivot, int group_size, int bridges_per_group) {
  if (group_size < 1) throw std::invalid_argument("bridged_graph: group_size must be >= 1");
  if (bridges_per_group < 1 || bridges_per_group > group_size)
    throw std::invalid_argument("bridged_graph: bridges_per_group out of range");
  ConnectivityGraph g = star_graph(k, pivot);
  std::vector<int> rest;
  for (int l = 0; l < k; ++l)
    if (l != pivot) rest.push_back(l);
  for (size_t i = 0; i < rest.size(); i += size_t(group_size)) {
    std::vector<int> group(rest.begin() + i,
                           rest.begin() + std::min(i + size_t(group_size), rest.size()));
    for (size_t b = 0; b < group.size() && int(b) < bridges_per_group; ++b)
      g.bridges.push_back(group[b]);
    g.groups.push_back(group);
  }
  for (const auto& group : g.groups) {
    for (size_t b = 0; b < group.size() && int(b) < bridges_per_group; ++b) {
      for (int member : group) {
        if (member == group[b]) continue;
        g.edges.insert({group[b], member});
        g.edges.insert({member, group[b]});
      }
    }
  }
  for (int a : g.bridges)
    for (int b : g.bridges)
      if (a != b) g.edges.insert({a, b});
  return g;
}

// One translation pair: concepts drawn per instance, x rendered in the
// source surface vocabulary in concept order, y rendered in the target
// vocabulary after the target language's reorder rule.
struct TranslationInstance {
  int src_lang = 0;
  int tgt_lang = 0;
  std::vector<int> concepts;
  std::vector<int> x;
  std::vector<int> y;
};

inline TranslationInstance generate_instance(const std::vector<LanguageSpec>& langs, int src_lang,
                                             int tgt_lang, int len_min, int len_max, Rng& rng) {
  if (len_min < 1) throw std::invalid_argument("generate_instance: len_min must be >= 1");
  if (len_max < len_min) throw std::invalid_argument("generate_instance: empty length range");
  const auto& src = langs.at(size_t(src_lang));
  const auto& tgt = langs.at(size_t(tgt_lang));
  const int c = int(src.surface_tokens.size());
  TranslationInstance inst;
  inst.src_lang = src_lang;
  inst.tgt_lang = tgt_lang;
  const int len = rng.range_int(len_min, len_max);
  inst.concepts.resize(size_t(len));
  for (auto& concept_id : inst.concepts) concept_id = int(rng.below(uint64_t(c)));
  inst.x.reserve(size_t(len));
  for (int concept_id : inst.concepts) inst.x.push_back(src.surface_tokens[size_t(concept_id)]);
  const std::vector<int> reordered = apply_reorder(tgt.reorder_rule, inst.concepts);
  inst.y.reserve(size_t(len));
  for (int concept_id : reordered) inst.y.push_back(tgt.surface_tokens[size_t(concept_id)]);
  return inst;
}

struct SyntheticCorpus {
  std::vector<LanguageSpec> languages;
  Vocabulary vocab;
  ConnectivityGraph graph;
  int len_min = 0, len_max = 0;
  uint64_t seed = 0;
  std::vector<TranslationInstance> train, valid, test;
};

struct CorpusSizes {
  std::map<std::pair<int, int>, int> train_per_edge;
  int valid_per_edge = 0;
  int test_per_direction = 0;
};

namespace detail {
enum class SplitTag : uint64_t { train = 1, valid = 2, test = 3 };

inline void fill_split(std::vector<TranslationInstance>& out, const std::vector<LanguageSpec>& langs,
                       int src, int tgt, int count, int len_min, int len_max, uint64_t seed,
                       SplitTag split) {
  Rng rng(mix_seed(seed, uint64_t(split), uint64_t(src) * 4096 + uint64_t(tgt)));
  for (int i = 0; i < count; ++i)
    out.push_back(generate_instance(langs, src, tgt, len_min, len_max, rng));
}
}  // namespace detail

// Train/valid come only from supervised edges; test covers every ordered
// direction. Each (split, edge) pair draws from its own seed stream so the
// splits are disjoint and individually reproducible.
inline SyntheticCorpus build_corpus(const std::vector<LanguageSpec>& langs, const Vocabulary& vocab,
                                    const ConnectivityGraph& graph, const CorpusSizes& sizes,
                                    int len_min, int len_max, uint64_t seed) {
  SyntheticCorpus corpus;
  corpus.languages = langs;
  corpus.vocab = vocab;
  corpus.graph = graph;
  corpus.len_min = len_min;
  corpus.len_max = len_max;
  corpus.seed = seed;

  for (const auto& [edge, n] : sizes.train_per_edge) {
    if (!graph.is_supervised(edge.first, edge.second))
      throw std::invalid_argument("build_corpus: direction " + std::to_string(edge.first) + "->" +
                                  std::to_string(edge.second) + " is zero-shot, cannot train on it");
    if (n < 1)
      throw std::invalid_argument("build_corpus: supervised direction " + std::to_string(edge.first) +
                                  "->" + std::to_string(edge.second) + " has no training instances");
  }
  for (const auto& edge : graph.supervised_directions()) {
    if (!sizes.train_per_edge.count(edge))
      throw std::invalid_argument("build_corpus: supervised direction " + std::to_string(edge.first) +
                                  "->" + std::to_string(edge.second) + " has no training instances");
  }

  for (const auto& [edge, n] : sizes.train_per_edge)
    detail::fill_split(corpus.train, langs, edge.first, edge.second, n, len_min, len_max, seed,
                       detail::SplitTag::train);
  for (const auto& edge : graph.supervised_directions())
    detail::fill_split(corpus.valid, langs, edge.first, edge.second, sizes.valid_per_edge, len_min,
                       len_max, seed, detail::SplitTag::valid);
  for (const auto& dir : graph.all_directions())
    detail::fill_split(corpus.test, langs, dir.first, dir.second, sizes.test_per_direction, len_min,
                       len_max, seed, detail::SplitTag::test);
  return corpus;
}

// Model input: x' = tag(tgt) ++ x ++ eos.
inline std::vector<int> encode_source(const TranslationInstance& inst, const Vocabulary& vocab) {
  if (inst.tgt_lang < 0 || inst.tgt_lang >= vocab.num_languages)
    throw std::out_of_range("encode_source: unknown target language " + std::to_string(inst.tgt_lang));
  std::vector<int> out;
  out.reserve(inst.x.size() + 2);
  out.push_back(vocab.tag_id(inst.tgt_lang));
  out.insert(out.end(), inst.x.begin(), inst.x.end());
  out.push_back(kEosId);
  return out;
}

// Teacher-forcing target stream: y ++ eos (with bos prepended as the first
// decoder input by the packing step).
inline std::vector<int> encode_target(const TranslationInstance& inst) {
  std::vector<int> out = inst.y;
  out.push_back(kEosId);
  return out;
}

inline std::vector<int> decode_source(const std::vector<int>& x_prime) {
  if (x_prime.size() < 2) throw std::invalid_argument("decode_source: sequence too short");
  return {x_prime.begin() + 1, x_prime.end() - 1};
}

// ---- line-oriented corpus files ----
// One instance per line: src_lang \t tgt_lang \t x ids \t y ids

inline std::string instance_to_line(const TranslationInstance& inst) {
  std::ostringstream os;
  os << inst.src_lang << '\t' << inst.tgt_lang << '\t';
  for (size_t i = 0; i < inst.x.size(); ++i) os << (i ? " " : "") << inst.x[i];
  os << '\t';
  for (size_t i = 0; i < inst.y.size(); ++i) os << (i ? " " : "") << inst.y[i];
  return os.str();
}

inline TranslationInstance instance_from_line(const std::string& line) {
  std::vector<std::string> fields;
  size_t start = 0;
  for (size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == '\t') {
      fields.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  if (fields.size() != 4)
    throw std::runtime_error("corpus line must have 4 tab-separated fields, got " +
                             std::to_string(fields.size()));
  TranslationInstance inst;
  inst.src_lang = std::stoi(fields[0]);
  inst.tgt_lang = std::stoi(fields[1]);
  auto parse_ids = [](const std::string& s) {
    std::vector<int> ids;
    std::istringstream is(s);
    int v;
    while (is >> v) ids.push_back(v);
    return ids;
  };
  inst.x = parse_ids(fields[2]);
  inst.y = parse_ids(fields[3]);
  return inst;
}

inline void write_instances(const std::string& path, const std::vector<TranslationInstance>& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& inst : split) out << instance_to_line(inst) << '\n';
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline std::vector<TranslationInstance> read_instances(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<TranslationInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(instance_from_line(line));
  }
  return out;
}

}  // namespace regformer
