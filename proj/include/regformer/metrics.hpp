#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "regformer/corpus.hpp"
#include "regformer/inference.hpp"
#include "regformer/model.hpp"
#include "regformer/parallel.hpp"

namespace regformer {

// Corpus-level token-id BLEU with brevity penalty and add-one smoothing on
// the n>1 precisions.
inline double bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_ngram = 4) {
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("bleu: hypothesis/reference count mismatch");
  long hyp_len = 0, ref_len = 0;
  std::vector<long> matched(size_t(max_ngram), 0), total(size_t(max_ngram), 0);
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    hyp_len += long(h.size());
    ref_len += long(r.size());
    for (int n = 1; n <= max_ngram; ++n) {
      if (h.size() < size_t(n)) continue;
      std::map<std::vector<int>, long> ref_counts;
      for (size_t i = 0; i + n <= r.size(); ++i)
        ref_counts[std::vector<int>(r.begin() + i, r.begin() + i + n)]++;
      std::map<std::vector<int>, long> hyp_counts;
      for (size_t i = 0; i + n <= h.size(); ++i)
        hyp_counts[std::vector<int>(h.begin() + i, h.begin() + i + n)]++;
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        matched[size_t(n - 1)] += std::min(count, it == ref_counts.end() ? 0L : it->second);
      }
      total[size_t(n - 1)] += long(h.size()) - n + 1;
    }
  }
  double log_precision = 0.0;
  for (int n = 1; n <= max_ngram; ++n) {
    double num = double(matched[size_t(n - 1)]);
    double den = double(total[size_t(n - 1)]);
    if (n > 1) {
      num += 1.0;
      den += 1.0;
    }
    if (num <= 0.0 || den <= 0.0) return 0.0;
    log_precision += std::log(num / den) / max_ngram;
  }
  if (hyp_len == 0) return 0.0;
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
  return 100.0 * bp * std::exp(log_precision);
}

struct Hypothesis {
  int src_lang = 0;
  int tgt_lang = 0;  // intended target language
  std::vector<int> tokens;
};

// A sentence is off-target unless its intended language holds a strict
// plurality among the non-special tokens. Exact because every surface token
// identifies its language. Empty hypotheses count as off-target.
inline double off_target_ratio(const std::vector<Hypothesis>& hypotheses, const Vocabulary& vocab) {
  if (hypotheses.empty()) return 0.0;
  long off = 0;
  for (const auto& hyp : hypotheses) {
    std::map<int, long> counts;
    for (int t : hyp.tokens) {
      const int lang = vocab.surface_language(t);
      if (lang >= 0) counts[lang]++;
    }
    const long intended = counts.count(hyp.tgt_lang) ? counts[hyp.tgt_lang] : 0;
    bool on_target = intended > 0;
    for (const auto& [lang, count] : counts)
      if (lang != hyp.tgt_lang && count >= intended) on_target = false;
    if (!on_target) ++off;
  }
  return 100.0 * double(off) / double(hypotheses.size());
}

// Register-to-source attention statistics. For each register row the
// head-mean attention (averaged over layers unless one is fixed) is
// restricted to the source columns without renormalization; top-1/top-2
// masses, their positional distance, and the per-sentence entropy of which
// source index wins top-1 are aggregated.
struct AttentionStats {
  double top1_score = 0.0;
  double top2_score = 0.0;
  double dist = 0.0;
  double entropy = 0.0;
  long registers_seen = 0;
  long sentences = 0;
};

inline AttentionStats register_attention_stats(const Model& model,
                                               const std::vector<TranslationInstance>& instances,
                                               const Vocabulary& vocab, int layer = -1) {
  if (model.config.variant != Variant::registering && model.config.variant != Variant::ratio)
    throw std::invalid_argument("register_attention_stats: variant '" +
                                std::string(variant_name(model.config.variant)) +
                                "' has no register block");
  AttentionStats stats;
  double top1_sum = 0.0, top2_sum = 0.0, dist_sum = 0.0, entropy_sum = 0.0;
  long dist_count = 0;
  for (const auto& inst : instances) {
    auto packed = pack_instance(inst, vocab, model.config.variant, model.config.ratio);
    auto mask = build_mask(packed.layout);
    const int L = packed.layout.total_len();
    std::vector<double> attn(size_t(L) * L, 0.0);
    const int first = layer >= 0 ? layer : 0;
    const int last = layer >= 0 ? layer : model.config.n_layers - 1;
    for (int li = first; li <= last; ++li) {
      auto m = extract_attention(model, packed.ids, packed.layout, mask, li, -1);
      for (size_t i = 0; i < attn.size(); ++i) attn[i] += m[i];
    }
    const double inv_layers = 1.0 / double(last - first + 1);
    for (auto& a : attn) a *= inv_layers;

    const int s = packed.layout.src_len;
    std::map<int, long> top1_histogram;
    for (int i = 0; i < packed.layout.reg_len; ++i) {
      const double* row = attn.data() + size_t(packed.layout.reg_begin() + i) * L;
      int best = 0, second = -1;
      for (int c = 1; c < s; ++c)
        if (row[c] > row[best]) best = c;
      for (int c = 0; c < s; ++c) {
        if (c == best) continue;
        if (second < 0 || row[c] > row[second]) second = c;
      }
      top1_sum += row[best];
      stats.registers_seen += 1;
      top1_histogram[best] += 1;
      if (second >= 0) {
        top2_sum += row[second];
        dist_sum += std::abs(best - second);
        dist_count += 1;
      }
    }
    double entropy = 0.0;
    for (const auto& [index, count] : top1_histogram) {
      const double p = double(count) / double(packed.layout.reg_len);
      entropy -= p * std::log(p);
    }
    entropy_sum += entropy;
    stats.sentences += 1;
  }
  if (stats.registers_seen == 0) throw std::invalid_argument("register_attention_stats: no registers");
  stats.top1_score = top1_sum / double(stats.registers_seen);
  stats.top2_score = dist_count ? top2_sum / double(dist_count) : 0.0;
  stats.dist = dist_count ? dist_sum / double(dist_count) : 0.0;
  stats.entropy = entropy_sum / double(stats.sentences);
  return stats;
}

// Mean-pooled block representations per layer and their pairwise cosines,
// averaged over instances.
struct LayerSimilarity {
  std::vector<double> src_reg, reg_tgt, src_tgt;  // indexed by layer, 0 = embeddings
};

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::vector<double> mean_pool_rows(const std::vector<double>& flat, int d, int row_begin,
                                          int row_end) {
  std::vector<double> out(size_t(d), 0.0);
  for (int r = row_begin; r < row_end; ++r)
    for (int j = 0; j < d; ++j) out[size_t(j)] += flat[size_t(r) * d + j];
  const double inv = 1.0 / double(row_end - row_begin);
  for (auto& v : out) v *= inv;
  return out;
}

}  // namespace detail

inline LayerSimilarity layer_similarity(const Model& model,
                                        const std::vector<TranslationInstance>& instances,
                                        const Vocabulary& vocab) {
  if (instances.empty()) throw std::invalid_argument("layer_similarity: no instances");
  const int layers = model.config.n_layers + 1;
  LayerSimilarity sim;
  sim.src_reg.assign(size_t(layers), 0.0);
  sim.reg_tgt.assign(size_t(layers), 0.0);
  sim.src_tgt.assign(size_t(layers), 0.0);
  const int d = model.config.d_model;
  for (const auto& inst : instances) {
    auto packed = pack_instance(inst, vocab, model.config.variant, model.config.ratio);
    if (packed.layout.reg_len == 0)
      throw std::invalid_argument("layer_similarity: variant has no register block");
    auto mask = build_mask(packed.layout);
    autograd::NoGradGuard ng;
    ForwardTrace trace;
    trace.want_hidden = true;
    ForwardOptions opts;
    opts.trace = &trace;
    opts.compute_logits = false;
    forward(model, packed.ids, packed.layout, mask, opts);
    for (int li = 0; li < layers; ++li) {
      const auto& flat = trace.hidden[size_t(li)];
      auto src = detail::mean_pool_rows(flat, d, 0, packed.layout.src_len);
      auto reg = detail::mean_pool_rows(flat, d, packed.layout.reg_begin(), packed.layout.tgt_begin());
      auto tgt = detail::mean_pool_rows(flat, d, packed.layout.tgt_begin(), packed.layout.total_len());
      sim.src_reg[size_t(li)] += detail::cosine(src, reg);
      sim.reg_tgt[size_t(li)] += detail::cosine(reg, tgt);
      sim.src_tgt[size_t(li)] += detail::cosine(src, tgt);
    }
  }
  const double inv = 1.0 / double(instances.size());
  for (int li = 0; li < layers; ++li) {
    sim.src_reg[size_t(li)] *= inv;
    sim.reg_tgt[size_t(li)] *= inv;
    sim.src_tgt[size_t(li)] *= inv;
  }
  return sim;
}

// One row per token: d feature columns then block, lang, direction labels.
inline void export_hidden(const Model& model, const std::vector<TranslationInstance>& instances,
                          const Vocabulary& vocab, int layer, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  const int d = model.config.d_model;
  out << "f0";
  for (int j = 1; j < d; ++j) out << ",f" << j;
  out << ",block,lang,direction\n";
  char buffer[64];
  for (const auto& inst : instances) {
    auto packed = pack_instance(inst, vocab, model.config.variant, model.config.ratio);
    auto mask = build_mask(packed.layout);
    auto hidden = extract_hidden(model, packed.ids, packed.layout, mask, layer);
    const std::string direction = std::to_string(inst.src_lang) + "->" + std::to_string(inst.tgt_lang);
    for (int r = 0; r < packed.layout.total_len(); ++r) {
      for (int j = 0; j < d; ++j) {
        std::snprintf(buffer, sizeof(buffer), "%.17g", hidden[size_t(r) * d + j]);
        out << buffer << ',';
      }
      const char* block = r < packed.layout.src_len
                              ? "src"
                              : (r < packed.layout.tgt_begin() ? "reg" : "tgt");
      const int lang = r < packed.layout.src_len ? inst.src_lang : inst.tgt_lang;
      out << block << ',' << lang << ',' << direction << '\n';
    }
  }
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

// Per-direction and aggregate evaluation results.
struct DirectionResult {
  int src_lang = 0, tgt_lang = 0;
  bool supervised = false;
  long count = 0;
  double bleu_score = 0.0;
  double exact_match = 0.0;      // percentage
  double off_target = 0.0;       // percentage
};

struct MetricReport {
  std::vector<DirectionResult> directions;
  double supervised_bleu = 0.0, zero_shot_bleu = 0.0, overall_bleu = 0.0;
  double supervised_accuracy = 0.0, zero_shot_accuracy = 0.0, overall_accuracy = 0.0;
  double supervised_off_target = 0.0, zero_shot_off_target = 0.0, overall_off_target = 0.0;
};

namespace detail {

struct Weighted {
  double sum = 0.0;
  long weight = 0;
  void add(double value, long w) {
    sum += value * double(w);
    weight += w;
  }
  double mean() const { return weight ? sum / double(weight) : 0.0; }
};

}  // namespace detail

// Decodes the test split (parallel across instances) and aggregates
// per-direction BLEU, exact-match accuracy, and off-target ratio into
// supervised / zero-shot / overall groups weighted by instance counts.
inline MetricReport evaluate(const Model& model, const SyntheticCorpus& corpus, int beam) {
  if (corpus.test.empty()) throw std::invalid_argument("evaluate: empty test split");
  std::vector<std::vector<int>> hyps(corpus.test.size());
  parallel_for(corpus.test.size(), [&](size_t i, int) {
    hyps[i] = translate_instance(model, corpus.test[i], corpus.vocab, beam);
  });

  std::map<std::pair<int, int>, std::vector<size_t>> by_direction;
  for (size_t i = 0; i < corpus.test.size(); ++i)
    by_direction[{corpus.test[i].src_lang, corpus.test[i].tgt_lang}].push_back(i);

  MetricReport report;
  detail::Weighted bleu_sup, bleu_zero, bleu_all;
  detail::Weighted acc_sup, acc_zero, acc_all;
  detail::Weighted off_sup, off_zero, off_all;
  for (const auto& [direction, indices] : by_direction) {
    DirectionResult r;
    r.src_lang = direction.first;
    r.tgt_lang = direction.second;
    r.supervised = corpus.graph.is_supervised(direction.first, direction.second);
    r.count = long(indices.size());
    std::vector<std::vector<int>> dir_hyps, dir_refs;
    std::vector<Hypothesis> tagged;
    long exact = 0;
    for (size_t idx : indices) {
      dir_hyps.push_back(hyps[idx]);
      dir_refs.push_back(corpus.test[idx].y);
      tagged.push_back({direction.first, direction.second, hyps[idx]});
      if (hyps[idx] == corpus.test[idx].y) ++exact;
    }
    r.bleu_score = bleu(dir_hyps, dir_refs);
    r.exact_match = 100.0 * double(exact) / double(indices.size());
    r.off_target = off_target_ratio(tagged, corpus.vocab);
    report.directions.push_back(r);

    auto& bleu_group = r.supervised ? bleu_sup : bleu_zero;
    auto& acc_group = r.supervised ? acc_sup : acc_zero;
    auto& off_group = r.supervised ? off_sup : off_zero;
    bleu_group.add(r.bleu_score, r.count);
    acc_group.add(r.exact_match, r.count);
    off_group.add(r.off_target, r.count);
    bleu_all.add(r.bleu_score, r.count);
    acc_all.add(r.exact_match, r.count);
    off_all.add(r.off_target, r.count);
  }
  report.supervised_bleu = bleu_sup.mean();
  report.zero_shot_bleu = bleu_zero.mean();
  report.overall_bleu = bleu_all.mean();
  report.supervised_accuracy = acc_sup.mean();
  report.zero_shot_accuracy = acc_zero.mean();
  report.overall_accuracy = acc_all.mean();
  report.supervised_off_target = off_sup.mean();
  report.zero_shot_off_target = off_zero.mean();
  report.overall_off_target = off_all.mean();
  return report;
}

inline nlohmann::json report_to_json(const MetricReport& report) {
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& d : report.directions)
    dirs.push_back({{"src", d.src_lang},
                    {"tgt", d.tgt_lang},
                    {"supervised", d.supervised},
                    {"count", d.count},
                    {"bleu", d.bleu_score},
                    {"exact_match", d.exact_match},
                    {"off_target", d.off_target}});
  return {{"per_direction", dirs},
          {"supervised", {{"bleu", report.supervised_bleu},
                          {"exact_match", report.supervised_accuracy},
                          {"off_target", report.supervised_off_target}}},
          {"zero_shot", {{"bleu", report.zero_shot_bleu},
                         {"exact_match", report.zero_shot_accuracy},
                         {"off_target", report.zero_shot_off_target}}},
          {"overall", {{"bleu", report.overall_bleu},
                       {"exact_match", report.overall_accuracy},
                       {"off_target", report.overall_off_target}}}};
}

inline void write_direction_csv(const MetricReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "src,tgt,supervised,count,bleu,exact_match,off_target\n";
  char buffer[160];
  for (const auto& d : report.directions) {
    std::snprintf(buffer, sizeof(buffer), "%d,%d,%d,%ld,%.6f,%.6f,%.6f\n", d.src_lang, d.tgt_lang,
                  d.supervised ? 1 : 0, d.count, d.bleu_score, d.exact_match, d.off_target);
    out << buffer;
  }
}

}  // namespace regformer
