#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "regformer/corpus.hpp"
#include "regformer/model.hpp"

namespace regformer {

// Key/value rows retained for one layer during decoding, [entries, d].
struct LayerCache {
  std::vector<double> k, v;
  int entries = 0;
};

// Two-phase decode state. The prefix phase runs source and register rows
// once; under registering the source rows' K/V never enter the retained
// cache (generation reads registers only), so the cache grows from reg_len.
// keep_source_kv retains the source rows anyway, marked invisible — useful
// for demonstrating that their content cannot influence generation.
struct DecodeState {
  const Model* model = nullptr;
  int src_len = 0;
  int reg_len = 0;
  Variant variant = Variant::vanilla;
  double ratio = 1.0;
  std::vector<LayerCache> layers;
  std::vector<uint8_t> cache_visible;  // per retained entry
  std::vector<int> generated;
  int inputs_consumed = 0;
  long attended_keys_total = 0;
  int attended_keys_last = 0;

  int cache_entries() const { return layers.empty() ? 0 : layers[0].entries; }
  int next_position() const { return src_len + reg_len + inputs_consumed; }
};

namespace detail {

inline SequenceLayout prefix_layout(int src_len, Variant variant, double ratio) {
  SequenceLayout lo;
  lo.src_len = src_len;
  lo.reg_len = register_length_for(variant, src_len, ratio);
  lo.tgt_len = 0;
  lo.variant = variant;
  lo.ratio = ratio;
  lo.positions.resize(size_t(lo.total_len()));
  for (int i = 0; i < lo.total_len(); ++i) lo.positions[size_t(i)] = i;
  return lo;
}

// Row softmax with per-column visibility, same arithmetic as the packed
// masked_softmax so cached and full-sequence paths agree bit for bit.
inline Tensor masked_softmax_row(const Tensor& scores, const std::vector<uint8_t>& visible) {
  const int n = scores.dim(1);
  if (int(visible.size()) != n) throw std::invalid_argument("masked_softmax_row: size mismatch");
  Tensor out = Tensor::zeros(scores.shape());
  const double* s = scores.data().data();
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < n; ++c) {
    const double z = s[c] + (visible[size_t(c)] ? 0.0 : kMaskFill);
    if (z > mx) mx = z;
  }
  auto& o = out.data_mut();
  double sum = 0.0;
  for (int c = 0; c < n; ++c) {
    const double z = s[c] + (visible[size_t(c)] ? 0.0 : kMaskFill);
    const double e = std::exp(z - mx);
    o[size_t(c)] = e;
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (int c = 0; c < n; ++c) o[size_t(c)] *= inv;
  return out;
}

}  // namespace detail

struct PrefixOptions {
  bool keep_source_kv = false;
};

// Runs the bidirectional prefix pass over x' and the register block and
// retains the per-layer K/V needed for generation.
inline DecodeState precompute_prefix(const Model& model, const std::vector<int>& x_prime,
                                     const PrefixOptions& popts = {}) {
  if (x_prime.size() < 2 || !model.config.vocab_size)
    throw std::invalid_argument("precompute_prefix: malformed source sequence");
  const auto& cfg = model.config;
  DecodeState st;
  st.model = &model;
  st.src_len = int(x_prime.size());
  st.variant = cfg.variant;
  st.ratio = cfg.ratio;
  auto layout = detail::prefix_layout(st.src_len, cfg.variant, cfg.ratio);
  st.reg_len = layout.reg_len;
  if (layout.total_len() + 1 > cfg.max_positions)
    throw std::invalid_argument("precompute_prefix: sequence exceeds max_positions");
  auto mask = build_mask(layout);

  std::vector<int> ids = x_prime;
  for (int i = 0; i < st.reg_len; ++i) ids.push_back(x_prime[0]);  // duplicate the tag

  autograd::NoGradGuard ng;
  KvCapture kv;
  ForwardOptions opts;
  opts.kv = &kv;
  opts.compute_logits = false;
  forward(model, ids, layout, mask, opts);

  // retained rows: everything generation may read under this variant
  int begin = 0, end = layout.total_len();
  bool source_retained = true;
  if (cfg.variant == Variant::registering || cfg.variant == Variant::ratio) {
    if (popts.keep_source_kv) {
      begin = 0;
    } else {
      begin = st.src_len;
      source_retained = false;
    }
  }
  const int d = cfg.d_model;
  st.layers.resize(size_t(cfg.n_layers));
  for (int li = 0; li < cfg.n_layers; ++li) {
    auto& lc = st.layers[size_t(li)];
    lc.entries = end - begin;
    lc.k.assign(kv.k[size_t(li)].begin() + size_t(begin) * d,
                kv.k[size_t(li)].begin() + size_t(end) * d);
    lc.v.assign(kv.v[size_t(li)].begin() + size_t(begin) * d,
                kv.v[size_t(li)].begin() + size_t(end) * d);
  }
  st.cache_visible.assign(size_t(end - begin), 1);
  if ((cfg.variant == Variant::registering || cfg.variant == Variant::ratio) && source_retained)
    for (int i = 0; i < st.src_len; ++i) st.cache_visible[size_t(i)] = 0;
  return st;
}

// Feeds one decoder input token and returns the next-token logits [V].
inline std::vector<double> decode_step(DecodeState& st, int token) {
  const Model& model = *st.model;
  const auto& cfg = model.config;
  const int d = cfg.d_model, dh = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(double(dh));
  const int pos = st.next_position();
  if (pos + 1 > cfg.max_positions)
    throw std::invalid_argument("decode_step: position exceeds max_positions");

  autograd::NoGradGuard ng;
  Tensor h = scale(embedding_lookup(model.params.embedding, {token}), std::sqrt(double(d)));
  h = add(h, sinusoidal_positions(pos, 1, d));

  st.cache_visible.push_back(1);  // self
  int visible_now = 0;
  for (uint8_t f : st.cache_visible) visible_now += f ? 1 : 0;
  st.attended_keys_last = visible_now;
  st.attended_keys_total += visible_now;

  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& lp = model.params.layers[size_t(li)];
    const LoraLayer* lora = model.lora ? &model.lora->layers[size_t(li)] : nullptr;
    auto& lc = st.layers[size_t(li)];
    Tensor a = layer_norm(h, lp.ln1_g, lp.ln1_b);
    Tensor q = lora ? detail::project_lora(a, lp.wq, lp.bq, lora->q_a, lora->q_b)
                    : detail::project(a, lp.wq, lp.bq);
    Tensor k = detail::project(a, lp.wk, lp.bk);
    Tensor v = lora ? detail::project_lora(a, lp.wv, lp.bv, lora->v_a, lora->v_b)
                    : detail::project(a, lp.wv, lp.bv);
    lc.k.insert(lc.k.end(), k.data().begin(), k.data().end());
    lc.v.insert(lc.v.end(), v.data().begin(), v.data().end());
    lc.entries += 1;

    Tensor kc = Tensor::from({lc.entries, d}, lc.k);
    Tensor vc = Tensor::from({lc.entries, d}, lc.v);
    std::vector<Tensor> heads;
    heads.reserve(size_t(cfg.n_heads));
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(kc, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(vc, hd * dh, (hd + 1) * dh);
      Tensor probs = detail::masked_softmax_row(scale(matmul_nt(qh, kh), att_scale), st.cache_visible);
      heads.push_back(matmul(probs, vh));
    }
    Tensor attn_out = detail::project(concat_cols(heads), lp.wo, lp.bo);
    h = add(h, attn_out);
    Tensor f = layer_norm(h, lp.ln2_g, lp.ln2_b);
    f = gelu(detail::project(f, lp.w1, lp.b1));
    f = detail::project(f, lp.w2, lp.b2);
    h = add(h, f);
  }
  st.inputs_consumed += 1;
  Tensor hn = layer_norm(h, model.params.final_ln_g, model.params.final_ln_b);
  return matmul_nt(hn, model.params.embedding).data();
}

inline int default_max_len(int src_len) { return 2 * src_len + 8; }

// Greedy decoding; argmax ties break toward the lowest token id.
inline std::vector<int> decode_greedy(DecodeState state, int max_len) {
  if (max_len < 1) throw std::invalid_argument("decode_greedy: max_len must be >= 1");
  std::vector<int> out;
  int prev = kBosId;
  for (int step = 0; step < max_len; ++step) {
    const auto logits = decode_step(state, prev);
    int best = 0;
    for (int i = 1; i < int(logits.size()); ++i)
      if (logits[size_t(i)] > logits[size_t(best)]) best = i;
    if (best == kEosId) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

struct BeamHypothesis {
  std::vector<int> tokens;  // includes the closing eos once finished
  double log_prob = 0.0;
  bool finished = false;
};

namespace detail {

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline double rank_score(const BeamHypothesis& h, bool length_norm) {
  if (!length_norm) return h.log_prob;
  return h.log_prob / double(std::max<size_t>(1, h.tokens.size()));
}

}  // namespace detail

// Standard beam search over any copyable scorer exposing
//   std::vector<double> step(int token);   // consume token, return logits
// Hypotheses are ranked by log-probability (optionally length-normalized);
// exact ties resolve toward the lower token id, then the earlier parent.
template <class Scorer>
inline BeamHypothesis beam_search(const Scorer& initial, int beam, int max_len,
                                  bool length_norm = true, int bos_id = kBosId,
                                  int eos_id = kEosId) {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");

  struct Live {
    Scorer scorer;
    BeamHypothesis hyp;
  };
  std::vector<Live> live;
  live.push_back({initial, {}});
  std::vector<BeamHypothesis> finished;

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Candidate {
      size_t parent;
      int token;
      double log_prob;
    };
    std::vector<Candidate> candidates;
    for (size_t pi = 0; pi < live.size(); ++pi) {
      auto& parent = live[pi];
      const int prev = parent.hyp.tokens.empty() ? bos_id : parent.hyp.tokens.back();
      const auto logp = detail::log_softmax(parent.scorer.step(prev));
      for (int t = 0; t < int(logp.size()); ++t)
        candidates.push_back({pi, t, parent.hyp.log_prob + logp[size_t(t)]});
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });
    // fill beam live slots; eos candidates retire to the finished pool and
    // do not occupy live slots (at most 2*beam candidates considered)
    std::vector<Live> next;
    int considered = 0;
    for (const auto& c : candidates) {
      if (int(next.size()) >= beam || considered >= 2 * beam) break;
      ++considered;
      BeamHypothesis hyp = live[c.parent].hyp;
      hyp.tokens.push_back(c.token);
      hyp.log_prob = c.log_prob;
      if (c.token == eos_id) {
        hyp.finished = true;
        finished.push_back(std::move(hyp));
      } else {
        next.push_back({live[c.parent].scorer, std::move(hyp)});
      }
    }
    live = std::move(next);
  }
  for (auto& l : live) finished.push_back(l.hyp);  // ran out of length
  if (finished.empty()) return {};

  auto best = finished.begin();
  for (auto it = finished.begin() + 1; it != finished.end(); ++it) {
    const double a = detail::rank_score(*it, length_norm);
    const double b = detail::rank_score(*best, length_norm);
    if (a > b || (a == b && it->tokens < best->tokens)) best = it;
  }
  return *best;
}

// Scorer over the cached incremental model path.
struct ModelScorer {
  DecodeState state;
  std::vector<double> step(int token) { return decode_step(state, token); }
};

// Beam decode from a prepared prefix state; returns generated ids without
// the closing eos.
inline std::vector<int> decode_beam(const DecodeState& state, int beam, int max_len,
                                    bool length_norm = true) {
  ModelScorer scorer{state};
  BeamHypothesis best = beam_search(scorer, beam, max_len, length_norm);
  std::vector<int> out = best.tokens;
  if (!out.empty() && out.back() == kEosId) out.pop_back();
  return out;
}

// End-to-end translation of one instance.
inline std::vector<int> translate_instance(const Model& model, const TranslationInstance& inst,
                                           const Vocabulary& vocab, int beam,
                                           bool length_norm = true) {
  const auto x_prime = encode_source(inst, vocab);
  DecodeState st = precompute_prefix(model, x_prime);
  const int max_len = default_max_len(int(x_prime.size()));
  if (beam == 1) return decode_greedy(st, max_len);
  return decode_beam(st, beam, max_len, length_norm);
}

}  // namespace regformer
