#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "regformer/corpus.hpp"
#include "regformer/layout.hpp"
#include "regformer/optimizer.hpp"
#include "regformer/tensor.hpp"

namespace regformer {

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int max_positions = 512;
  double dropout = 0.1;
  Variant variant = Variant::registering;
  double ratio = 1.0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model < 2 || d_model % 2 != 0)
      throw std::invalid_argument("model: d_model must be even and >= 2");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("model: d_model must be divisible by n_heads");
    if (d_ff < d_model) throw std::invalid_argument("model: d_ff must be >= d_model");
    if (vocab_size < 4) throw std::invalid_argument("model: vocabulary too small");
    if (n_layers < 1) throw std::invalid_argument("model: need at least one layer");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model: dropout must be in [0,1)");
  }
};

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

// The output projection is the embedding tensor itself (weight tying), so
// it never appears as a separate parameter.
struct ModelParams {
  Tensor embedding;  // [V, d]
  std::vector<LayerParams> layers;
  Tensor final_ln_g, final_ln_b;

  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    out.push_back({"embedding", embedding});
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      const auto& lp = layers[l];
      out.push_back({p + "attn.wq", lp.wq});
      out.push_back({p + "attn.bq", lp.bq});
      out.push_back({p + "attn.wk", lp.wk});
      out.push_back({p + "attn.bk", lp.bk});
      out.push_back({p + "attn.wv", lp.wv});
      out.push_back({p + "attn.bv", lp.bv});
      out.push_back({p + "attn.wo", lp.wo});
      out.push_back({p + "attn.bo", lp.bo});
      out.push_back({p + "ff.w1", lp.w1});
      out.push_back({p + "ff.b1", lp.b1});
      out.push_back({p + "ff.w2", lp.w2});
      out.push_back({p + "ff.b2", lp.b2});
      out.push_back({p + "ln1.gain", lp.ln1_g});
      out.push_back({p + "ln1.bias", lp.ln1_b});
      out.push_back({p + "ln2.gain", lp.ln2_g});
      out.push_back({p + "ln2.bias", lp.ln2_b});
    }
    out.push_back({"final_ln.gain", final_ln_g});
    out.push_back({"final_ln.bias", final_ln_b});
    return out;
  }
};

// Low-rank adapters on the query and value projections only. B starts at
// zero so a freshly attached adapter leaves the model unchanged.
struct LoraLayer {
  Tensor q_a, q_b, v_a, v_b;
};

struct LoraAdapter {
  int rank = 8;
  std::vector<LoraLayer> layers;

  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".lora.";
      out.push_back({p + "q_a", layers[l].q_a});
      out.push_back({p + "q_b", layers[l].q_b});
      out.push_back({p + "v_a", layers[l].v_a});
      out.push_back({p + "v_b", layers[l].v_b});
    }
    return out;
  }

  size_t trainable_parameters() const {
    size_t n = 0;
    for (const auto& l : layers) n += l.q_a.size() + l.q_b.size() + l.v_a.size() + l.v_b.size();
    return n;
  }
};

struct Model {
  ModelConfig config;
  ModelParams params;
  std::optional<LoraAdapter> lora;
  bool base_frozen = false;

  std::vector<NamedTensor> trainable() const {
    if (base_frozen && lora) return lora->named();
    auto out = params.named();
    if (lora) {
      auto extra = lora->named();
      out.insert(out.end(), extra.begin(), extra.end());
    }
    return out;
  }
};

// normal(0, 0.02) for embeddings and projection weights, zeros for biases
// and norm biases, ones for norm gains. One sequential stream, fixed order.
inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x696e6974ull));
  const int d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab_size;
  // projections use width-scaled init; the (tied) embedding keeps a small
  // one so initial logits stay near-uniform
  const double std_init = 1.0 / std::sqrt(double(d));
  const double std_embed = 0.02;
  ModelParams p;
  p.embedding = Tensor::randn({v, d}, rng, std_embed, true);
  p.layers.resize(size_t(cfg.n_layers));
  for (auto& lp : p.layers) {
    lp.wq = Tensor::randn({d, d}, rng, std_init, true);
    lp.bq = Tensor::zeros({d}, true);
    lp.wk = Tensor::randn({d, d}, rng, std_init, true);
    lp.bk = Tensor::zeros({d}, true);
    lp.wv = Tensor::randn({d, d}, rng, std_init, true);
    lp.bv = Tensor::zeros({d}, true);
    lp.wo = Tensor::randn({d, d}, rng, std_init, true);
    lp.bo = Tensor::zeros({d}, true);
    lp.w1 = Tensor::randn({d, ff}, rng, std_init, true);
    lp.b1 = Tensor::zeros({ff}, true);
    lp.w2 = Tensor::randn({ff, d}, rng, std_init, true);
    lp.b2 = Tensor::zeros({d}, true);
    lp.ln1_g = Tensor::full({d}, 1.0, true);
    lp.ln1_b = Tensor::zeros({d}, true);
    lp.ln2_g = Tensor::full({d}, 1.0, true);
    lp.ln2_b = Tensor::zeros({d}, true);
  }
  p.final_ln_g = Tensor::full({d}, 1.0, true);
  p.final_ln_b = Tensor::zeros({d}, true);
  return p;
}

inline Model make_model(const ModelConfig& cfg, uint64_t seed) {
  Model m;
  m.config = cfg;
  m.params = init_params(cfg, seed);
  return m;
}

inline LoraAdapter attach_lora(Model& model, int rank, uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("attach_lora: rank must be >= 1");
  Rng rng(mix_seed(seed, 0x6c6f7261ull));
  const int d = model.config.d_model;
  LoraAdapter a;
  a.rank = rank;
  a.layers.resize(size_t(model.config.n_layers));
  for (auto& l : a.layers) {
    l.q_a = Tensor::randn({d, rank}, rng, 0.02, true);
    l.q_b = Tensor::zeros({rank, d}, true);
    l.v_a = Tensor::randn({d, rank}, rng, 0.02, true);
    l.v_b = Tensor::zeros({rank, d}, true);
  }
  model.lora = a;
  model.base_frozen = true;
  return a;
}

// Packed training view of one instance: ids = x' ++ registers ++ (bos ++
// y), per-position prediction targets (y ++ eos in the target block), and
// an ignore mask that is true everywhere outside the target block.
struct PackedInstance {
  std::vector<int> ids;
  std::vector<int> targets;
  std::vector<uint8_t> ignore;
  SequenceLayout layout;
};

inline PackedInstance pack_instance(const TranslationInstance& inst, const Vocabulary& vocab,
                                    Variant variant, double ratio = 1.0) {
  const std::vector<int> x_prime = encode_source(inst, vocab);
  const std::vector<int> y_stream = encode_target(inst);
  const int tgt_len = int(y_stream.size());
  PackedInstance packed;
  packed.layout = build_layout(int(x_prime.size()), tgt_len, variant, ratio);
  const int L = packed.layout.total_len();
  packed.ids.reserve(size_t(L));
  packed.ids.insert(packed.ids.end(), x_prime.begin(), x_prime.end());
  // register slots duplicate the target-language tag; no new parameters
  const int tag = vocab.tag_id(inst.tgt_lang);
  for (int i = 0; i < packed.layout.reg_len; ++i) packed.ids.push_back(tag);
  packed.ids.push_back(kBosId);
  packed.ids.insert(packed.ids.end(), y_stream.begin(), y_stream.end() - 1);
  packed.targets.assign(size_t(L), kPadId);
  packed.ignore.assign(size_t(L), 1);
  const int tb = packed.layout.tgt_begin();
  for (int j = 0; j < tgt_len; ++j) {
    packed.targets[size_t(tb + j)] = y_stream[size_t(j)];
    packed.ignore[size_t(tb + j)] = 0;
  }
  return packed;
}

// Captured per-layer activations from a forward pass (analysis and the
// decode prefix phase).
struct ForwardTrace {
  // hidden[0] is the embedding output; hidden[l] the residual stream after
  // layer l. Each entry is a flat row-major [L, d] snapshot.
  std::vector<std::vector<double>> hidden;
  // attention[layer][head] is a flat [L, L] post-softmax snapshot.
  std::vector<std::vector<std::vector<double>>> attention;
  bool want_hidden = false;
  bool want_attention = false;
};

struct KvCapture {
  // per layer, flat row-major [L, d]
  std::vector<std::vector<double>> k, v;
};

struct ForwardOptions {
  bool train = false;
  Rng* dropout_rng = nullptr;
  ForwardTrace* trace = nullptr;
  KvCapture* kv = nullptr;
  bool compute_logits = true;
};

namespace detail {

inline Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_row_bias(matmul(x, w), b);
}

inline Tensor project_lora(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& a_lo,
                           const Tensor& b_lo) {
  return add(project(x, w, b), matmul(matmul(x, a_lo), b_lo));
}

}  // namespace detail

// Full forward over a packed sequence under the given mask. Returns logits
// [L, V] unless opts.compute_logits is false (then an empty tensor).
inline Tensor forward(const Model& model, const std::vector<int>& ids, const SequenceLayout& layout,
                      const AttentionMask& mask, const ForwardOptions& opts = {}) {
  const auto& cfg = model.config;
  const int L = int(ids.size());
  if (L != layout.total_len())
    throw std::invalid_argument("forward: ids length " + std::to_string(L) +
                                " does not match layout length " + std::to_string(layout.total_len()));
  if (mask.size != L) throw std::invalid_argument("forward: mask size mismatch");
  if (L > cfg.max_positions)
    throw std::invalid_argument("forward: sequence length " + std::to_string(L) +
                                " exceeds max_positions " + std::to_string(cfg.max_positions));
  if (opts.train && cfg.dropout > 0.0 && opts.dropout_rng == nullptr)
    throw std::invalid_argument("forward: training with dropout requires an RNG");

  const int d = cfg.d_model, dh = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(double(dh));
  const double emb_scale = std::sqrt(double(d));
  const bool use_dropout = opts.train && cfg.dropout > 0.0;

  Tensor h = scale(embedding_lookup(model.params.embedding, ids), emb_scale);
  h = add(h, sinusoidal_positions(layout.positions.empty() ? 0 : layout.positions[0], L, d));
  if (use_dropout) h = dropout(h, cfg.dropout, *opts.dropout_rng);
  if (opts.trace && opts.trace->want_hidden) {
    opts.trace->hidden.clear();
    opts.trace->hidden.push_back(h.data());
  }
  if (opts.trace && opts.trace->want_attention) opts.trace->attention.assign(size_t(cfg.n_layers), {});
  if (opts.kv) {
    opts.kv->k.assign(size_t(cfg.n_layers), {});
    opts.kv->v.assign(size_t(cfg.n_layers), {});
  }

  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& lp = model.params.layers[size_t(li)];
    const LoraLayer* lora = model.lora ? &model.lora->layers[size_t(li)] : nullptr;
    Tensor a = layer_norm(h, lp.ln1_g, lp.ln1_b);
    Tensor q = lora ? detail::project_lora(a, lp.wq, lp.bq, lora->q_a, lora->q_b)
                    : detail::project(a, lp.wq, lp.bq);
    Tensor k = detail::project(a, lp.wk, lp.bk);
    Tensor v = lora ? detail::project_lora(a, lp.wv, lp.bv, lora->v_a, lora->v_b)
                    : detail::project(a, lp.wv, lp.bv);
    if (opts.kv) {
      opts.kv->k[size_t(li)] = k.data();
      opts.kv->v[size_t(li)] = v.data();
    }
    std::vector<Tensor> heads;
    heads.reserve(size_t(cfg.n_heads));
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor probs = masked_softmax(scale(matmul_nt(qh, kh), att_scale), mask.visible, L);
      if (opts.trace && opts.trace->want_attention)
        opts.trace->attention[size_t(li)].push_back(probs.data());
      if (use_dropout) probs = dropout(probs, cfg.dropout, *opts.dropout_rng);
      heads.push_back(matmul(probs, vh));
    }
    Tensor attn_out = detail::project(concat_cols(heads), lp.wo, lp.bo);
    if (use_dropout) attn_out = dropout(attn_out, cfg.dropout, *opts.dropout_rng);
    h = add(h, attn_out);

    Tensor f = layer_norm(h, lp.ln2_g, lp.ln2_b);
    f = gelu(detail::project(f, lp.w1, lp.b1));
    f = detail::project(f, lp.w2, lp.b2);
    if (use_dropout) f = dropout(f, cfg.dropout, *opts.dropout_rng);
    h = add(h, f);
    if (opts.trace && opts.trace->want_hidden) opts.trace->hidden.push_back(h.data());
  }

  if (!opts.compute_logits) return Tensor();
  Tensor hn = layer_norm(h, model.params.final_ln_g, model.params.final_ln_b);
  return matmul_nt(hn, model.params.embedding);  // tied output projection
}

// Post-softmax attention matrix at one layer; head = -1 averages heads.
inline std::vector<double> extract_attention(const Model& model, const std::vector<int>& ids,
                                             const SequenceLayout& layout, const AttentionMask& mask,
                                             int layer, int head) {
  if (layer < 0 || layer >= model.config.n_layers)
    throw std::out_of_range("extract_attention: layer " + std::to_string(layer) + " out of range");
  if (head < -1 || head >= model.config.n_heads)
    throw std::out_of_range("extract_attention: head " + std::to_string(head) + " out of range");
  autograd::NoGradGuard ng;
  ForwardTrace trace;
  trace.want_attention = true;
  ForwardOptions opts;
  opts.trace = &trace;
  opts.compute_logits = false;
  forward(model, ids, layout, mask, opts);
  const auto& per_head = trace.attention[size_t(layer)];
  if (head >= 0) return per_head[size_t(head)];
  std::vector<double> mean(per_head[0].size(), 0.0);
  for (const auto& m : per_head)
    for (size_t i = 0; i < m.size(); ++i) mean[i] += m[i];
  const double inv = 1.0 / double(per_head.size());
  for (auto& x : mean) x *= inv;
  return mean;
}

// Residual-stream states after the given layer (0 = embedding output).
inline std::vector<double> extract_hidden(const Model& model, const std::vector<int>& ids,
                                          const SequenceLayout& layout, const AttentionMask& mask,
                                          int layer) {
  if (layer < 0 || layer > model.config.n_layers)
    throw std::out_of_range("extract_hidden: layer " + std::to_string(layer) + " out of range");
  autograd::NoGradGuard ng;
  ForwardTrace trace;
  trace.want_hidden = true;
  ForwardOptions opts;
  opts.trace = &trace;
  opts.compute_logits = false;
  forward(model, ids, layout, mask, opts);
  return trace.hidden[size_t(layer)];
}

}  // namespace regformer
