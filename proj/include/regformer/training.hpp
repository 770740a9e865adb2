#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "regformer/corpus.hpp"
#include "regformer/model.hpp"
#include "regformer/optimizer.hpp"
#include "regformer/parallel.hpp"

namespace regformer {

struct TrainConfig {
  double lr_peak = 5e-4;
  int warmup_steps = 400;
  int max_steps = 5000;
  int batch_tokens = 2048;
  double label_smoothing = 0.1;
  double sampling_temperature = 5.0;
  uint64_t seed = 1;
  bool lora_mode = false;
  int grad_accum = 1;
  double clip_norm = 1.0;

  void validate() const {
    if (warmup_steps < 1) throw std::invalid_argument("train: warmup_steps must be >= 1");
    if (sampling_temperature <= 0.0) throw std::invalid_argument("train: temperature must be > 0");
    if (lr_peak <= 0.0) throw std::invalid_argument("train: lr_peak must be > 0");
    if (batch_tokens < 8) throw std::invalid_argument("train: batch_tokens too small");
    if (grad_accum < 1) throw std::invalid_argument("train: grad_accum must be >= 1");
  }
};

struct TrainLog {
  struct StepRecord {
    long step;
    double lr;
    double train_loss;
  };
  struct ValidRecord {
    long epoch;
    double valid_loss;
  };
  std::vector<StepRecord> steps;
  std::vector<ValidRecord> valids;
};

// Inverse square root schedule with linear warmup.
inline double lr_schedule(long step, double lr_peak, int warmup) {
  if (step < 1) throw std::invalid_argument("lr_schedule: step starts at 1");
  if (step <= warmup) return lr_peak * double(step) / double(warmup);
  return lr_peak * std::sqrt(double(warmup) / double(step));
}

// Draws a training direction with probability proportional to size^(1/T).
inline std::pair<int, int> sample_direction(
    const std::vector<std::pair<std::pair<int, int>, int>>& edge_sizes, double temperature,
    Rng& rng) {
  if (edge_sizes.empty()) throw std::invalid_argument("sample_direction: no edges");
  std::vector<double> weights;
  weights.reserve(edge_sizes.size());
  double total = 0.0;
  for (const auto& [edge, size] : edge_sizes) {
    if (size <= 0) throw std::invalid_argument("sample_direction: edge sizes must be positive");
    const double w = std::pow(double(size), 1.0 / temperature);
    weights.push_back(w);
    total += w;
  }
  double u = rng.uniform() * total;
  for (size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return edge_sizes[i].first;
  }
  return edge_sizes.back().first;
}

// Training pool indexed by direction for temperature-based batch assembly.
class DirectionPool {
 public:
  explicit DirectionPool(const std::vector<TranslationInstance>& train) {
    for (size_t i = 0; i < train.size(); ++i)
      by_edge_[{train[i].src_lang, train[i].tgt_lang}].push_back(i);
    for (const auto& [edge, idxs] : by_edge_) edge_sizes_.push_back({edge, int(idxs.size())});
  }

  const std::vector<std::pair<std::pair<int, int>, int>>& edge_sizes() const { return edge_sizes_; }

  size_t pick(const std::pair<int, int>& edge, Rng& rng) const {
    const auto& idxs = by_edge_.at(edge);
    return idxs[rng.below(idxs.size())];
  }

 private:
  std::map<std::pair<int, int>, std::vector<size_t>> by_edge_;
  std::vector<std::pair<std::pair<int, int>, int>> edge_sizes_;
};

// Assembles one batch by repeatedly sampling a direction at temperature T
// and an instance within it, until the packed-token budget is reached.
// Fully determined by (seed, step).
inline std::vector<size_t> assemble_batch(const DirectionPool& pool,
                                          const std::vector<TranslationInstance>& train,
                                          const TrainConfig& cfg, Variant variant, double ratio,
                                          long step) {
  Rng rng(mix_seed(cfg.seed, 0x62617463ull, uint64_t(step)));
  std::vector<size_t> batch;
  long budget = cfg.batch_tokens;
  while (budget > 0) {
    const auto edge = sample_direction(pool.edge_sizes(), cfg.sampling_temperature, rng);
    const size_t idx = pool.pick(edge, rng);
    const auto& inst = train[idx];
    const int src_len = int(inst.x.size()) + 2;
    const int tgt_len = int(inst.y.size()) + 1;
    const long cost = src_len + register_length_for(variant, src_len, ratio) + tgt_len;
    if (!batch.empty() && cost > budget) break;
    batch.push_back(idx);
    budget -= cost;
  }
  return batch;
}

struct Trainer {
  Model& model;
  const SyntheticCorpus& corpus;
  TrainConfig cfg;
  AdamState adam;
  long step = 0;
  DirectionPool pool;
  std::vector<NamedTensor> trainable;

  Trainer(Model& m, const SyntheticCorpus& c, const TrainConfig& tc)
      : model(m), corpus(c), cfg(tc), pool(c.train) {
    cfg.validate();
    if (cfg.lora_mode) {
      if (!model.lora)
        throw std::invalid_argument("train: lora mode requires an attached adapter");
      model.base_frozen = true;
    }
    trainable = model.trainable();
    adam.init(trainable);
  }

  // One optimizer step over one (or grad_accum) sampled batches. Gradients
  // from each instance graph land in per-worker sinks and are reduced in
  // worker order, so results are reproducible for a fixed worker count and
  // exactly sequential at REGFORMER_THREADS=1.
  double train_step() {
    step += 1;
    zero_grads(trainable);
    double loss_sum_total = 0.0;
    long token_count_total = 0;
    for (int acc = 0; acc < cfg.grad_accum; ++acc) {
      const long sub = step * cfg.grad_accum + acc;
      auto batch = assemble_batch(pool, corpus.train, cfg, model.config.variant, model.config.ratio,
                                  sub);
      // first pass: token counts fix each instance's loss weight
      std::vector<PackedInstance> packed(batch.size());
      long token_count = 0;
      for (size_t i = 0; i < batch.size(); ++i) {
        packed[i] = pack_instance(corpus.train[batch[i]], corpus.vocab, model.config.variant,
                                  model.config.ratio);
        token_count += packed[i].layout.tgt_len;
      }
      const int workers = thread_count();
      std::vector<GradSink> sinks(static_cast<size_t>(workers));
      std::vector<double> losses(batch.size(), 0.0);
      parallel_for(
          batch.size(),
          [&](size_t i, int worker) {
            Rng drop_rng(mix_seed(cfg.seed, 0x64726f70ull, uint64_t(sub), uint64_t(i)));
            ForwardOptions opts;
            opts.train = true;
            opts.dropout_rng = &drop_rng;
            auto mask = build_mask(packed[i].layout);
            Tensor logits = forward(model, packed[i].ids, packed[i].layout, mask, opts);
            Tensor loss = cross_entropy_label_smoothed(logits, packed[i].targets,
                                                       cfg.label_smoothing, packed[i].ignore);
            const double w = double(packed[i].layout.tgt_len) /
                             (double(token_count) * cfg.grad_accum);
            backward_seeded(loss, w, &sinks[size_t(worker)]);
            losses[i] = loss.item();
          },
          workers);
      for (auto& sink : sinks) sink.flush();
      for (size_t i = 0; i < batch.size(); ++i)
        loss_sum_total += losses[i] * double(packed[i].layout.tgt_len);
      token_count_total += token_count;
    }
    const double batch_loss = loss_sum_total / double(token_count_total);
    if (std::isnan(batch_loss))
      throw std::runtime_error("train_step: NaN loss at step " + std::to_string(step));
    if (cfg.clip_norm > 0.0) clip_grad_norm(trainable, cfg.clip_norm);
    adam_step(trainable, adam, lr_schedule(step, cfg.lr_peak, cfg.warmup_steps));
    return batch_loss;
  }

  // Mean validation loss; no updates, no dropout.
  double validate() const {
    if (corpus.valid.empty()) throw std::invalid_argument("validate: empty validation split");
    const int workers = thread_count();
    std::vector<double> loss_sums(size_t(workers), 0.0);
    std::vector<long> counts(size_t(workers), 0);
    parallel_for(
        corpus.valid.size(),
        [&](size_t i, int worker) {
          autograd::NoGradGuard ng;
          auto packed = pack_instance(corpus.valid[i], corpus.vocab, model.config.variant,
                                      model.config.ratio);
          auto mask = build_mask(packed.layout);
          Tensor logits = forward(model, packed.ids, packed.layout, mask);
          Tensor loss = cross_entropy_label_smoothed(logits, packed.targets, cfg.label_smoothing,
                                                     packed.ignore);
          loss_sums[size_t(worker)] += loss.item() * double(packed.layout.tgt_len);
          counts[size_t(worker)] += packed.layout.tgt_len;
        },
        workers);
    double total = 0.0;
    long count = 0;
    for (int w = 0; w < workers; ++w) {
      total += loss_sums[size_t(w)];
      count += counts[size_t(w)];
    }
    return total / double(count);
  }
};

}  // namespace regformer
