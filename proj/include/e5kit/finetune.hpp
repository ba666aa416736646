// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "e5kit/contrastive.hpp"
#include "e5kit/encoder.hpp"
#include "e5kit/errors.hpp"
#include "e5kit/rng.hpp"
#include "e5kit/tensor.hpp"

namespace e5kit {

struct FinetuneExample {
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;
  std::optional<std::vector<double>> teacher_scores;  // m + 1 entries, positive first

  void validate() const {
    if (negatives.empty()) throw ValidationError("example needs at least one hard negative");
    if (teacher_scores) {
      if (teacher_scores->size() != negatives.size() + 1) {
        throw ValidationError("teacher_scores has " + std::to_string(teacher_scores->size()) +
                              " entries, expected " + std::to_string(negatives.size() + 1));
      }
      for (double v : *teacher_scores) {
        if (!std::isfinite(v)) throw ValidationError("teacher_scores must be finite");
      }
    }
  }

  friend bool operator==(const FinetuneExample&, const FinetuneExample&) = default;
};

struct FinetuneConfig {
  double alpha = 0.2;
  std::size_t hard_negatives = 7;
  double tau = 0.01;
  std::size_t epochs = 3;
  std::size_t batch_size = 256;
  double peak_lr = 1e-3;
  std::uint64_t warmup_steps = 400;
  AdamWConfig adamw;
  bool use_kd = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigurationError("alpha must be >= 0");
    if (hard_negatives < 1) throw ConfigurationError("hard_negatives must be >= 1");
    if (!(tau > 0.0)) throw ConfigurationError("temperature must be > 0");
    if (batch_size < 1) throw ConfigurationError("batch_size must be >= 1");
  }
};

struct KdResult {
  double loss = 0.0;
  std::vector<double> grad;  // d(loss)/d(student scores)
};

// KL(softmax(teacher) || softmax(student)) and its gradient p_stu - p_ce.
inline KdResult kd_loss(std::span<const double> teacher, std::span<const double> student) {
  if (teacher.size() != student.size()) {
    throw DimensionError("kd_loss: teacher has " + std::to_string(teacher.size()) + " scores, student " +
                         std::to_string(student.size()));
  }
  if (teacher.size() < 2) throw DimensionError("kd_loss: need at least 2 candidates");
  const double lse_t = logsumexp_row(teacher);
  const double lse_s = logsumexp_row(student);
  KdResult out{0.0, std::vector<double>(student.size())};
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const double log_pt = teacher[i] - lse_t;
    const double log_ps = student[i] - lse_s;
    const double pt = std::exp(log_pt);
    if (pt > 0.0) out.loss += pt * (log_pt - log_ps);
    out.grad[i] = std::exp(log_ps) - pt;
  }
  return out;
}

// Candidate columns for row i of a fine-tuning batch scored against the
// passage block [positives (B) | negatives (B*m)]: own positive first, then
// own hard negatives, then the other examples' positives.
inline std::vector<std::size_t> finetune_candidate_columns(std::size_t batch, std::size_t m, std::size_t i) {
  std::vector<std::size_t> cols;
  cols.reserve(batch + m);
  cols.push_back(i);
  for (std::size_t j = 0; j < m; ++j) cols.push_back(batch + i * m + j);
  for (std::size_t j = 0; j < batch; ++j) {
    if (j != i) cols.push_back(j);
  }
  return cols;
}

struct CombinedLoss {
  double total = 0.0;
  double kd = 0.0;
  double contrastive = 0.0;
  ParamBuffers grads;
};

// mean_i KL(p_ce || p_stu) + alpha * L_cont. KD covers the m + 1 own
// candidates; the contrastive term also sees the other in-batch positives.
template <TrainableEncoder E>
CombinedLoss combined_loss(std::span<const FinetuneExample> batch, E& encoder, const FinetuneConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw EmptyInputError("combined_loss: empty batch");
  const std::size_t B = batch.size(), m = cfg.hard_negatives;
  std::vector<TextInput> qs, ps;
  qs.reserve(B);
  ps.reserve(B * (m + 1));
  for (std::size_t i = 0; i < B; ++i) {
    const auto& ex = batch[i];
    ex.validate();
    if (ex.negatives.size() != m) {
      throw ConfigurationError("example " + std::to_string(i) + " has " + std::to_string(ex.negatives.size()) +
                               " hard negatives, config expects " + std::to_string(m));
    }
    if (cfg.use_kd && !ex.teacher_scores) {
      throw ConfigurationError("example " + std::to_string(i) + " lacks teacher_scores with KD enabled");
    }
    qs.push_back({ex.query, Role::query});
    ps.push_back({ex.positive, Role::passage});
  }
  for (const auto& ex : batch) {
    for (const auto& neg : ex.negatives) ps.push_back({neg, Role::passage});
  }

  const auto fq = encoder.forward(qs);
  const auto fp = encoder.forward(ps);
  const auto cs = cosine_scores(fq.embeddings, fp.embeddings, cfg.tau);
  MatrixD dscores(B, ps.size());
  CombinedLoss out;
  const double inv_b = 1.0 / static_cast<double>(B);
  std::vector<double> row;
  for (std::size_t i = 0; i < B; ++i) {
    const auto cols = finetune_candidate_columns(B, m, i);
    row.resize(cols.size());
    for (std::size_t k = 0; k < cols.size(); ++k) row[k] = cs.scores(i, cols[k]);

    if (cfg.use_kd) {
      const auto kd = kd_loss(*batch[i].teacher_scores, std::span<const double>(row).first(m + 1));
      out.kd += kd.loss * inv_b;
      for (std::size_t k = 0; k <= m; ++k) dscores(i, cols[k]) += kd.grad[k] * inv_b;
    }
    if (cfg.alpha != 0.0) {
      const double lse = logsumexp_row(row);
      out.contrastive += (lse - row[0]) * inv_b;
      for (std::size_t k = 0; k < cols.size(); ++k) {
        const double p = std::exp(row[k] - lse) - (k == 0 ? 1.0 : 0.0);
        dscores(i, cols[k]) += cfg.alpha * p * inv_b;
      }
    }
  }
  out.total = out.kd + cfg.alpha * out.contrastive;
  out.grads = zeros_like(encoder.parameters());
  auto [dq, dp] = cosine_scores_backward(cs, dscores);
  encoder.backward(fq, dq, out.grads);
  encoder.backward(fp, dp, out.grads);
  return out;
}

// Tops up an NLI example that carries one contradiction negative with
// `count` corpus sentences drawn uniformly without replacement, skipping the
// example's own query and positive.
inline FinetuneExample fill_nli_negatives(const FinetuneExample& example, std::span<const std::string> corpus,
                                          std::size_t count, Rng& rng) {
  if (count == 0) return example;
  if (corpus.size() <= count) {
    throw DataStarvationError("corpus of " + std::to_string(corpus.size()) + " sentences cannot supply " +
                              std::to_string(count) + " random negatives");
  }
  std::vector<std::size_t> eligible;
  eligible.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i] != example.query && corpus[i] != example.positive) eligible.push_back(i);
  }
  if (eligible.size() < count) {
    throw DataStarvationError("not enough eligible corpus sentences for random negatives");
  }
  FinetuneExample out = example;
  for (std::size_t pick : rng.sample_without_replacement(eligible.size(), count)) {
    out.negatives.push_back(corpus[eligible[pick]]);
  }
  if (out.teacher_scores) {
    // Random fills carry no teacher signal; reuse the weakest teacher score.
    const double floor = *std::min_element(out.teacher_scores->begin(), out.teacher_scores->end());
    out.teacher_scores->resize(out.negatives.size() + 1, floor);
  }
  return out;
}

struct FinetuneStepLog {
  std::uint64_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double kd = 0.0;
  double contrastive = 0.0;
};

template <class E>
struct FinetuneResult {
  E encoder;
  std::vector<FinetuneStepLog> log;
};

inline std::uint64_t finetune_total_steps(std::size_t examples, const FinetuneConfig& cfg) {
  const std::size_t per_epoch = (examples + cfg.batch_size - 1) / cfg.batch_size;
  return static_cast<std::uint64_t>(per_epoch) * cfg.epochs;
}

// Epochs over the examples, reshuffled per epoch from the seed. The last
// batch of an epoch may be short.
template <TrainableEncoder E>
FinetuneResult<E> finetune(std::span<const FinetuneExample> examples, const FinetuneConfig& cfg, E encoder) {
  cfg.validate();
  if (examples.empty()) throw DataStarvationError("finetune needs at least one example");
  const std::uint64_t total = finetune_total_steps(examples.size(), cfg);
  const LrSchedule schedule{cfg.peak_lr, std::min<std::uint64_t>(cfg.warmup_steps, total), total};
  OptimizerState opt(encoder.parameters(), cfg.adamw);
  FinetuneResult<E> result{std::move(encoder), {}};
  std::vector<std::size_t> order(examples.size());
  std::vector<FinetuneExample> batch;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, epoch));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t k = start; k < end; ++k) batch.push_back(examples[order[k]]);
      auto loss = combined_loss(std::span<const FinetuneExample>(batch), result.encoder, cfg);
      const double lr = lr_at(schedule, step);
      adamw_step(result.encoder.parameters(), loss.grads, opt, lr);
      result.log.push_back({step, lr, loss.total, loss.kd, loss.contrastive});
      ++step;
    }
  }
  return result;
}

}  // namespace e5kit
