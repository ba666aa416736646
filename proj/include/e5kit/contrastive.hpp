// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "e5kit/encoder.hpp"
#include "e5kit/errors.hpp"
#include "e5kit/rng.hpp"
#include "e5kit/tensor.hpp"

namespace e5kit {

// A (query, passage) training pair plus its source tag.
struct TextPair {
  std::string query;
  std::string passage;
  std::string source;

  friend bool operator==(const TextPair&, const TextPair&) = default;
};

// ---------------------------------------------------------------------------
// Temperature-scaled cosine scores

struct CosineScores {
  MatrixD scores;  // n x c, cos / tau
  MatrixD q_unit;
  MatrixD p_unit;
  std::vector<double> q_norm;
  std::vector<double> p_norm;
  double tau = 1.0;
};

namespace detail {

inline void normalize_rows(const MatrixD& m, MatrixD& unit, std::vector<double>& norms, const char* side) {
  unit = m;
  norms.assign(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = norm(m.row(i));
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw DegenerateEmbeddingError(std::string(side) + " row " + std::to_string(i) + " has zero norm");
    }
    norms[i] = n;
    for (double& v : unit.row(i)) v /= n;
  }
}

}  // namespace detail

inline CosineScores cosine_scores(const MatrixD& q, const MatrixD& p, double tau) {
  if (!(tau > 0.0)) throw ConfigurationError("temperature must be > 0");
  if (q.cols() != p.cols()) throw DimensionError("score_matrix: embedding widths differ");
  CosineScores cs;
  cs.tau = tau;
  detail::normalize_rows(q, cs.q_unit, cs.q_norm, "query");
  detail::normalize_rows(p, cs.p_unit, cs.p_norm, "passage");
  cs.scores = MatrixD(q.rows(), p.rows());
  parallel_for(q.rows(), [&](std::size_t i) {
    auto qi = cs.q_unit.row(i);
    for (std::size_t j = 0; j < p.rows(); ++j) cs.scores(i, j) = dot(qi, cs.p_unit.row(j)) / tau;
  });
  return cs;
}

// Entry (i, j) = cos(q_i, p_j) / tau.
inline MatrixD score_matrix(const MatrixD& q, const MatrixD& p, double tau) {
  return cosine_scores(q, p, tau).scores;
}

// Pulls d(loss)/d(scores) back to the unnormalized query and passage rows.
inline std::pair<MatrixD, MatrixD> cosine_scores_backward(const CosineScores& cs, const MatrixD& dscores) {
  const std::size_t n = cs.q_unit.rows(), c = cs.p_unit.rows(), d = cs.q_unit.cols();
  if (dscores.rows() != n || dscores.cols() != c) throw DimensionError("score gradient shape mismatch");
  MatrixD dq_unit(n, d), dp_unit(c, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto dqi = dq_unit.row(i);
    auto qi = cs.q_unit.row(i);
    for (std::size_t j = 0; j < c; ++j) {
      const double g = dscores(i, j) / cs.tau;
      if (g == 0.0) continue;
      auto pj = cs.p_unit.row(j);
      auto dpj = dp_unit.row(j);
      for (std::size_t k = 0; k < d; ++k) {
        dqi[k] += g * pj[k];
        dpj[k] += g * qi[k];
      }
    }
  }
  auto unnormalize = [d](const MatrixD& unit, const std::vector<double>& norms, MatrixD& du) {
    for (std::size_t i = 0; i < unit.rows(); ++i) {
      auto u = unit.row(i);
      auto g = du.row(i);
      const double proj = dot(u, std::span<const double>(g));
      for (std::size_t k = 0; k < d; ++k) g[k] = (g[k] - u[k] * proj) / norms[i];
    }
  };
  unnormalize(cs.q_unit, cs.q_norm, dq_unit);
  unnormalize(cs.p_unit, cs.p_norm, dp_unit);
  return {std::move(dq_unit), std::move(dp_unit)};
}

// ---------------------------------------------------------------------------
// InfoNCE

struct LossGrad {
  double loss = 0.0;
  MatrixD grad;
};

// loss = -(1/n) sum_i [s_i,pos - logsumexp(row i)]; grad = (softmax - onehot) / n.
inline LossGrad infonce_loss(const MatrixD& scores, std::span<const std::size_t> positives) {
  const std::size_t n = scores.rows();
  if (positives.size() != n) throw DimensionError("infonce_loss: one positive index per row required");
  if (n == 0) throw EmptyInputError("infonce_loss: empty score matrix");
  LossGrad out{0.0, MatrixD(n, scores.cols())};
  for (std::size_t i = 0; i < n; ++i) {
    if (positives[i] >= scores.cols()) throw IndexError("infonce_loss: positive index out of range");
    auto row = scores.row(i);
    out.loss += logsumexp_row(row) - row[positives[i]];
    auto g = out.grad.row(i);
    std::copy(row.begin(), row.end(), g.begin());
    softmax_inplace(g);
    g[positives[i]] -= 1.0;
    for (double& v : g) v /= static_cast<double>(n);
  }
  out.loss /= static_cast<double>(n);
  return out;
}

// Fraction of rows whose argmax (first on ties) is the positive.
inline double top1_accuracy(const MatrixD& scores, std::span<const std::size_t> positives) {
  if (scores.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto row = scores.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += best == positives[i];
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

// ---------------------------------------------------------------------------
// Negative strategies

enum class NegativeKind { in_batch, pre_batch, momentum_queue };

inline std::string to_string(NegativeKind k) {
  switch (k) {
    case NegativeKind::in_batch: return "in-batch";
    case NegativeKind::pre_batch: return "pre-batch";
    case NegativeKind::momentum_queue: return "momentum-queue";
  }
  return "?";
}

inline NegativeKind parse_negative_kind(const std::string& s) {
  if (s == "in-batch") return NegativeKind::in_batch;
  if (s == "pre-batch") return NegativeKind::pre_batch;
  if (s == "momentum-queue") return NegativeKind::momentum_queue;
  throw ConfigurationError("unknown negative strategy '" + s + "'");
}

struct NegativeStrategy {
  NegativeKind kind = NegativeKind::in_batch;
  std::size_t window = 1;         // pre-batch: number of previous batches kept
  std::size_t queue_size = 4096;  // momentum-queue: FIFO capacity in rows
  double momentum = 0.999;        // momentum-queue: EMA coefficient m
};

// Stored negative embeddings. Banked rows are constants: no gradient flows
// into them. For the momentum queue the bank also owns the momentum encoder.
template <class E>
class NegativeBank {
 public:
  explicit NegativeBank(NegativeStrategy strategy) : strategy_(strategy) {
    if (strategy_.kind == NegativeKind::momentum_queue &&
        !(strategy_.momentum >= 0.0 && strategy_.momentum <= 1.0)) {
      throw ConfigurationError("momentum must be in [0, 1]");
    }
  }

  NegativeKind kind() const noexcept { return strategy_.kind; }
  const NegativeStrategy& strategy() const noexcept { return strategy_; }
  std::size_t size() const noexcept { return rows_.size(); }
  const std::deque<std::vector<double>>& rows() const noexcept { return rows_; }

  std::optional<E>& momentum_encoder() noexcept { return momentum_encoder_; }
  const std::optional<E>& momentum_encoder() const noexcept { return momentum_encoder_; }

  // Stores a batch of embeddings and evicts the oldest beyond capacity.
  void push(const MatrixD& embeddings) {
    switch (strategy_.kind) {
      case NegativeKind::in_batch:
        return;
      case NegativeKind::pre_batch:
        if (strategy_.window == 0) return;
        for (std::size_t i = 0; i < embeddings.rows(); ++i) {
          rows_.emplace_back(embeddings.row(i).begin(), embeddings.row(i).end());
        }
        batch_sizes_.push_back(embeddings.rows());
        while (batch_sizes_.size() > strategy_.window) {
          for (std::size_t i = 0; i < batch_sizes_.front(); ++i) rows_.pop_front();
          batch_sizes_.pop_front();
        }
        return;
      case NegativeKind::momentum_queue:
        for (std::size_t i = 0; i < embeddings.rows(); ++i) {
          rows_.emplace_back(embeddings.row(i).begin(), embeddings.row(i).end());
        }
        while (rows_.size() > strategy_.queue_size) rows_.pop_front();
        return;
    }
  }

 private:
  NegativeStrategy strategy_;
  std::deque<std::vector<double>> rows_;
  std::deque<std::size_t> batch_sizes_;
  std::optional<E> momentum_encoder_;
};

struct Candidates {
  MatrixD matrix;                     // c x d; batch rows first, then banked rows
  std::vector<std::size_t> positives; // positive column for each query row
  std::size_t live_rows = 0;          // leading rows that carry gradient
};

// Builds the candidate set for one step. For the momentum queue, `batch`
// must already be encoded by the momentum encoder.
template <class E>
Candidates assemble_candidates(const MatrixD& batch, const NegativeBank<E>& bank,
                               const NegativeStrategy& strategy) {
  if (bank.kind() != strategy.kind) {
    throw ConfigurationError("negative bank holds " + to_string(bank.kind()) + " but strategy is " +
                             to_string(strategy.kind));
  }
  Candidates c;
  c.matrix = batch;
  c.positives.resize(batch.rows());
  for (std::size_t i = 0; i < batch.rows(); ++i) c.positives[i] = i;
  c.live_rows = strategy.kind == NegativeKind::momentum_queue ? 0 : batch.rows();
  if (strategy.kind != NegativeKind::in_batch) {
    for (const auto& r : bank.rows()) c.matrix.append_row(r);
  }
  return c;
}

// theta_k' = m * theta_k + (1 - m) * theta_q, elementwise.
inline void momentum_update(const std::vector<std::span<double>>& live,
                            const std::vector<std::span<double>>& momentum, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw RangeError("momentum must be in [0, 1]");
  if (live.size() != momentum.size()) throw DimensionError("momentum_update: group count mismatch");
  for (std::size_t g = 0; g < live.size(); ++g) {
    if (live[g].size() != momentum[g].size()) throw DimensionError("momentum_update: shape mismatch");
    for (std::size_t i = 0; i < live[g].size(); ++i) {
      momentum[g][i] = m * momentum[g][i] + (1.0 - m) * live[g][i];
    }
  }
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainConfig {
  double tau = 0.01;
  // Temperature used instead of tau when the strategy is not in-batch.
  std::optional<double> strategy_tau;
  std::size_t batch_size = 256;
  std::uint64_t total_steps = 2000;
  double peak_lr = 1e-2;
  std::uint64_t warmup_steps = 100;
  AdamWConfig adamw;
  NegativeStrategy negatives;
  std::uint64_t seed = 0;
  // Sources whose query/passage sides are assigned at random per pair.
  std::vector<std::string> symmetric_sources{"citation"};

  double effective_tau() const {
    return negatives.kind != NegativeKind::in_batch && strategy_tau ? *strategy_tau : tau;
  }

  LrSchedule schedule() const { return {peak_lr, warmup_steps, total_steps}; }

  void validate() const {
    if (!(tau > 0.0) || (strategy_tau && !(*strategy_tau > 0.0))) {
      throw ConfigurationError("temperature must be > 0");
    }
    if (batch_size < 2) throw ConfigurationError("batch_size must be >= 2 for in-batch negatives");
    schedule().validate();
  }
};

struct StepLog {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t candidates = 0;
};

struct StepGradients {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t candidates = 0;
  MatrixD score_grad;      // d(loss)/d(scores)
  MatrixD query_grad;      // d(loss)/d(query embeddings)
  ParamBuffers grads;      // d(loss)/d(encoder params)
  MatrixD bank_rows;       // embeddings to push into the bank after the step
};

// Loss and gradients for one batch. Does not mutate the encoder or the bank.
template <TrainableEncoder E>
StepGradients contrastive_gradients(E& encoder, const NegativeBank<E>& bank,
                                    std::span<const TextInput> queries, std::span<const TextInput> passages,
                                    const PretrainConfig& cfg) {
  if (queries.size() != passages.size()) throw DimensionError("queries and passages must align");
  const auto fq = encoder.forward(queries);
  StepGradients out;
  out.grads = zeros_like(encoder.parameters());

  std::optional<typename E::Forward> fp;
  MatrixD batch_rows;
  if (cfg.negatives.kind == NegativeKind::momentum_queue) {
    if (!bank.momentum_encoder()) throw ConfigurationError("momentum queue without momentum encoder");
    batch_rows = bank.momentum_encoder()->embed(passages);
  } else {
    fp = encoder.forward(passages);
    batch_rows = fp->embeddings;
  }
  const Candidates cand = assemble_candidates(batch_rows, bank, cfg.negatives);
  const auto cs = cosine_scores(fq.embeddings, cand.matrix, cfg.effective_tau());
  auto lg = infonce_loss(cs.scores, cand.positives);
  out.loss = lg.loss;
  out.accuracy = top1_accuracy(cs.scores, cand.positives);
  out.candidates = cand.matrix.rows();
  auto [dq, dcand] = cosine_scores_backward(cs, lg.grad);
  encoder.backward(fq, dq, out.grads);
  if (fp && cand.live_rows > 0) {
    MatrixD dp(cand.live_rows, dcand.cols());
    std::copy_n(dcand.data().begin(), dp.size(), dp.data().begin());
    encoder.backward(*fp, dp, out.grads);
  }
  out.score_grad = std::move(lg.grad);
  out.query_grad = std::move(dq);
  out.bank_rows = std::move(batch_rows);
  return out;
}

template <class E>
struct PretrainResult {
  E encoder;
  std::vector<StepLog> log;
};

// InfoNCE pre-training. Batches walk a single seeded permutation of the
// pairs, wrapping around for as many steps as requested.
template <TrainableEncoder E>
PretrainResult<E> pretrain(std::span<const TextPair> pairs, const PretrainConfig& cfg, E encoder) {
  cfg.validate();
  if (pairs.size() < cfg.batch_size) {
    throw DataStarvationError("pretrain needs at least one full batch: have " + std::to_string(pairs.size()) +
                              " pairs, batch_size " + std::to_string(cfg.batch_size));
  }
  const std::size_t n = cfg.batch_size;
  Rng order_rng(derive_seed(cfg.seed, 0));
  std::vector<std::size_t> perm(pairs.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  order_rng.shuffle(perm);

  Rng side_rng(derive_seed(cfg.seed, 1));
  std::vector<char> swapped(pairs.size(), 0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const bool symmetric = std::find(cfg.symmetric_sources.begin(), cfg.symmetric_sources.end(),
                                     pairs[i].source) != cfg.symmetric_sources.end();
    if (symmetric) swapped[i] = side_rng.bernoulli(0.5) ? 1 : 0;
  }

  NegativeBank<E> bank(cfg.negatives);
  if (cfg.negatives.kind == NegativeKind::momentum_queue) bank.momentum_encoder() = encoder;
  OptimizerState opt(encoder.parameters(), cfg.adamw);
  const LrSchedule schedule = cfg.schedule();

  PretrainResult<E> result{std::move(encoder), {}};
  result.log.reserve(cfg.total_steps);
  std::vector<TextInput> qs(n), ps(n);
  for (std::uint64_t step = 0; step < cfg.total_steps; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = perm[(step * n + i) % perm.size()];
      const auto& pr = pairs[idx];
      const bool sw = swapped[idx] != 0;
      qs[i] = {sw ? pr.passage : pr.query, Role::query};
      ps[i] = {sw ? pr.query : pr.passage, Role::passage};
    }
    if (bank.momentum_encoder()) {
      momentum_update(result.encoder.parameters(), bank.momentum_encoder()->parameters(),
                      cfg.negatives.momentum);
    }
    auto g = contrastive_gradients(result.encoder, bank, qs, ps, cfg);
    const double lr = lr_at(schedule, step);
    adamw_step(result.encoder.parameters(), g.grads, opt, lr);
    bank.push(g.bank_rows);
    result.log.push_back({step, lr, g.loss, g.accuracy, g.candidates});
  }
  return result;
}

}  // namespace e5kit
