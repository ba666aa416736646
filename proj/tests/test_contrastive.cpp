// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "e5kit/e5kit.hpp"
#include "oracles.hpp"

using namespace e5kit;
using Catch::Matchers::WithinAbs;

namespace {

MatrixD random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  MatrixD m(r, c);
  for (auto& v : m.data()) v = scale * rng.normal();
  return m;
}

std::vector<TextPair> small_corpus(std::uint64_t seed, std::size_t topics = 10, std::size_t per = 40) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.topics = topics;
  spec.pairs_per_topic = per;
  return to_text_pairs(gen_synthetic(spec).pairs);
}

}  // namespace

TEST_CASE("score_matrix examples") {
  const MatrixD u(1, 2, {0.6, 0.8});
  CHECK_THAT(score_matrix(u, u, 0.01)(0, 0), WithinAbs(100.0, 1e-12));
  const MatrixD x(1, 2, {1.0, 0.0}), y(1, 2, {0.0, 3.0});
  CHECK(score_matrix(x, y, 0.01)(0, 0) == 0.0);
  const MatrixD neg(1, 2, {-0.6, -0.8});
  CHECK_THAT(score_matrix(u, neg, 1.0)(0, 0), WithinAbs(-1.0, 1e-15));

  CHECK_THROWS_AS(score_matrix(MatrixD(1, 2), u, 1.0), DegenerateEmbeddingError);
  CHECK_THROWS_AS(score_matrix(u, u, 0.0), ConfigurationError);
  CHECK_THROWS_AS(score_matrix(u, MatrixD(1, 3, 1.0), 1.0), DimensionError);
}

TEST_CASE("score_matrix is invariant to positive row rescaling") {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto q = random_matrix(rng, 4, 6), p = random_matrix(rng, 7, 6);
    auto q2 = q, p2 = p;
    for (std::size_t i = 0; i < q2.rows(); ++i) {
      const double a = std::exp(3.0 * rng.normal());
      for (auto& v : q2.row(i)) v *= a;
    }
    for (std::size_t i = 0; i < p2.rows(); ++i) {
      const double b = std::exp(3.0 * rng.normal());
      for (auto& v : p2.row(i)) v *= b;
    }
    const auto s = score_matrix(q, p, 0.05), s2 = score_matrix(q2, p2, 0.05);
    for (std::size_t i = 0; i < s.size(); ++i) REQUIRE_THAT(s2.data()[i], WithinAbs(s.data()[i], 1e-10));
  }
}

TEST_CASE("infonce examples") {
  const std::vector<std::size_t> first{0};
  CHECK_THAT(infonce_loss(MatrixD(1, 2, {3.0, 3.0}), first).loss, WithinAbs(std::log(2.0), 1e-15));
  CHECK(infonce_loss(MatrixD(1, 2, {50.0, 0.0}), first).loss < 1e-20);
  CHECK_THROWS_AS(infonce_loss(MatrixD(1, 2), std::vector<std::size_t>{2}), IndexError);
  CHECK_THROWS_AS(infonce_loss(MatrixD(2, 2), first), DimensionError);
}

TEST_CASE("infonce gradient matches finite differences and rows sum to zero") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    auto s = random_matrix(rng, 4, 4, 3.0);
    std::vector<std::size_t> pos(4);
    for (auto& p : pos) p = rng.below(4);
    const auto lg = infonce_loss(s, pos);
    for (std::size_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (double v : lg.grad.row(i)) sum += v;
      REQUIRE_THAT(sum, WithinAbs(0.0, 1e-12));
    }
    const auto num = oracle::numeric_gradient({s.data()}, [&] { return infonce_loss(s, pos).loss; });
    REQUIRE(oracle::max_rel_error({lg.grad.storage()}, num, 1e-3) < 1e-6);
  }
}

TEST_CASE("infonce loss is permutation-equivariant") {
  Rng rng(3);
  const auto s = random_matrix(rng, 6, 9, 5.0);
  std::vector<std::size_t> pos{0, 3, 8, 1, 1, 5};
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  MatrixD ps(6, 9);
  std::vector<std::size_t> ppos(6);
  for (std::size_t i = 0; i < 6; ++i) {
    std::copy(s.row(perm[i]).begin(), s.row(perm[i]).end(), ps.row(i).begin());
    ppos[i] = pos[perm[i]];
  }
  CHECK_THAT(infonce_loss(ps, ppos).loss, WithinAbs(infonce_loss(s, pos).loss, 1e-12));
}

TEST_CASE("assemble_candidates examples") {
  Rng rng(4);
  const auto batch = random_matrix(rng, 8, 3);

  NegativeStrategy in_batch;
  NegativeBank<BagEncoder> b0(in_batch);
  b0.push(batch);
  const auto c0 = assemble_candidates(batch, b0, in_batch);
  CHECK(c0.matrix.rows() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(c0.positives[i] == i);

  NegativeStrategy pre{NegativeKind::pre_batch, 1, 0, 0.0};
  NegativeBank<BagEncoder> b1(pre);
  CHECK(assemble_candidates(batch, b1, pre).matrix.rows() == 8);
  b1.push(random_matrix(rng, 8, 3));
  CHECK(assemble_candidates(batch, b1, pre).matrix.rows() == 16);
  b1.push(random_matrix(rng, 8, 3));
  CHECK(b1.size() == 8);

  NegativeStrategy moco{NegativeKind::momentum_queue, 1, 20, 0.9};
  NegativeBank<BagEncoder> b2(moco);
  CHECK(assemble_candidates(batch, b2, moco).matrix.rows() == 8);
  for (int i = 0; i < 4; ++i) b2.push(random_matrix(rng, 8, 3));
  CHECK(b2.size() == 20);
  CHECK(assemble_candidates(batch, b2, moco).live_rows == 0);

  CHECK_THROWS_AS(assemble_candidates(batch, b2, pre), ConfigurationError);
}

TEST_CASE("queue keeps FIFO order") {
  NegativeStrategy moco{NegativeKind::momentum_queue, 1, 3, 0.5};
  NegativeBank<BagEncoder> bank(moco);
  for (int i = 0; i < 5; ++i) bank.push(MatrixD(1, 2, static_cast<double>(i)));
  REQUIRE(bank.size() == 3);
  CHECK(bank.rows()[0][0] == 2.0);
  CHECK(bank.rows()[2][0] == 4.0);
}

TEST_CASE("momentum_update examples") {
  std::vector<double> live{2.0, 2.0}, mom{0.0, 0.0};
  std::vector<std::span<double>> l{live}, m{mom};
  momentum_update(l, m, 0.5);
  CHECK(mom == std::vector<double>{1.0, 1.0});
  momentum_update(l, m, 1.0);
  CHECK(mom == std::vector<double>{1.0, 1.0});
  momentum_update(l, m, 0.0);
  CHECK(mom == live);
  CHECK_THROWS_AS(momentum_update(l, m, 1.5), RangeError);
  std::vector<double> shorter{1.0};
  CHECK_THROWS_AS(momentum_update(l, {shorter}, 0.5), DimensionError);
  CHECK_THROWS_AS(NegativeBank<BagEncoder>(NegativeStrategy{NegativeKind::momentum_queue, 1, 4, -0.1}),
                  ConfigurationError);
}

TEST_CASE("contrastive gradients match finite differences for every strategy") {
  Rng rng(5);
  const auto pairs = small_corpus(5, 4, 5);
  TokenizerConfig tk;
  tk.vocab_size = 60;
  auto enc = BagEncoder::random(tk, 5, 6, {0.5, 0.5});
  std::vector<TextInput> qs, ps;
  for (std::size_t i = 0; i < 4; ++i) {
    qs.push_back({pairs[i].query, Role::query});
    ps.push_back({pairs[i].passage, Role::passage});
  }
  for (auto kind : {NegativeKind::in_batch, NegativeKind::pre_batch, NegativeKind::momentum_queue}) {
    PretrainConfig cfg;
    cfg.tau = 0.1;
    cfg.negatives = {kind, 2, 10, 0.5};
    NegativeBank<BagEncoder> bank(cfg.negatives);
    if (kind == NegativeKind::momentum_queue) bank.momentum_encoder() = BagEncoder::random(tk, 5, 7, {0.5, 0.5});
    bank.push(random_matrix(rng, 3, 5));
    const auto g = contrastive_gradients(enc, bank, qs, ps, cfg);
    const auto num = oracle::numeric_gradient(enc.parameters(), [&] {
      return contrastive_gradients(enc, bank, qs, ps, cfg).loss;
    });
    INFO(to_string(kind));
    CHECK(oracle::max_rel_error(g.grads, num, 1e-7) < 1e-4);
  }
}

TEST_CASE("pretrain is deterministic and starts near ln n") {
  const auto pairs = small_corpus(7, 10, 30);
  PretrainConfig cfg;
  cfg.batch_size = 64;
  cfg.total_steps = 2;
  cfg.warmup_steps = 1;
  cfg.seed = 3;
  const auto init = BagEncoder::random({}, 64, 9);
  const auto a = pretrain(std::span<const TextPair>(pairs), cfg, init);
  const auto b = pretrain(std::span<const TextPair>(pairs), cfg, init);
  REQUIRE(a.log.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].lr == b.log[i].lr);
  }
  CHECK(a.encoder == b.encoder);
  CHECK_THAT(a.log[0].loss, WithinAbs(std::log(64.0), 0.5));
}

TEST_CASE("pretrain errors") {
  const auto pairs = small_corpus(8, 2, 5);
  PretrainConfig cfg;
  cfg.batch_size = 64;
  CHECK_THROWS_AS(pretrain(std::span<const TextPair>(pairs), cfg, BagEncoder::random({}, 8, 1)),
                  DataStarvationError);
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigurationError);
  cfg.batch_size = 4;
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigurationError);
}

TEST_CASE("pretrain reaches high in-batch accuracy on the synthetic corpus") {
  SyntheticSpec spec;
  spec.seed = 2;
  spec.topics = 20;
  spec.pairs_per_topic = 50;
  const auto pairs = to_text_pairs(gen_synthetic(spec).pairs);
  PretrainConfig cfg;
  cfg.batch_size = 64;
  cfg.total_steps = 300;
  cfg.warmup_steps = 20;
  cfg.seed = 2;
  const auto r = pretrain(std::span<const TextPair>(pairs), cfg, BagEncoder::random({}, 64, 4));
  double tail = 0.0;
  for (std::size_t i = r.log.size() - 20; i < r.log.size(); ++i) tail += r.log[i].accuracy / 20.0;
  CHECK(tail > 0.9);
}

TEST_CASE("strategy temperature override applies only to non in-batch strategies") {
  PretrainConfig cfg;
  cfg.strategy_tau = 0.05;
  CHECK(cfg.effective_tau() == 0.01);
  cfg.negatives.kind = NegativeKind::pre_batch;
  CHECK(cfg.effective_tau() == 0.05);
  CHECK(parse_negative_kind("momentum-queue") == NegativeKind::momentum_queue);
  CHECK_THROWS_AS(parse_negative_kind("moco"), ConfigurationError);
}
