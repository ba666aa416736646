// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "e5kit/e5kit.hpp"
#include "oracles.hpp"

using namespace e5kit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::vector<std::string> random_texts(Rng& rng, std::size_t count, std::size_t vocab_words, std::size_t max_len) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = 1 + static_cast<std::size_t>(rng.below(max_len));
    std::string s;
    for (std::size_t w = 0; w < len; ++w) s += (w ? " w" : "w") + std::to_string(rng.below(vocab_words));
    out.push_back(s);
  }
  return out;
}

BagEncoder micro_encoder(std::uint64_t seed) {
  TokenizerConfig tk;
  tk.vocab_size = 40;
  return BagEncoder::random(tk, 5, seed, {0.8, 0.5});
}

// 1. Gradient exactness for infonce_loss, kd_loss and combined_loss.
Outcome gradient_exactness() {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.below(4));  // 2..5
    const std::size_t m = 1 + static_cast<std::size_t>(rng.below(3));  // 1..3
    auto enc = micro_encoder(derive_seed(7, static_cast<std::uint64_t>(trial)));
    const auto qt = random_texts(rng, n, 30, 4);
    const auto pt = random_texts(rng, n, 30, 5);
    const double tau = trial % 2 == 0 ? 0.01 : 0.05 + rng.uniform();

    // InfoNCE with in-batch negatives through both towers.
    {
      std::vector<TextInput> qs, ps;
      for (std::size_t i = 0; i < n; ++i) {
        qs.push_back({qt[i], Role::query});
        ps.push_back({pt[i], Role::passage});
      }
      PretrainConfig cfg;
      cfg.tau = tau;
      NegativeBank<BagEncoder> bank(cfg.negatives);
      const auto g = contrastive_gradients(enc, bank, qs, ps, cfg);
      const auto num = oracle::numeric_gradient(enc.parameters(), [&] {
        return contrastive_gradients(enc, bank, qs, ps, cfg).loss;
      });
      worst = std::max(worst, oracle::max_rel_error(g.grads, num));
    }

    std::vector<FinetuneExample> batch;
    for (std::size_t i = 0; i < n; ++i) {
      FinetuneExample ex{qt[i], pt[i], random_texts(rng, m, 30, 5), std::vector<double>(m + 1)};
      for (auto& s : *ex.teacher_scores) s = 4.0 * rng.normal();
      batch.push_back(std::move(ex));
    }
    FinetuneConfig fc;
    fc.hard_negatives = m;
    fc.tau = tau;
    for (double alpha : {0.0, 0.2}) {  // alpha 0 isolates the KD term
      fc.alpha = alpha;
      const auto g = combined_loss(std::span<const FinetuneExample>(batch), enc, fc);
      const auto num = oracle::numeric_gradient(enc.parameters(), [&] {
        return combined_loss(std::span<const FinetuneExample>(batch), enc, fc).total;
      });
      worst = std::max(worst, oracle::max_rel_error(g.grads, num));
    }
  }
  return {worst < 1e-4, "max rel err " + num(worst)};
}

// 2. Loss sanity.
Outcome loss_sanity() {
  bool ok = true;
  std::string detail;
  double worst_uniform = 0.0;
  for (std::size_t c : {2u, 5u, 64u, 1000u}) {
    MatrixD s(3, c);
    for (auto& v : s.data()) v = 7.25;
    const std::vector<std::size_t> pos{0, c / 2, c - 1};
    const auto lg = infonce_loss(s, pos);
    worst_uniform = std::max(worst_uniform, std::abs(lg.loss - std::log(static_cast<double>(c))));
  }
  ok &= worst_uniform <= 1e-10;

  Rng rng(5);
  bool kl_zero = true;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> p(2 + rng.below(10));
    for (auto& v : p) v = 30.0 * rng.normal();
    kl_zero &= kd_loss(p, p).loss == 0.0;
  }
  ok &= kl_zero;

  SyntheticSpec spec;
  spec.seed = 1;
  const auto corpus = gen_synthetic(spec);
  const auto pairs = to_text_pairs(corpus.pairs);
  PretrainConfig cfg;
  cfg.batch_size = 64;
  cfg.total_steps = 1;
  cfg.warmup_steps = 0;
  cfg.seed = 1;
  const auto r = pretrain(std::span<const TextPair>(pairs), cfg, BagEncoder::random({}, 64, 1));
  const double first = r.log.front().loss;
  ok &= std::abs(first - std::log(64.0)) <= 0.5;
  detail = "|uniform - ln c| " + num(worst_uniform) + ", KL(p||p)==0 " + (kl_zero ? "yes" : "no") +
           ", first loss " + num(first) + " vs ln64 " + num(std::log(64.0));
  return {ok, detail};
}

// 3. Metric oracles.
Outcome metric_oracles() {
  Rng rng(99);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t docs = 1 + rng.below(50);
    RankedList run{"q", {}};
    std::vector<std::string> ids;
    auto order = rng.sample_without_replacement(docs, docs);
    const std::size_t listed = 1 + rng.below(docs);
    for (std::size_t r = 0; r < listed; ++r) {
      ids.push_back("d" + std::to_string(order[r]));
      run.items.emplace_back(ids.back(), 1.0 - 0.01 * static_cast<double>(r));
    }
    Relevance rel;
    for (std::size_t d = 0; d < docs; ++d) {
      if (rng.bernoulli(0.3)) rel["d" + std::to_string(d)] = static_cast<int>(rng.below(4));
    }
    if (rng.bernoulli(0.2)) rel["missing" + std::to_string(t)] = 2;  // judged doc absent from the corpus
    const std::size_t k = 1 + rng.below(20);
    worst = std::max(worst, std::abs(ndcg_at_k(run, rel, 10) - oracle::ndcg(ids, rel, 10)));
    worst = std::max(worst, std::abs(ndcg_at_k(run, rel, k) - oracle::ndcg(ids, rel, k)));
    worst = std::max(worst, std::abs(mrr_at_k(run, rel, 10) - oracle::mrr(ids, rel, 10)));
    const auto rc = recall_at_k(run, rel, k);
    const double ro = oracle::recall(ids, rel, k);
    if (rc.has_value() != (ro >= 0.0)) return {false, "recall definedness mismatch on instance " + std::to_string(t)};
    if (rc) worst = std::max(worst, std::abs(*rc - ro));

    const std::size_t n = 2 + rng.below(49);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.below(8));  // heavy ties
      y[i] = rng.normal();
    }
    x[0] = 0.0;
    x[1] = 9.0;
    worst = std::max(worst, std::abs(spearman(x, y) - oracle::spearman(x, y)));

    std::vector<int> pred(n), gold(n);
    const auto kc = 1 + rng.below(6), gc = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int>(rng.below(kc));
      gold[i] = static_cast<int>(rng.below(gc));
    }
    worst = std::max(worst, std::abs(v_measure<int, int>(pred, gold).v - oracle::v_measure(pred, gold)));
  }
  return {worst <= 1e-10, "max abs diff " + num(worst)};
}

// 4. Exact search vs full sort, with duplicate texts forcing ties.
Outcome exact_search() {
  Rng rng(4);
  std::size_t queries = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t docs = 1 + rng.below(2000);
    const auto enc = BagEncoder::random({}, 64, derive_seed(11, static_cast<std::uint64_t>(t)), {0.5, 0.1});
    auto texts = random_texts(rng, docs, 300, 6);
    for (std::size_t i = 0; i < docs / 10; ++i) texts[rng.below(docs)] = texts[rng.below(docs)];
    std::vector<IdText> items;
    for (std::size_t i = 0; i < docs; ++i) items.push_back({"doc" + std::to_string(rng.below(1u << 30)) + "_" + std::to_string(i), texts[i]});
    const auto idx = build_index(std::span<const IdText>(items), enc);
    for (int qn = 0; qn < 4; ++qn) {
      const auto qtext = qn == 0 ? texts[rng.below(docs)] : random_texts(rng, 1, 300, 6)[0];
      const std::size_t k = 1 + rng.below(docs + 100);
      const auto got = search_topk(qtext, idx, k, enc);
      const TextInput in{qtext, Role::query};
      const auto q = enc.embed(std::span<const TextInput>(&in, 1));
      auto want = oracle::full_ranking(q.row(0), idx);
      want.resize(std::min(k, want.size()));
      if (got.items != want) return {false, "mismatch on corpus " + std::to_string(t)};
      ++queries;
    }
  }
  return {true, std::to_string(queries) + " queries over 50 corpora identical to full sort"};
}

// 5. End-to-end learning.
Outcome end_to_end() {
  SyntheticSpec spec;
  spec.seed = 1;
  const auto world = make_world(spec);
  const auto corpus = gen_synthetic(spec, world);
  const auto held = gen_heldout(spec, world);
  const auto pairs = to_text_pairs(corpus.pairs);
  const auto init = BagEncoder::random({}, 64, derive_seed(1, 11));
  const double before = heldout_ndcg(init, held);
  PretrainConfig cfg;
  cfg.seed = 1;
  const auto r = pretrain(std::span<const TextPair>(pairs), cfg, init);
  const double after = heldout_ndcg(r.encoder, held);
  return {after >= 0.8 && before <= 0.05, "held-out nDCG@10 untrained " + num(before) + ", trained " + num(after)};
}

// 6 and 7 share the filter-ablation runs.
std::vector<FilterAblationSeed> ablation_runs() {
  RunConfig c;
  std::vector<FilterAblationSeed> out;
  for (std::uint64_t seed : {1u, 2u, 3u}) out.push_back(filter_ablation_seed(c, seed, &std::cerr));
  return out;
}

Outcome filter_efficacy(const std::vector<FilterAblationSeed>& runs) {
  double removed = 0.0, kept = 0.0;
  for (const auto& r : runs) {
    removed += r.noisy_removed / static_cast<double>(runs.size());
    kept += r.clean_kept / static_cast<double>(runs.size());
  }
  return {removed >= 0.85 && kept >= 0.80,
          "noisy removed " + num(removed) + ", clean kept " + num(kept) + " (3-seed mean, pool 10000, k=2)"};
}

Outcome filter_direction(const std::vector<FilterAblationSeed>& runs) {
  std::size_t wins = 0;
  std::string detail;
  for (const auto& r : runs) {
    wins += r.ndcg_filtered > r.ndcg_random;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(r.seed) + ": " +
              num(r.ndcg_filtered) + " vs " + num(r.ndcg_random);
  }
  return {wins == runs.size(), std::to_string(wins) + "/" + std::to_string(runs.size()) + " seeds, filtered vs random (" + detail + ")"};
}

// 8. Batch-size trend.
Outcome batch_trend() {
  RunConfig c;
  const auto t = batch_size_sweep(c, &std::cerr);
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (i > 0) ok &= t.rows[i].mean() >= t.rows[i - 1].mean();
    detail += (i ? ", " : "") + t.rows[i].cell + " " + num(t.rows[i].mean());
  }
  return {ok, detail};
}

// 9. Negative-strategy plumbing.
Outcome negative_plumbing() {
  SyntheticSpec spec;
  spec.seed = 3;
  spec.topics = 10;
  spec.pairs_per_topic = 40;
  const auto pairs = to_text_pairs(gen_synthetic(spec).pairs);
  const auto init = BagEncoder::random({}, 16, 3);
  const std::size_t n = 32;
  bool ok = true;
  std::string detail;

  for (std::size_t window : {1u, 3u}) {
    PretrainConfig cfg;
    cfg.batch_size = n;
    cfg.total_steps = 8;
    cfg.warmup_steps = 2;
    cfg.negatives = {NegativeKind::pre_batch, window, 0, 0.0};
    const auto r = pretrain(std::span<const TextPair>(pairs), cfg, init);
    for (const auto& s : r.log) ok &= s.candidates == n + n * std::min<std::size_t>(s.step, window);
  }
  for (std::size_t queue : {0u, 50u, 100u}) {
    PretrainConfig cfg;
    cfg.batch_size = n;
    cfg.total_steps = 8;
    cfg.warmup_steps = 2;
    cfg.negatives = {NegativeKind::momentum_queue, 1, queue, 0.9};
    const auto r = pretrain(std::span<const TextPair>(pairs), cfg, init);
    for (const auto& s : r.log) ok &= s.candidates == n + std::min<std::size_t>(s.step * n, queue);
  }
  detail = std::string("candidate counts ") + (ok ? "exact" : "WRONG");

  std::vector<TextInput> qs, ps;
  for (std::size_t i = 0; i < n; ++i) {
    qs.push_back({pairs[i].query, Role::query});
    ps.push_back({pairs[i].passage, Role::passage});
  }
  auto live = init;
  PretrainConfig in_batch;
  NegativeBank<BagEncoder> empty(in_batch.negatives);
  const auto gi = contrastive_gradients(live, empty, qs, ps, in_batch);
  PretrainConfig moco;
  moco.negatives = {NegativeKind::momentum_queue, 1, 4096, 0.0};
  NegativeBank<BagEncoder> queue(moco.negatives);
  queue.momentum_encoder() = init;
  momentum_update(live.parameters(), queue.momentum_encoder()->parameters(), 0.0);
  const auto gm = contrastive_gradients(live, queue, qs, ps, moco);
  double diff = std::abs(gi.loss - gm.loss);
  for (std::size_t i = 0; i < gi.score_grad.size(); ++i) {
    diff = std::max(diff, std::abs(gi.score_grad.data()[i] - gm.score_grad.data()[i]));
  }
  for (std::size_t i = 0; i < gi.query_grad.size(); ++i) {
    diff = std::max(diff, std::abs(gi.query_grad.data()[i] - gm.query_grad.data()[i]));
  }
  ok &= diff <= 1e-10;
  detail += ", first-step gradient diff vs in-batch " + num(diff);
  return {ok, detail};
}

// 10. Zero-shot polarity vs majority.
Outcome zero_shot() {
  PolaritySpec spec;
  spec.seed = 1;
  const auto corpus = gen_polarity(spec);
  const auto pairs = to_text_pairs(corpus.pairs);
  PretrainConfig cfg;
  cfg.total_steps = 500;
  cfg.seed = 1;
  const auto r = pretrain(std::span<const TextPair>(pairs), cfg, BagEncoder::random({}, 64, derive_seed(1, 11)));
  const double acc = zero_shot_accuracy(r.encoder, corpus.test, polarity_template());
  const double majority = majority_share(corpus.test);
  return {acc >= majority + 0.10, "accuracy " + num(acc) + " vs majority " + num(majority)};
}

// 11. Determinism: every command twice into the same directory.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  }
  return out;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "e5kit_acceptance_determinism";
  fs::remove_all(root);
  const std::string data = (root / "data").string(), pol = (root / "pol").string();
  auto base = [&](std::string out) {
    RunConfig c;
    c.set("seed", "5");
    c.set("out", std::move(out));
    c.set("synthetic.topics", "8");
    c.set("synthetic.pairs_per_topic", "60");
    c.set("synthetic.noise_fraction", "0.2");
    c.set("synthetic.finetune_examples", "64");
    c.set("pretrain.batch_size", "32");
    c.set("pretrain.steps", "20");
    c.set("pretrain.warmup", "5");
    c.set("filter.pool_size", "200");
    c.set("finetune.batch_size", "16");
    c.set("finetune.epochs", "1");
    c.set("finetune.warmup", "2");
    c.set("recipe.seeds", "1");
    c.set("recipe.batch_sizes", "16");
    c.set("recipe.steps", "10");
    c.set("recipe.strategies", "in-batch,pre-batch,momentum-queue");
    return c;
  };
  struct Step {
    std::string command;
    std::vector<std::pair<std::string, std::string>> sets;
  };
  const std::string model = (root / "pre" / "model.e5ck").string();
  const std::vector<Step> steps{
      {"gen-synthetic", {{"out", data}}},
      {"gen-synthetic", {{"out", pol}, {"synthetic.mode", "polarity"}, {"polarity.train_pairs", "300"}, {"polarity.test_items", "50"}}},
      {"filter", {{"out", (root / "filt").string()}, {"filter.input", data + "/pairs.jsonl"}, {"filter.weights", "s2orc:0.3"}}},
      {"pretrain", {{"out", (root / "pre").string()}, {"pretrain.input", data + "/pairs.jsonl"}}},
      {"finetune", {{"out", (root / "ft").string()}, {"finetune.input", data + "/finetune.jsonl"}, {"encoder.init", model}}},
      {"embed", {{"out", (root / "emb").string()}, {"model", model}, {"embed.input", data + "/corpus.jsonl"}}},
      {"search", {{"out", (root / "srch").string()}, {"model", model}, {"search.index", (root / "emb" / "index.e5mx").string()}, {"search.queries", data + "/queries.jsonl"}}},
      {"eval-retrieval", {{"out", (root / "er").string()}, {"model", model}, {"eval.corpus", data + "/corpus.jsonl"}, {"eval.queries", data + "/queries.jsonl"}, {"eval.qrels", data + "/qrels.txt"}, {"eval.output", (root / "er" / "report.json").string()}}},
      {"eval-sts", {{"out", (root / "es").string()}, {"model", model}, {"eval.pairs", data + "/sts.jsonl"}, {"eval.output", (root / "es" / "report.json").string()}}},
      {"eval-cluster", {{"out", (root / "ec").string()}, {"model", model}, {"eval.input", data + "/cluster.jsonl"}, {"eval.output", (root / "ec" / "report.json").string()}}},
      {"eval-classify", {{"out", (root / "lp").string()}, {"model", model}, {"eval.train", data + "/classify_train.jsonl"}, {"eval.test", data + "/classify_test.jsonl"}, {"eval.output", (root / "lp" / "report.json").string()}}},
      {"eval-classify", {{"out", (root / "zs").string()}, {"model", model}, {"eval.mode", "zero-shot"}, {"eval.test", pol + "/test.jsonl"}, {"eval.template", pol + "/template.json"}, {"eval.output", (root / "zs" / "report.json").string()}}},
      {"recipe", {{"out", (root / "rb").string()}, {"recipe.name", "batch-size-sweep"}}},
      {"recipe", {{"out", (root / "rn").string()}, {"recipe.name", "negative-strategy-sweep"}}},
      {"recipe", {{"out", (root / "rf").string()}, {"recipe.name", "filter-ablation"}, {"recipe.topics", "8"}, {"recipe.scorer_steps", "10"}}},
  };
  std::size_t artifacts = 0;
  for (const auto& s : steps) {
    auto c = base("");
    for (const auto& [k, v] : s.sets) c.set(k, v);
    std::string first_stdout;
    std::map<std::string, std::string> first;
    for (int rep = 0; rep < 2; ++rep) {
      std::ostringstream out, err;
      const int code = run(s.command, c, out, err);
      if (code != 0) return {false, s.command + " exited " + std::to_string(code) + ": " + err.str()};
      const auto snap = snapshot(c.str("out"));
      if (rep == 0) {
        first_stdout = out.str();
        first = snap;
      } else if (out.str() != first_stdout || snap != first) {
        return {false, s.command + " produced different bytes on rerun"};
      }
    }
    artifacts += first.size();
  }
  fs::remove_all(root);
  return {true, std::to_string(steps.size()) + " command runs, " + std::to_string(artifacts) + " artifacts byte-identical"};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> run;
  };
  std::vector<FilterAblationSeed> ablation;
  auto ensure_ablation = [&]() -> const std::vector<FilterAblationSeed>& {
    if (ablation.empty()) ablation = ablation_runs();
    return ablation;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient exactness", gradient_exactness},
      {2, "loss sanity", loss_sanity},
      {3, "metric oracles", metric_oracles},
      {4, "exact-search oracle", exact_search},
      {5, "end-to-end learning", end_to_end},
      {6, "consistency-filter efficacy", [&] { return filter_efficacy(ensure_ablation()); }},
      {7, "filtered beats random subset", [&] { return filter_direction(ensure_ablation()); }},
      {8, "batch-size trend", batch_trend},
      {9, "negative-strategy plumbing", negative_plumbing},
      {10, "zero-shot beats majority", zero_shot},
      {11, "determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << c.id << "] " << c.name << ": " << o.detail << " ("
              << num(secs) << " s)" << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
