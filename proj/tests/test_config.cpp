// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "e5kit/e5kit.hpp"

using namespace e5kit;

TEST_CASE("every key has a default and keys are unique") {
  std::set<std::string_view> seen;
  for (const auto& k : kConfigKeys) {
    INFO(k.key);
    CHECK(seen.insert(k.key).second);
    CHECK_FALSE(k.help.empty());
  }
  const RunConfig c;
  CHECK(c.values().size() == seen.size());
}

TEST_CASE("set, assign and load") {
  RunConfig c;
  c.set("seed", "7");
  CHECK(c.u64("seed") == 7);
  c.assign("  pretrain.batch_size =  64 ");
  CHECK(c.size("pretrain.batch_size") == 64);

  std::istringstream file("# comment\n\npretrain.lr=0.5\nfilter.k = 3\n");
  c.load(file);
  CHECK(c.real("pretrain.lr") == 0.5);
  CHECK(c.size("filter.k") == 3);

  try {
    c.set("pretrain.bogus", "1");
    FAIL("expected a usage error");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("pretrain.bogus") != std::string::npos);
  }
  std::istringstream bad("seed=1\nnot.a.key=2\n");
  try {
    c.load(bad, "run.cfg");
    FAIL("expected a usage error");
  } catch (const UsageError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("run.cfg:2") != std::string::npos);
    CHECK(msg.find("not.a.key") != std::string::npos);
  }
  CHECK_THROWS_AS(c.assign("no equals sign"), UsageError);
  CHECK_THROWS_AS(c.assign("=value"), UsageError);
}

TEST_CASE("typed getters reject malformed values") {
  RunConfig c;
  c.set("pretrain.steps", "12x");
  CHECK_THROWS_AS(c.u64("pretrain.steps"), UsageError);
  c.set("pretrain.lr", "fast");
  CHECK_THROWS_AS(c.real("pretrain.lr"), UsageError);
  c.set("filter.lenient", "maybe");
  CHECK_THROWS_AS(c.flag("filter.lenient"), UsageError);
  c.set("filter.lenient", "yes");
  CHECK(c.flag("filter.lenient"));
  c.set("recipe.batch_sizes", "16, 64 ,256");
  CHECK(c.number_list<std::size_t>("recipe.batch_sizes") == std::vector<std::size_t>{16, 64, 256});
  c.set("recipe.batch_sizes", "16,x");
  CHECK_THROWS_AS(c.number_list<std::size_t>("recipe.batch_sizes"), UsageError);
  CHECK_THROWS_AS(c.required("filter.input"), UsageError);
  CHECK_FALSE(c.path("filter.input").has_value());
}

TEST_CASE("resolved config text round trips") {
  RunConfig a;
  a.set("seed", "3");
  a.set("pretrain.negatives", "pre-batch");
  std::istringstream in(a.to_text());
  RunConfig b;
  b.load(in);
  CHECK(b.values() == a.values());
  CHECK(a.to_json()["seed"] == "3");
}

TEST_CASE("module configs are built from keys") {
  RunConfig c;
  c.set("seed", "9");
  c.set("pretrain.steps", "10");
  c.set("pretrain.warmup", "50");
  c.set("pretrain.negatives", "momentum-queue");
  c.set("pretrain.queue_size", "128");
  c.set("pretrain.momentum", "0.5");
  const auto pc = pretrain_config(c);
  CHECK(pc.seed == 9);
  CHECK(pc.warmup_steps == 10);
  CHECK(pc.negatives.kind == NegativeKind::momentum_queue);
  CHECK(pc.negatives.queue_size == 128);
  CHECK(pc.negatives.momentum == 0.5);

  c.set("pretrain.negatives", "moco");
  CHECK_THROWS(pretrain_config(c));

  c.set("finetune.alpha", "0.7");
  c.set("finetune.hard_negatives", "3");
  const auto fc = finetune_config(c);
  CHECK(fc.alpha == 0.7);
  CHECK(fc.hard_negatives == 3);

  c.set("synthetic.topics", "4");
  c.set("synthetic.noise_fraction", "0.25");
  const auto sp = synthetic_spec(c);
  CHECK(sp.topics == 4);
  CHECK(sp.noise_fraction == 0.25);
  CHECK(sp.seed == 9);

  CHECK(parse_weights("s2orc:0.3, reddit:1") == std::map<std::string, double>{{"s2orc", 0.3}, {"reddit", 1.0}});
  CHECK_THROWS(parse_weights("s2orc"));
  CHECK(parse_role("query") == Role::query);
  CHECK_THROWS(parse_role("doc"));
}

TEST_CASE("single-cell recipe equals a direct run") {
  RunConfig c;
  c.set("synthetic.topics", "6");
  c.set("synthetic.pairs_per_topic", "40");
  c.set("synthetic.heldout_per_topic", "5");
  c.set("recipe.seeds", "4");
  c.set("recipe.batch_sizes", "32");
  c.set("recipe.steps", "15");
  c.set("pretrain.warmup", "3");
  const auto table = batch_size_sweep(c);
  REQUIRE(table.rows.size() == 1);
  REQUIRE(table.rows[0].per_seed.size() == 1);

  const auto sc = with_seed(c, 4);
  const auto spec = synthetic_spec(sc);
  const auto world = make_world(spec);
  const auto pairs = to_text_pairs(gen_synthetic(spec, world).pairs);
  auto pc = pretrain_config(sc);
  pc.batch_size = 32;
  pc.total_steps = 15;
  const auto r = pretrain(std::span<const TextPair>(pairs), pc, initial_encoder(sc, 4));
  CHECK(table.rows[0].per_seed[0] == heldout_ndcg(r.encoder, gen_heldout(spec, world)));

  const auto csv = table.to_csv();
  CHECK(csv.rfind("cell,train_pairs,candidates,ndcg@10_mean,ndcg@10_seed4\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("recipe cell failures name the cell") {
  RunConfig c;
  c.set("synthetic.topics", "2");
  c.set("synthetic.pairs_per_topic", "5");
  c.set("recipe.seeds", "1");
  c.set("recipe.batch_sizes", "64");
  try {
    batch_size_sweep(c);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("batch_size=64") != std::string::npos);
  }
  c.set("recipe.batch_sizes", "");
  CHECK_THROWS_AS(batch_size_sweep(c), UsageError);
}
