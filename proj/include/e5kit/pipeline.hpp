// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "e5kit/config.hpp"
#include "e5kit/contrastive.hpp"
#include "e5kit/datapipe.hpp"
#include "e5kit/encoder.hpp"
#include "e5kit/errors.hpp"
#include "e5kit/eval.hpp"
#include "e5kit/finetune.hpp"
#include "e5kit/io.hpp"
#include "e5kit/rng.hpp"

namespace e5kit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config -> module settings

inline TokenizerConfig tokenizer_config(const RunConfig& c) {
  TokenizerConfig tk;
  tk.vocab_size = c.size("encoder.vocab_size");
  tk.hash_seed = c.u64("encoder.hash_seed");
  tk.lowercase = c.flag("encoder.lowercase");
  tk.max_tokens = c.size("encoder.max_tokens");
  tk.validate();
  return tk;
}

inline EncoderInit encoder_init(const RunConfig& c) {
  return {c.real("encoder.table_scale"), c.real("encoder.bias_scale")};
}

// Starts from encoder.init when set, otherwise from a random init derived
// from `seed`.
inline BagEncoder initial_encoder(const RunConfig& c, std::uint64_t seed) {
  if (auto p = c.path("encoder.init")) return load_checkpoint(*p);
  return BagEncoder::random(tokenizer_config(c), c.size("encoder.dim"), derive_seed(seed, 11), encoder_init(c));
}

inline SyntheticSpec synthetic_spec(const RunConfig& c) {
  SyntheticSpec s;
  s.topics = c.size("synthetic.topics");
  s.pairs_per_topic = c.size("synthetic.pairs_per_topic");
  s.concepts_per_topic = c.size("synthetic.concepts_per_topic");
  s.query_concepts = c.size("synthetic.query_concepts");
  s.passage_extra_concepts = c.size("synthetic.passage_extra_concepts");
  s.noise_fraction = c.real("synthetic.noise_fraction");
  s.heldout_per_topic = c.size("synthetic.heldout_per_topic");
  s.seed = c.u64("seed");
  s.validate();
  return s;
}

inline PolaritySpec polarity_spec(const RunConfig& c) {
  PolaritySpec s;
  s.train_pairs = c.size("polarity.train_pairs");
  s.test_items = c.size("polarity.test_items");
  s.positive_share = c.real("polarity.positive_share");
  s.seed = c.u64("seed");
  return s;
}

inline AdamWConfig adamw_config(const RunConfig& c) {
  return {c.real("optim.beta1"), c.real("optim.beta2"), c.real("optim.eps"), c.real("optim.weight_decay")};
}

inline PretrainConfig pretrain_config(const RunConfig& c) {
  PretrainConfig p;
  p.tau = c.real("pretrain.tau");
  if (!c.str("pretrain.strategy_tau").empty()) p.strategy_tau = c.real("pretrain.strategy_tau");
  p.batch_size = c.size("pretrain.batch_size");
  p.total_steps = c.u64("pretrain.steps");
  p.peak_lr = c.real("pretrain.lr");
  p.warmup_steps = c.u64("pretrain.warmup");
  p.adamw = adamw_config(c);
  try {
    p.negatives.kind = parse_negative_kind(c.str("pretrain.negatives"));
  } catch (const Error& e) {
    throw UsageError(std::string("pretrain.negatives: ") + e.what());
  }
  p.negatives.window = c.size("pretrain.window");
  p.negatives.queue_size = c.size("pretrain.queue_size");
  p.negatives.momentum = c.real("pretrain.momentum");
  p.seed = c.u64("seed");
  p.symmetric_sources = c.list("pretrain.symmetric_sources");
  p.warmup_steps = std::min(p.warmup_steps, p.total_steps);
  p.validate();
  return p;
}

inline FinetuneConfig finetune_config(const RunConfig& c) {
  FinetuneConfig f;
  f.alpha = c.real("finetune.alpha");
  f.hard_negatives = c.size("finetune.hard_negatives");
  f.tau = c.real("finetune.tau");
  f.epochs = c.size("finetune.epochs");
  f.batch_size = c.size("finetune.batch_size");
  f.peak_lr = c.real("finetune.lr");
  f.warmup_steps = c.u64("finetune.warmup");
  f.adamw = adamw_config(c);
  f.use_kd = c.flag("finetune.use_kd");
  f.seed = c.u64("seed");
  f.validate();
  return f;
}

inline std::map<std::string, double> parse_weights(const std::string& spec) {
  std::map<std::string, double> out;
  for (const auto& item : split_list(spec)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw UsageError("filter.weights item \"" + item + "\" is not source:weight");
    try {
      out[trim(item.substr(0, colon))] = std::stod(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("filter.weights item \"" + item + "\" has a bad weight");
    }
  }
  try {
    validate_weights(out);
  } catch (const Error& e) {
    throw UsageError(std::string("filter.weights: ") + e.what());
  }
  return out;
}

inline Role parse_role(const std::string& s) {
  if (s == "query") return Role::query;
  if (s == "passage") return Role::passage;
  if (s == "none") return Role::none;
  throw UsageError("role must be query, passage or none, got \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// Text formats

inline std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_jsonl(const fs::path& path, const std::vector<Json>& rows) {
  atomic_write(path, [&](std::ostream& os) {
    for (const auto& r : rows) os << r.dump() << '\n';
  });
}

inline void write_id_texts(const fs::path& path, std::span<const IdText> items) {
  std::vector<Json> rows;
  for (const auto& it : items) rows.push_back({{"id", it.id}, {"text", it.text}});
  write_jsonl(path, rows);
}

inline void write_qrels(const fs::path& path, const Qrels& qrels) {
  atomic_write(path, [&](std::ostream& os) {
    for (const auto& [q, docs] : qrels) {
      for (const auto& [d, g] : docs) os << q << " 0 " << d << ' ' << g << '\n';
    }
  });
}

inline Qrels read_qrels(const fs::path& path) {
  auto in = open_input(path);
  return read_qrels(in);
}

inline void write_labeled(const fs::path& path, std::span<const LabeledText> items) {
  std::vector<Json> rows;
  for (const auto& it : items) rows.push_back({{"text", it.text}, {"label", it.label}});
  write_jsonl(path, rows);
}

inline std::vector<LabeledText> read_labeled(const fs::path& path) {
  auto in = open_input(path);
  std::vector<LabeledText> out;
  for_each_line(in, [&](std::size_t lineno, const std::string& line) {
    const Json obj = parse_json_line(line, lineno);
    out.push_back({require_string(obj, "text", lineno), require_string(obj, "label", lineno)});
  });
  return out;
}

inline void write_sts(const fs::path& path, std::span<const ScoredTextPair> items) {
  std::vector<Json> rows;
  for (const auto& it : items) rows.push_back({{"text1", it.text1}, {"text2", it.text2}, {"score", it.score}});
  write_jsonl(path, rows);
}

inline std::vector<ScoredTextPair> read_sts(const fs::path& path) {
  auto in = open_input(path);
  std::vector<ScoredTextPair> out;
  for_each_line(in, [&](std::size_t lineno, const std::string& line) {
    const Json obj = parse_json_line(line, lineno);
    ScoredTextPair p{require_string(obj, "text1", lineno), require_string(obj, "text2", lineno), 0.0};
    const auto it = obj.find("score");
    if (it == obj.end() || !it->is_number()) throw ParseError(lineno, "field \"score\" must be a number");
    p.score = it->get<double>();
    out.push_back(std::move(p));
  });
  return out;
}

inline Json finetune_to_json(const FinetuneExample& ex) {
  Json j{{"query", ex.query}, {"positive", ex.positive}, {"negatives", ex.negatives}};
  if (ex.teacher_scores) j["teacher_scores"] = *ex.teacher_scores;
  return j;
}

inline std::vector<FinetuneExample> read_finetune(const fs::path& path) {
  auto in = open_input(path);
  std::vector<FinetuneExample> out;
  for_each_line(in, [&](std::size_t lineno, const std::string& line) {
    const Json obj = parse_json_line(line, lineno);
    FinetuneExample ex{require_string(obj, "query", lineno), require_string(obj, "positive", lineno), {}, {}};
    try {
      ex.negatives = obj.at("negatives").get<std::vector<std::string>>();
      if (obj.contains("teacher_scores")) ex.teacher_scores = obj.at("teacher_scores").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
    try {
      ex.validate();
    } catch (const ValidationError& e) {
      throw ParseError(lineno, e.what());
    }
    out.push_back(std::move(ex));
  });
  return out;
}

inline std::vector<std::string> read_texts(const fs::path& path) {
  auto in = open_input(path);
  std::vector<std::string> out;
  for_each_line(in, [&](std::size_t lineno, const std::string& line) {
    out.push_back(require_string(parse_json_line(line, lineno), "text", lineno));
  });
  return out;
}

inline void write_checkpoint_file(const fs::path& path, const BagEncoder& enc) {
  atomic_write(path, [&](std::ostream& os) { write_checkpoint(os, enc); }, true);
}

inline void write_resolved_config(const fs::path& dir, const RunConfig& c) {
  atomic_write_text(dir / "config.txt", c.to_text());
}

// ---------------------------------------------------------------------------
// Shared evaluation

inline double heldout_ndcg(const BagEncoder& enc, const RetrievalSet& set) {
  const auto idx = build_index(std::span<const IdText>(set.corpus), enc);
  const auto runs = search_all(std::span<const IdText>(set.queries), idx, 100, enc);
  const std::vector<std::size_t> ks{10};
  return aggregate_retrieval(runs, set.qrels, ks).values.at("ndcg@10");
}

inline void log_progress(std::ostream* log, const StepLog& s, std::uint64_t every) {
  if (!log || every == 0 || (s.step % every != 0)) return;
  *log << "step " << s.step << " lr " << fmt_real(s.lr) << " loss " << fmt_real(s.loss) << " acc "
       << fmt_real(s.accuracy) << '\n';
}

inline PretrainResult<BagEncoder> train_encoder(std::span<const TextPair> pairs, const PretrainConfig& cfg,
                                                BagEncoder init) {
  return pretrain(pairs, cfg, std::move(init));
}

// ---------------------------------------------------------------------------
// Recipes

struct RecipeRow {
  std::string cell;
  std::size_t train_pairs = 0;
  std::size_t candidates = 0;
  std::vector<double> per_seed;

  double mean() const {
    double s = 0.0;
    for (double v : per_seed) s += v;
    return per_seed.empty() ? 0.0 : s / static_cast<double>(per_seed.size());
  }
};

struct RecipeTable {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<RecipeRow> rows;

  std::string to_csv() const {
    std::ostringstream os;
    os << "cell,train_pairs,candidates,ndcg@10_mean";
    for (auto s : seeds) os << ",ndcg@10_seed" << s;
    os << '\n';
    for (const auto& r : rows) {
      os << r.cell << ',' << r.train_pairs << ',' << r.candidates << ',' << fmt_real(r.mean());
      for (double v : r.per_seed) os << ',' << fmt_real(v);
      os << '\n';
    }
    return os.str();
  }
};

inline std::vector<std::uint64_t> recipe_seeds(const RunConfig& c) {
  auto seeds = c.number_list<std::uint64_t>("recipe.seeds");
  if (seeds.empty()) throw UsageError("recipe.seeds must list at least one seed");
  return seeds;
}

inline RunConfig with_seed(RunConfig c, std::uint64_t seed) {
  c.set("seed", std::to_string(seed));
  return c;
}

inline void run_cell(const std::string& cell, const std::function<void()>& body) {
  try {
    body();
  } catch (const Error& e) {
    throw Error("recipe cell " + cell + " failed: " + e.what());
  }
}

// Synthetic training corpus and its held-out set for one seed.
struct SyntheticRun {
  SyntheticSpec spec;
  SyntheticCorpus corpus;
  RetrievalSet heldout;
};

inline SyntheticRun synthetic_run(const SyntheticSpec& spec) {
  const auto world = make_world(spec);
  return {spec, gen_synthetic(spec, world), gen_heldout(spec, world)};
}

inline RecipeTable batch_size_sweep(const RunConfig& c, std::ostream* log = nullptr) {
  RecipeTable t{"batch-size-sweep", recipe_seeds(c), {}};
  const auto sizes = c.number_list<std::size_t>("recipe.batch_sizes");
  if (sizes.empty()) throw UsageError("recipe.batch_sizes must not be empty");
  for (auto b : sizes) t.rows.push_back({"batch_size=" + std::to_string(b), 0, 0, {}});
  for (auto seed : t.seeds) {
    const auto sc = with_seed(c, seed);
    const auto run = synthetic_run(synthetic_spec(sc));
    const auto pairs = to_text_pairs(run.corpus.pairs);
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      run_cell(t.rows[i].cell, [&] {
        auto pc = pretrain_config(sc);
        pc.batch_size = sizes[i];
        pc.total_steps = sc.u64("recipe.steps");
        pc.warmup_steps = std::min(pc.warmup_steps, pc.total_steps);
        auto r = train_encoder(pairs, pc, initial_encoder(sc, seed));
        t.rows[i].train_pairs = pairs.size();
        t.rows[i].candidates = r.log.back().candidates;
        t.rows[i].per_seed.push_back(heldout_ndcg(r.encoder, run.heldout));
        if (log) *log << t.rows[i].cell << " seed " << seed << " ndcg@10 " << fmt_real(t.rows[i].per_seed.back()) << '\n';
      });
    }
  }
  return t;
}

inline RecipeTable negative_strategy_sweep(const RunConfig& c, std::ostream* log = nullptr) {
  RecipeTable t{"negative-strategy-sweep", recipe_seeds(c), {}};
  std::vector<NegativeKind> kinds;
  for (const auto& s : c.list("recipe.strategies")) {
    try {
      kinds.push_back(parse_negative_kind(s));
    } catch (const Error& e) {
      throw UsageError(std::string("recipe.strategies: ") + e.what());
    }
    t.rows.push_back({s, 0, 0, {}});
  }
  if (kinds.empty()) throw UsageError("recipe.strategies must not be empty");
  for (auto seed : t.seeds) {
    const auto sc = with_seed(c, seed);
    const auto run = synthetic_run(synthetic_spec(sc));
    const auto pairs = to_text_pairs(run.corpus.pairs);
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      run_cell(t.rows[i].cell, [&] {
        auto pc = pretrain_config(sc);
        pc.negatives.kind = kinds[i];
        pc.total_steps = sc.u64("recipe.steps");
        pc.warmup_steps = std::min(pc.warmup_steps, pc.total_steps);
        auto r = train_encoder(pairs, pc, initial_encoder(sc, seed));
        t.rows[i].train_pairs = pairs.size();
        t.rows[i].candidates = r.log.back().candidates;
        t.rows[i].per_seed.push_back(heldout_ndcg(r.encoder, run.heldout));
        if (log) *log << t.rows[i].cell << " seed " << seed << " ndcg@10 " << fmt_real(t.rows[i].per_seed.back()) << '\n';
      });
    }
  }
  return t;
}

struct FilterAblationSeed {
  std::uint64_t seed = 0;
  std::size_t pairs = 0;
  std::size_t kept = 0;
  double noisy_removed = 0.0;  // share of noisy pairs dropped
  double clean_kept = 0.0;     // share of clean pairs kept
  double ndcg_filtered = 0.0;
  double ndcg_random = 0.0;
};

// One seed of the filter ablation: a scorer trained on the noisy corpus
// filters it, then equal-size filtered and random subsets are each trained
// from the same init and compared on clean held-out retrieval.
inline FilterAblationSeed filter_ablation_seed(const RunConfig& c, std::uint64_t seed, std::ostream* log = nullptr) {
  const auto sc = with_seed(c, seed);
  auto spec = synthetic_spec(sc);
  spec.topics = sc.size("recipe.topics");
  spec.noise_fraction = sc.real("recipe.noise_fraction");
  spec.validate();
  const auto run = synthetic_run(spec);
  const auto& pairs = run.corpus.pairs;
  const auto text_pairs = to_text_pairs(pairs);

  auto scorer_cfg = pretrain_config(sc);
  scorer_cfg.total_steps = sc.u64("recipe.scorer_steps");
  scorer_cfg.tau = sc.real("recipe.scorer_tau");
  scorer_cfg.warmup_steps = std::min(scorer_cfg.warmup_steps, scorer_cfg.total_steps);
  const auto scorer = train_encoder(text_pairs, scorer_cfg, initial_encoder(sc, derive_seed(seed, 21))).encoder;

  FilterConfig fc;
  fc.k = sc.size("filter.k");
  fc.pool_size = sc.size("filter.pool_size");
  fc.tau = sc.real("filter.tau");
  fc.seed = derive_seed(seed, 22);
  const auto cr = consistency_ranks(std::span<const RawPair>(pairs), scorer, fc);

  FilterAblationSeed out;
  out.seed = seed;
  out.pairs = pairs.size();
  std::size_t noisy = 0, noisy_dropped = 0, clean = 0, clean_kept = 0;
  std::vector<TextPair> filtered;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (run.corpus.noisy[i]) {
      ++noisy;
      noisy_dropped += cr.keep[i] ? 0 : 1;
    } else {
      ++clean;
      clean_kept += cr.keep[i] ? 1 : 0;
    }
    if (cr.keep[i]) filtered.push_back(text_pairs[i]);
  }
  out.kept = filtered.size();
  out.noisy_removed = noisy ? static_cast<double>(noisy_dropped) / static_cast<double>(noisy) : 1.0;
  out.clean_kept = clean ? static_cast<double>(clean_kept) / static_cast<double>(clean) : 1.0;

  Rng pick(derive_seed(seed, 23));
  auto idx = pick.sample_without_replacement(pairs.size(), filtered.size());
  std::sort(idx.begin(), idx.end());
  std::vector<TextPair> random_subset;
  for (auto i : idx) random_subset.push_back(text_pairs[i]);

  auto pc = pretrain_config(sc);
  pc.total_steps = sc.u64("recipe.steps");
  pc.warmup_steps = std::min(pc.warmup_steps, pc.total_steps);
  const auto init = initial_encoder(sc, derive_seed(seed, 24));
  out.ndcg_filtered = heldout_ndcg(train_encoder(filtered, pc, init).encoder, run.heldout);
  out.ndcg_random = heldout_ndcg(train_encoder(random_subset, pc, init).encoder, run.heldout);
  if (log) {
    *log << "seed " << seed << " kept " << out.kept << "/" << out.pairs << " noisy_removed "
         << fmt_real(out.noisy_removed) << " clean_kept " << fmt_real(out.clean_kept) << " ndcg filtered "
         << fmt_real(out.ndcg_filtered) << " random " << fmt_real(out.ndcg_random) << '\n';
  }
  return out;
}

inline RecipeTable filter_ablation(const RunConfig& c, std::ostream* log = nullptr,
                                   std::vector<FilterAblationSeed>* details = nullptr) {
  RecipeTable t{"filter-ablation", recipe_seeds(c), {{"w/ filter", 0, 0, {}}, {"w/o filter", 0, 0, {}}}};
  for (auto seed : t.seeds) {
    FilterAblationSeed s;
    run_cell("seed=" + std::to_string(seed), [&] { s = filter_ablation_seed(c, seed, log); });
    t.rows[0].train_pairs = s.kept;
    t.rows[1].train_pairs = s.kept;
    t.rows[0].candidates = t.rows[1].candidates = c.size("pretrain.batch_size");
    t.rows[0].per_seed.push_back(s.ndcg_filtered);
    t.rows[1].per_seed.push_back(s.ndcg_random);
    if (details) details->push_back(s);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Commands

struct CommandIo {
  std::ostream& out;  // data
  std::ostream& log;  // progress and diagnostics
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-synthetic", "filter", "pretrain", "finetune",
                                              "embed", "search", "eval-retrieval", "eval-sts",
                                              "eval-cluster", "eval-classify", "recipe"};
  return names;
}

inline fs::path out_dir(const RunConfig& c) { return fs::path(c.str("out")); }

inline fs::path out_path(const RunConfig& c, std::string_view key, std::string_view fallback) {
  if (auto p = c.path(key)) return fs::path(*p);
  return out_dir(c) / fallback;
}

inline PromptTemplate polarity_template() {
  return {"movie review: {}", {{"negative", "bad and terrible movie"}, {"positive", "good and great movie"}}};
}

inline void cmd_gen_synthetic(const RunConfig& c, CommandIo& io) {
  const auto dir = out_dir(c);
  const auto mode = c.str("synthetic.mode");
  if (mode == "polarity") {
    const auto corpus = gen_polarity(polarity_spec(c));
    atomic_write(dir / "pairs.jsonl", [&](std::ostream& os) { write_pairs(os, corpus.pairs); });
    write_labeled(dir / "test.jsonl", corpus.test);
    atomic_write_text(dir / "template.json", polarity_template().to_json().dump(2) + "\n");
    write_resolved_config(dir, c);
    io.log << "wrote " << corpus.pairs.size() << " pairs and " << corpus.test.size() << " test reviews to "
           << dir.string() << '\n';
    return;
  }
  if (mode != "topics") throw UsageError("synthetic.mode must be topics or polarity, got \"" + mode + "\"");

  const auto spec = synthetic_spec(c);
  const auto world = make_world(spec);
  const auto corpus = gen_synthetic(spec, world);
  atomic_write(dir / "pairs.jsonl", [&](std::ostream& os) { write_pairs(os, corpus.pairs); });
  atomic_write(dir / "labels.txt", [&](std::ostream& os) {
    for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
      os << (corpus.noisy[i] ? "noisy" : "clean") << ' ' << corpus.topics[i] << '\n';
    }
  });
  const auto held = gen_heldout(spec, world);
  write_id_texts(dir / "corpus.jsonl", held.corpus);
  write_id_texts(dir / "queries.jsonl", held.queries);
  write_qrels(dir / "qrels.txt", held.qrels);
  write_sts(dir / "sts.jsonl", gen_sts(spec, world, c.size("synthetic.sts_pairs")));
  write_labeled(dir / "cluster.jsonl", gen_topic_labeled(spec, world, c.size("synthetic.cluster_topics"),
                                                         c.size("synthetic.cluster_per_topic"), 104));
  const auto ct = c.size("synthetic.classify_topics");
  write_labeled(dir / "classify_train.jsonl",
                gen_topic_labeled(spec, world, ct, c.size("synthetic.classify_train_per_topic"), 105));
  write_labeled(dir / "classify_test.jsonl",
                gen_topic_labeled(spec, world, ct, c.size("synthetic.classify_test_per_topic"), 106));
  std::vector<Json> ft;
  for (auto& ex : gen_finetune_examples(spec, world, c.size("synthetic.finetune_examples"),
                                        c.size("synthetic.hard_negatives"), 107)) {
    ft.push_back(finetune_to_json({ex.query, ex.positive, ex.negatives, ex.teacher_scores}));
  }
  write_jsonl(dir / "finetune.jsonl", ft);
  write_resolved_config(dir, c);
  io.log << "wrote " << corpus.pairs.size() << " pairs to " << dir.string() << '\n';
}

inline std::vector<RawPair> read_pairs_for(const RunConfig& c, std::string_view key, bool lenient,
                                           std::ostream* log) {
  std::vector<std::string> skipped;
  auto pairs = ingest(fs::path(c.required(key)), lenient, &skipped);
  if (log) {
    for (const auto& msg : skipped) *log << "skipped: " << msg << '\n';
  }
  return pairs;
}

inline void cmd_filter(const RunConfig& c, CommandIo& io) {
  const auto input = read_pairs_for(c, "filter.input", c.flag("filter.lenient"), &io.log);
  const auto output = out_path(c, "filter.output", "filtered.jsonl");
  const auto rounds = c.size("filter.rounds");
  if (c.flag("filter.consistency") && rounds < 1) throw UsageError("filter.rounds must be >= 1");

  FilterPlan plan;
  plan.heuristics = c.flag("filter.heuristics");
  plan.heuristic.max_chars = c.size("filter.max_chars");
  plan.heuristic.min_score = c.i64("filter.min_score");
  plan.heuristic.sources = c.list("filter.heuristic_sources");
  if (auto p = c.path("filter.eval_texts")) plan.eval_texts = load_eval_texts(*p);
  const auto weights = parse_weights(c.str("filter.weights"));
  FilterConfig fc;
  fc.k = c.size("filter.k");
  fc.pool_size = c.size("filter.pool_size");
  fc.tau = c.real("filter.tau");
  fc.validate();

  std::vector<DropStage> fate(input.size(), DropStage::none);
  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (plan.heuristics && heuristic_reject(input[i], plan.heuristic)) {
      fate[i] = DropStage::heuristic;
    } else if (contaminated(input[i], plan.eval_texts)) {
      fate[i] = DropStage::decontamination;
    } else {
      alive.push_back(i);
    }
  }
  auto gather = [&] {
    std::vector<RawPair> v;
    for (auto i : alive) v.push_back(input[i]);
    return v;
  };
  const std::uint64_t seed = c.u64("seed");
  for (std::size_t round = 0; c.flag("filter.consistency") && round < rounds && !alive.empty(); ++round) {
    const auto subset = gather();
    BagEncoder scorer;
    if (round == 0 && c.path("filter.scorer")) {
      scorer = load_checkpoint(c.required("filter.scorer"));
    } else {
      io.log << "round " << round + 1 << ": training scorer on " << subset.size() << " pairs\n";
      auto pc = pretrain_config(c);
      pc.seed = derive_seed(seed, 30 + round);
      scorer = train_encoder(to_text_pairs(subset), pc, initial_encoder(c, pc.seed)).encoder;
    }
    fc.seed = derive_seed(seed, 40 + round);
    const auto r = consistency_ranks(std::span<const RawPair>(subset), scorer, fc);
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < alive.size(); ++k) {
      if (r.keep[k]) {
        next.push_back(alive[k]);
      } else {
        fate[alive[k]] = DropStage::consistency;
      }
    }
    io.log << "round " << round + 1 << ": kept " << next.size() << " of " << alive.size() << '\n';
    alive = std::move(next);
  }
  if (!weights.empty()) {
    const auto subset = gather();
    const auto keep = weighted_sample_mask(subset, weights, derive_seed(seed, 50));
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < alive.size(); ++k) {
      if (keep[k]) {
        next.push_back(alive[k]);
      } else {
        fate[alive[k]] = DropStage::sampling;
      }
    }
    alive = std::move(next);
  }
  const auto kept = gather();
  const auto report = tally_filter(input, fate);
  if (!report.total.reconciles()) throw Error("filter report does not reconcile");
  atomic_write(output, [&](std::ostream& os) { write_pairs(os, kept); });
  Json j = report.to_json();
  j["config"] = c.to_json();
  auto report_path = output;
  report_path += ".report.json";
  atomic_write_text(report_path, j.dump(2) + "\n");
  write_resolved_config(out_dir(c), c);
  io.log << "kept " << kept.size() << " of " << input.size() << " pairs\n";
}

inline void write_manifest(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string body;
  for (const auto& [k, v] : kv) body += k + "=" + v + "\n";
  atomic_write_text(path, body);
}

inline void cmd_pretrain(const RunConfig& c, CommandIo& io) {
  const auto raw = read_pairs_for(c, "pretrain.input", false, &io.log);
  const auto pairs = to_text_pairs(raw);
  const auto cfg = pretrain_config(c);
  const auto dir = out_dir(c);
  auto r = train_encoder(pairs, cfg, initial_encoder(c, cfg.seed));
  const auto every = c.u64("pretrain.log_every");
  for (const auto& s : r.log) log_progress(&io.log, s, every);

  write_checkpoint_file(dir / "model.e5ck", r.encoder);
  atomic_write(dir / "loss.csv", [&](std::ostream& os) {
    os << "step,lr,loss,accuracy,candidates\n";
    for (const auto& s : r.log) {
      os << s.step << ',' << fmt_real(s.lr) << ',' << fmt_real(s.loss) << ',' << fmt_real(s.accuracy) << ','
         << s.candidates << '\n';
    }
  });
  write_manifest(dir / "manifest.txt", {{"checkpoint", "model.e5ck"},
                                        {"loss_log", "loss.csv"},
                                        {"pairs", std::to_string(pairs.size())},
                                        {"steps", std::to_string(cfg.total_steps)},
                                        {"negatives", to_string(cfg.negatives.kind)},
                                        {"final_loss", fmt_real(r.log.back().loss)},
                                        {"vocab_size", std::to_string(r.encoder.tokenizer().vocab_size)},
                                        {"dim", std::to_string(r.encoder.dim())}});
  write_resolved_config(dir, c);
  io.log << "final loss " << fmt_real(r.log.back().loss) << '\n';
}

inline void cmd_finetune(const RunConfig& c, CommandIo& io) {
  auto examples = read_finetune(c.required("finetune.input"));
  const auto cfg = finetune_config(c);
  const auto fill = c.size("finetune.nli_fill");
  if (fill > 0) {
    std::vector<std::string> corpus;
    if (auto p = c.path("finetune.nli_corpus")) {
      corpus = read_texts(*p);
    } else {
      for (const auto& ex : examples) {
        corpus.push_back(ex.query);
        corpus.push_back(ex.positive);
      }
    }
    Rng rng(derive_seed(cfg.seed, 60));
    for (auto& ex : examples) {
      if (ex.negatives.size() < cfg.hard_negatives) ex = fill_nli_negatives(ex, corpus, fill, rng);
    }
  }
  const auto dir = out_dir(c);
  auto r = finetune(std::span<const FinetuneExample>(examples), cfg, initial_encoder(c, cfg.seed));
  write_checkpoint_file(dir / "model.e5ck", r.encoder);
  atomic_write(dir / "finetune_loss.csv", [&](std::ostream& os) {
    os << "step,lr,total,kd,contrastive\n";
    for (const auto& s : r.log) {
      os << s.step << ',' << fmt_real(s.lr) << ',' << fmt_real(s.total) << ',' << fmt_real(s.kd) << ','
         << fmt_real(s.contrastive) << '\n';
    }
  });
  write_manifest(dir / "manifest.txt", {{"checkpoint", "model.e5ck"},
                                        {"loss_log", "finetune_loss.csv"},
                                        {"examples", std::to_string(examples.size())},
                                        {"steps", std::to_string(r.log.size())},
                                        {"final_loss", fmt_real(r.log.back().total)},
                                        {"vocab_size", std::to_string(r.encoder.tokenizer().vocab_size)},
                                        {"dim", std::to_string(r.encoder.dim())}});
  write_resolved_config(dir, c);
  io.log << "final loss " << fmt_real(r.log.back().total) << '\n';
}

inline void cmd_embed(const RunConfig& c, CommandIo& io) {
  const auto enc = load_checkpoint(c.required("model"));
  const auto docs = read_id_texts(c.required("embed.input"));
  const auto idx = build_index(std::span<const IdText>(docs), enc, parse_role(c.str("embed.role")));
  const auto path = out_path(c, "embed.output", "index.e5mx");
  save_index(idx, path);
  write_resolved_config(out_dir(c), c);
  io.log << "embedded " << docs.size() << " texts to " << path.string() << '\n';
}

inline void write_trec_run(std::ostream& os, std::span<const RankedList> runs) {
  for (const auto& run : runs) {
    for (std::size_t r = 0; r < run.items.size(); ++r) {
      os << run.query_id << " Q0 " << run.items[r].first << ' ' << r + 1 << ' ' << fmt_real(run.items[r].second)
         << " e5kit\n";
    }
  }
}

inline void cmd_search(const RunConfig& c, CommandIo& io) {
  const auto enc = load_checkpoint(c.required("model"));
  const auto idx = load_index(c.required("search.index"));
  if (idx.embeddings.cols() != enc.dim()) throw DimensionError("index width does not match the model");
  const auto queries = read_id_texts(c.required("search.queries"));
  const auto runs = search_all(std::span<const IdText>(queries), idx, c.size("search.k"), enc);
  const auto path = out_path(c, "search.output", "run.trec");
  atomic_write(path, [&](std::ostream& os) { write_trec_run(os, runs); });
  write_resolved_config(out_dir(c), c);
  io.log << "searched " << queries.size() << " queries\n";
}

inline void emit_report(const RunConfig& c, CommandIo& io, EvalReport report) {
  report.config = c.to_json();
  const auto text = report.to_json().dump(2) + "\n";
  io.out << text;
  if (auto p = c.path("eval.output")) atomic_write_text(*p, text);
}

inline std::string dataset_name(const RunConfig& c, std::string_view fallback_key) {
  if (auto d = c.path("eval.dataset")) return *d;
  if (auto p = c.path(fallback_key)) return fs::path(*p).stem().string();
  return {};
}

inline void cmd_eval_retrieval(const RunConfig& c, CommandIo& io) {
  const auto enc = load_checkpoint(c.required("model"));
  Corpus idx;
  if (auto p = c.path("eval.index")) {
    idx = load_index(*p);
  } else {
    const auto docs = read_id_texts(c.required("eval.corpus"));
    idx = build_index(std::span<const IdText>(docs), enc, parse_role(c.str("eval.corpus_role")));
  }
  if (idx.embeddings.cols() != enc.dim()) throw DimensionError("index width does not match the model");
  const auto queries = read_id_texts(c.required("eval.queries"));
  const auto qrels = read_qrels(fs::path(c.required("eval.qrels")));
  const auto runs = search_all(std::span<const IdText>(queries), idx, c.size("eval.k"), enc);
  const auto ks = c.number_list<std::size_t>("eval.recall_ks");
  const auto m = aggregate_retrieval(runs, qrels, ks);
  EvalReport rep{dataset_name(c, "eval.queries"), m.values, {}};
  rep.metrics["queries"] = static_cast<double>(m.queries);
  emit_report(c, io, std::move(rep));
}

inline void cmd_eval_sts(const RunConfig& c, CommandIo& io) {
  const auto enc = load_checkpoint(c.required("model"));
  const auto pairs = read_sts(c.required("eval.pairs"));
  const auto pred = sts_score(std::span<const ScoredTextPair>(pairs), enc);
  std::vector<double> gold;
  for (const auto& p : pairs) gold.push_back(p.score);
  EvalReport rep{dataset_name(c, "eval.pairs"), {{"spearman", spearman(pred, gold)}}, {}};
  emit_report(c, io, std::move(rep));
}

inline MatrixD embed_texts(const BagEncoder& enc, std::span<const LabeledText> items, Role role) {
  std::vector<TextInput> in;
  for (const auto& it : items) in.push_back({it.text, role});
  return enc.embed(in);
}

inline std::vector<std::string> labels_of(std::span<const LabeledText> items) {
  std::vector<std::string> out;
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

inline void cmd_eval_cluster(const RunConfig& c, CommandIo& io) {
  const auto enc = load_checkpoint(c.required("model"));
  const auto items = read_labeled(c.required("eval.input"));
  const auto gold = labels_of(items);
  std::size_t k = c.size("eval.clusters");
  if (k == 0) k = std::set<std::string>(gold.begin(), gold.end()).size();
  const auto x = embed_texts(enc, items, Role::query);
  const auto a = kmeans(x, k, c.u64("seed"), c.size("eval.max_iters"));
  const auto v = v_measure<std::size_t, std::string>(a.labels, gold);
  EvalReport rep{dataset_name(c, "eval.input"),
                 {{"v_measure", v.v}, {"homogeneity", v.homogeneity}, {"completeness", v.completeness},
                  {"clusters", static_cast<double>(k)}},
                 {}};
  emit_report(c, io, std::move(rep));
}

inline double zero_shot_accuracy(const BagEncoder& enc, std::span<const LabeledText> test, const PromptTemplate& tmpl,
                                 ZeroShotRoles roles = {}) {
  std::vector<std::string> inputs;
  for (const auto& it : test) inputs.push_back(it.text);
  const auto pred = zero_shot_predict(std::span<const std::string>(inputs), tmpl, enc, roles);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += tmpl.labels[pred[i]].first == test[i].label;
  return test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
}

inline double majority_share(std::span<const LabeledText> test) {
  std::map<std::string, std::size_t> counts;
  for (const auto& it : test) counts[it.label] += 1;
  std::size_t best = 0;
  for (const auto& [l, n] : counts) best = std::max(best, n);
  return test.empty() ? 0.0 : static_cast<double>(best) / static_cast<double>(test.size());
}

inline void cmd_eval_classify(const RunConfig& c, CommandIo& io) {
  const auto enc = load_checkpoint(c.required("model"));
  const auto test = read_labeled(c.required("eval.test"));
  const auto mode = c.str("eval.mode");
  EvalReport rep{dataset_name(c, "eval.test"), {}, {}};
  if (mode == "zero-shot") {
    const auto tmpl = PromptTemplate::from_json(Json::parse(read_file(c.required("eval.template"))));
    rep.metrics["accuracy"] = zero_shot_accuracy(enc, test, tmpl, {Role::query, parse_role(c.str("eval.label_role"))});
  } else if (mode == "linear-probe") {
    const auto train = read_labeled(c.required("eval.train"));
    const auto ytr = labels_of(train), yte = labels_of(test);
    ProbeConfig pc{c.size("eval.probe_steps"), c.real("eval.probe_lr")};
    rep.metrics["accuracy"] = linear_probe<std::string>(embed_texts(enc, train, Role::query), ytr,
                                                        embed_texts(enc, test, Role::query), yte, pc);
  } else {
    throw UsageError("eval.mode must be linear-probe or zero-shot, got \"" + mode + "\"");
  }
  rep.metrics["majority_baseline"] = majority_share(test);
  emit_report(c, io, std::move(rep));
}

inline void cmd_recipe(const RunConfig& c, CommandIo& io) {
  const auto name = c.required("recipe.name");
  RecipeTable t;
  if (name == "batch-size-sweep") {
    t = batch_size_sweep(c, &io.log);
  } else if (name == "negative-strategy-sweep") {
    t = negative_strategy_sweep(c, &io.log);
  } else if (name == "filter-ablation") {
    t = filter_ablation(c, &io.log);
  } else {
    throw UsageError("unknown recipe \"" + name + "\"");
  }
  const auto path = out_path(c, "recipe.output", name + ".csv");
  const auto csv = t.to_csv();
  atomic_write_text(path, csv);
  write_resolved_config(out_dir(c), c);
  io.out << csv;
}

inline void run_command(const std::string& command, const RunConfig& c, CommandIo& io) {
  if (command == "gen-synthetic") return cmd_gen_synthetic(c, io);
  if (command == "filter") return cmd_filter(c, io);
  if (command == "pretrain") return cmd_pretrain(c, io);
  if (command == "finetune") return cmd_finetune(c, io);
  if (command == "embed") return cmd_embed(c, io);
  if (command == "search") return cmd_search(c, io);
  if (command == "eval-retrieval") return cmd_eval_retrieval(c, io);
  if (command == "eval-sts") return cmd_eval_sts(c, io);
  if (command == "eval-cluster") return cmd_eval_cluster(c, io);
  if (command == "eval-classify") return cmd_eval_classify(c, io);
  if (command == "recipe") return cmd_recipe(c, io);
  throw UsageError("unknown command \"" + command + "\"");
}

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

inline void report_error(std::ostream& err, std::string_view kind, std::string_view message) {
  err << Json{{"error", kind}, {"message", message}}.dump() << '\n';
}

// Runs one command, mapping failures to exit codes and a one-line JSON error
// on `err`.
inline int run(const std::string& command, const RunConfig& c, std::ostream& out, std::ostream& err) {
  CommandIo io{out, err};
  try {
    run_command(command, c, io);
    return kExitOk;
  } catch (const UsageError& e) {
    report_error(err, "usage", e.what());
    return kExitUsage;
  } catch (const ConfigurationError& e) {
    report_error(err, "usage", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    report_error(err, "runtime", e.what());
    return kExitRuntime;
  }
}

}  // namespace e5kit
