// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "e5kit/errors.hpp"
#include "e5kit/io.hpp"

namespace e5kit {

struct KeySpec {
  std::string_view key;
  std::string_view fallback;
  std::string_view help;
};

// Every recognised configuration key with its default value.
inline constexpr KeySpec kConfigKeys[] = {
    {"seed", "0", "global seed"},
    {"out", "out", "output directory"},

    {"encoder.vocab_size", "32768", "hashed vocabulary size"},
    {"encoder.dim", "64", "embedding width"},
    {"encoder.hash_seed", "0", "token hash seed"},
    {"encoder.max_tokens", "64", "token budget per text, prefix included"},
    {"encoder.lowercase", "true", "lowercase before hashing"},
    {"encoder.table_scale", "0.01", "init std of the token table"},
    {"encoder.bias_scale", "1.0", "init std of the projection bias"},
    {"encoder.init", "", "checkpoint to start from instead of a random init"},

    {"synthetic.mode", "topics", "topics | polarity"},
    {"synthetic.topics", "50", "number of topics"},
    {"synthetic.pairs_per_topic", "200", "training pairs per topic"},
    {"synthetic.concepts_per_topic", "20", "concepts owned by each topic"},
    {"synthetic.query_concepts", "4", "concepts per query"},
    {"synthetic.passage_extra_concepts", "1", "extra same-topic concepts per passage"},
    {"synthetic.noise_fraction", "0", "share of pairs given a passage from another topic"},
    {"synthetic.heldout_per_topic", "20", "held-out retrieval pairs per topic"},
    {"synthetic.sts_pairs", "500", "STS pairs"},
    {"synthetic.cluster_topics", "10", "topics in the clustering set"},
    {"synthetic.cluster_per_topic", "30", "texts per topic in the clustering set"},
    {"synthetic.classify_topics", "5", "topics in the classification sets"},
    {"synthetic.classify_train_per_topic", "40", "training texts per class"},
    {"synthetic.classify_test_per_topic", "40", "test texts per class"},
    {"synthetic.finetune_examples", "2000", "fine-tuning examples"},
    {"synthetic.hard_negatives", "7", "hard negatives per fine-tuning example"},
    {"polarity.train_pairs", "4000", "review/description training pairs"},
    {"polarity.test_items", "500", "labelled test reviews"},
    {"polarity.positive_share", "0.6", "share of positive test reviews"},

    {"filter.input", "", "pairs JSON-lines to filter"},
    {"filter.output", "", "kept pairs; the report goes next to it"},
    {"filter.lenient", "false", "skip malformed lines instead of failing"},
    {"filter.heuristics", "true", "apply length and score rules"},
    {"filter.max_chars", "4096", "drop pairs whose passage has more characters than this"},
    {"filter.min_score", "1", "drop scored pairs below this score"},
    {"filter.heuristic_sources", "", "comma list of sources the rules apply to; empty means all"},
    {"filter.eval_texts", "", "evaluation texts to decontaminate against, one per line"},
    {"filter.consistency", "true", "run the consistency filter"},
    {"filter.scorer", "", "scorer checkpoint; empty trains one on the input with pretrain.* settings"},
    {"filter.k", "2", "keep pairs whose passage ranks within the top k"},
    {"filter.pool_size", "10000", "random passage pool size"},
    {"filter.tau", "0.01", "scoring temperature"},
    {"filter.rounds", "1", "consistency rounds; later rounds retrain the scorer on survivors"},
    {"filter.weights", "", "source sampling weights, e.g. s2orc:0.3,reddit:1"},

    {"pretrain.input", "", "training pairs JSON-lines"},
    {"pretrain.batch_size", "256", "queries per batch"},
    {"pretrain.steps", "2000", "optimizer steps"},
    {"pretrain.lr", "0.01", "peak learning rate"},
    {"pretrain.warmup", "100", "linear warmup steps"},
    {"pretrain.tau", "0.01", "temperature"},
    {"pretrain.strategy_tau", "", "temperature for pre-batch and momentum-queue runs; empty means pretrain.tau"},
    {"pretrain.negatives", "in-batch", "in-batch | pre-batch | momentum-queue"},
    {"pretrain.window", "1", "pre-batch window in batches"},
    {"pretrain.queue_size", "4096", "momentum queue capacity in rows"},
    {"pretrain.momentum", "0.999", "momentum encoder coefficient"},
    {"pretrain.symmetric_sources", "citation", "comma list of sources with random side assignment"},
    {"pretrain.log_every", "100", "progress line interval on stderr"},

    {"optim.weight_decay", "0.01", "AdamW decoupled weight decay"},
    {"optim.beta1", "0.9", "AdamW beta1"},
    {"optim.beta2", "0.999", "AdamW beta2"},
    {"optim.eps", "1e-8", "AdamW epsilon"},

    {"finetune.input", "", "fine-tuning examples JSON-lines"},
    {"finetune.alpha", "0.2", "contrastive weight"},
    {"finetune.hard_negatives", "7", "hard negatives per example"},
    {"finetune.tau", "0.01", "temperature"},
    {"finetune.epochs", "3", "passes over the examples"},
    {"finetune.batch_size", "256", "examples per batch"},
    {"finetune.lr", "0.001", "peak learning rate"},
    {"finetune.warmup", "400", "linear warmup steps"},
    {"finetune.use_kd", "true", "add the distillation term"},
    {"finetune.nli_fill", "0", "random negatives added to examples short of hard_negatives"},
    {"finetune.nli_corpus", "", "sentence JSON-lines for random fills; empty uses the examples' own texts"},

    {"embed.input", "", "JSON-lines {id, text}"},
    {"embed.role", "passage", "query | passage | none"},
    {"embed.output", "", "index path; ids go to <path>.ids"},

    {"model", "", "encoder checkpoint for embed, search and eval commands"},
    {"search.index", "", "index written by embed"},
    {"search.queries", "", "JSON-lines {id, text}"},
    {"search.k", "100", "hits per query"},
    {"search.output", "", "TREC run file"},

    {"eval.dataset", "", "dataset name echoed in the report"},
    {"eval.corpus", "", "corpus JSON-lines for eval-retrieval"},
    {"eval.index", "", "prebuilt index for eval-retrieval instead of eval.corpus"},
    {"eval.corpus_role", "passage", "prefix role for corpus texts; query suits duplicate-question sets"},
    {"eval.queries", "", "queries JSON-lines for eval-retrieval"},
    {"eval.qrels", "", "TREC qrels for eval-retrieval"},
    {"eval.k", "100", "retrieval depth"},
    {"eval.recall_ks", "10,100", "comma list of recall cutoffs"},
    {"eval.pairs", "", "STS JSON-lines {text1, text2, score}"},
    {"eval.input", "", "clustering JSON-lines {text, label}"},
    {"eval.clusters", "0", "k for k-means; 0 uses the gold class count"},
    {"eval.max_iters", "100", "k-means iteration cap"},
    {"eval.mode", "linear-probe", "linear-probe | zero-shot"},
    {"eval.train", "", "classification training JSON-lines {text, label}"},
    {"eval.test", "", "classification test JSON-lines {text, label}"},
    {"eval.template", "", "zero-shot prompt template JSON"},
    {"eval.label_role", "passage", "prefix role for zero-shot label texts"},
    {"eval.probe_steps", "500", "linear probe gradient steps"},
    {"eval.probe_lr", "0.1", "linear probe step size"},
    {"eval.output", "", "optional copy of the report"},

    {"recipe.name", "", "batch-size-sweep | filter-ablation | negative-strategy-sweep"},
    {"recipe.seeds", "1,2,3", "comma list of seeds averaged per cell"},
    {"recipe.batch_sizes", "16,64,256", "batch-size-sweep grid"},
    {"recipe.strategies", "in-batch,pre-batch,momentum-queue", "negative-strategy-sweep grid"},
    {"recipe.steps", "1000", "training steps per cell"},
    {"recipe.noise_fraction", "0.2", "filter-ablation corpus noise"},
    {"recipe.topics", "60", "filter-ablation corpus topics"},
    {"recipe.scorer_steps", "700", "filter-ablation scorer steps"},
    {"recipe.scorer_tau", "0.1", "filter-ablation scorer temperature"},
    {"recipe.output", "", "CSV path; defaults to <out>/<name>.csv"},
};

inline const KeySpec* find_key(std::string_view key) {
  for (const auto& k : kConfigKeys) {
    if (k.key == key) return &k;
  }
  return nullptr;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = std::min(s.find(sep, start), s.size());
    auto item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = end + 1;
  }
  return out;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : kConfigKeys) values_.emplace(std::string(k.key), std::string(k.fallback));
  }

  void set(std::string_view key, std::string value) {
    if (!find_key(key)) throw UsageError("unknown config key: " + std::string(key));
    values_[std::string(key)] = std::move(value);
  }

  // "key=value"; surrounding whitespace is ignored.
  void assign(std::string_view line) {
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw UsageError("expected key=value, got: " + std::string(line));
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError("empty key in: " + std::string(line));
    set(key, trim(line.substr(eq + 1)));
  }

  // Blank lines and lines starting with '#' are skipped.
  void load(std::istream& in, const std::string& origin = "config") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto t = trim(line);
      if (t.empty() || t.front() == '#') continue;
      try {
        assign(t);
      } catch (const UsageError& e) {
        throw UsageError(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void load_file(const std::filesystem::path& path) {
    auto in = open_input(path);
    load(in, path.string());
  }

  const std::string& str(std::string_view key) const {
    const auto it = values_.find(std::string(key));
    if (it == values_.end()) throw UsageError("unknown config key: " + std::string(key));
    return it->second;
  }

  std::optional<std::string> path(std::string_view key) const {
    const auto& v = str(key);
    return v.empty() ? std::nullopt : std::optional<std::string>(v);
  }

  std::string required(std::string_view key) const {
    const auto& v = str(key);
    if (v.empty()) throw UsageError("missing required config key: " + std::string(key));
    return v;
  }

  std::uint64_t u64(std::string_view key) const { return parse_number<std::uint64_t>(key); }
  std::size_t size(std::string_view key) const { return parse_number<std::size_t>(key); }
  std::int64_t i64(std::string_view key) const { return parse_number<std::int64_t>(key); }

  double real(std::string_view key) const {
    const auto& v = str(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw UsageError("config key " + std::string(key) + " expects a number, got \"" + v + "\"");
  }

  bool flag(std::string_view key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("config key " + std::string(key) + " expects true or false, got \"" + v + "\"");
  }

  std::vector<std::string> list(std::string_view key) const { return split_list(str(key)); }

  template <class T>
  std::vector<T> number_list(std::string_view key) const {
    std::vector<T> out;
    for (const auto& item : list(key)) {
      T v{};
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size()) {
        throw UsageError("config key " + std::string(key) + " has a bad list item \"" + item + "\"");
      }
      out.push_back(v);
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  // Full resolved configuration, one key=value per line in key order.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
    return os.str();
  }

  Json to_json() const {
    Json j = Json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

 private:
  template <class T>
  T parse_number(std::string_view key) const {
    const auto& v = str(key);
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw UsageError("config key " + std::string(key) + " expects an integer, got \"" + v + "\"");
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace e5kit
