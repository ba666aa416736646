// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "e5kit/contrastive.hpp"
#include "e5kit/encoder.hpp"
#include "e5kit/errors.hpp"
#include "e5kit/io.hpp"
#include "e5kit/rng.hpp"
#include "e5kit/tensor.hpp"

namespace e5kit {

struct RawPair {
  std::string query;
  std::string passage;
  std::string source;
  std::optional<std::int64_t> score;

  TextPair text_pair() const { return {query, passage, source}; }

  friend bool operator==(const RawPair&, const RawPair&) = default;
};

namespace detail {

inline bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n\f\v") == std::string_view::npos;
}

}  // namespace detail

inline RawPair parse_pair(const std::string& line, std::size_t lineno) {
  const Json obj = parse_json_line(line, lineno);
  RawPair p;
  p.query = require_string(obj, "query", lineno);
  p.passage = require_string(obj, "passage", lineno);
  p.source = require_string(obj, "source", lineno);
  if (auto it = obj.find("score"); it != obj.end() && !it->is_null()) {
    if (!it->is_number_integer()) throw ParseError(lineno, "field \"score\" must be an integer");
    p.score = it->get<std::int64_t>();
  }
  if (detail::blank(p.query)) throw ParseError(lineno, "empty query");
  if (detail::blank(p.passage)) throw ParseError(lineno, "empty passage");
  return p;
}

inline std::string format_pair(const RawPair& p) {
  Json obj;
  obj["query"] = p.query;
  obj["passage"] = p.passage;
  obj["source"] = p.source;
  if (p.score) obj["score"] = *p.score;
  return obj.dump();
}

// Streaming JSON-lines reader. In lenient mode malformed lines are skipped
// and counted instead of raising.
class PairReader {
 public:
  PairReader(std::istream& in, bool lenient = false) : in_(in), lenient_(lenient) {}

  std::optional<RawPair> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++lineno_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (detail::blank(line)) continue;
      try {
        return parse_pair(line, lineno_);
      } catch (const ParseError& e) {
        if (!lenient_) throw;
        skipped_.push_back(e.what());
      }
    }
    return std::nullopt;
  }

  const std::vector<std::string>& skipped() const noexcept { return skipped_; }

 private:
  std::istream& in_;
  bool lenient_;
  std::size_t lineno_ = 0;
  std::vector<std::string> skipped_;
};

inline std::vector<RawPair> ingest(std::istream& in, bool lenient = false,
                                   std::vector<std::string>* skipped = nullptr) {
  PairReader reader(in, lenient);
  std::vector<RawPair> out;
  while (auto p = reader.next()) out.push_back(std::move(*p));
  if (skipped) *skipped = reader.skipped();
  return out;
}

inline std::vector<RawPair> ingest(const std::filesystem::path& path, bool lenient = false,
                                   std::vector<std::string>* skipped = nullptr) {
  auto in = open_input(path);
  return ingest(in, lenient, skipped);
}

inline void write_pairs(std::ostream& os, std::span<const RawPair> pairs) {
  for (const auto& p : pairs) os << format_pair(p) << '\n';
}

inline std::vector<TextPair> to_text_pairs(std::span<const RawPair> pairs) {
  std::vector<TextPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.text_pair());
  return out;
}

// ---------------------------------------------------------------------------
// Heuristic rules

struct HeuristicConfig {
  std::size_t max_chars = 4096;
  std::int64_t min_score = 1;
  // Sources the rules apply to; empty means every source.
  std::vector<std::string> sources;

  bool applies_to(const std::string& source) const {
    return sources.empty() || std::find(sources.begin(), sources.end(), source) != sources.end();
  }
};

// Number of UTF-8 code points.
inline std::size_t char_count(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

struct DropRecord {
  std::size_t index = 0;
  std::string reason;
};

struct HeuristicResult {
  std::vector<RawPair> kept;
  std::vector<DropRecord> dropped;
};

inline std::optional<std::string> heuristic_reject(const RawPair& p, const HeuristicConfig& cfg) {
  if (!cfg.applies_to(p.source)) return std::nullopt;
  const std::size_t len = char_count(p.passage);
  if (len > cfg.max_chars) {
    return "passage length " + std::to_string(len) + " > " + std::to_string(cfg.max_chars);
  }
  if (p.score && *p.score < cfg.min_score) {
    return "score " + std::to_string(*p.score) + " < " + std::to_string(cfg.min_score);
  }
  return std::nullopt;
}

inline HeuristicResult heuristic_filter(std::span<const RawPair> pairs, const HeuristicConfig& cfg) {
  HeuristicResult out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (auto why = heuristic_reject(pairs[i], cfg)) {
      out.dropped.push_back({i, *why});
    } else {
      out.kept.push_back(pairs[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact-match decontamination

// Trims and collapses internal whitespace runs to a single space.
inline std::string normalize_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(c));
    }
  }
  return out;
}

class EvalTextSet {
 public:
  EvalTextSet() = default;
  explicit EvalTextSet(std::span<const std::string> texts) {
    for (const auto& t : texts) insert(t);
  }

  void insert(std::string_view text) {
    auto n = normalize_whitespace(text);
    if (!n.empty()) texts_.insert(std::move(n));
  }
  bool contains(std::string_view text) const { return texts_.count(normalize_whitespace(text)) > 0; }
  std::size_t size() const noexcept { return texts_.size(); }
  bool empty() const noexcept { return texts_.empty(); }

 private:
  std::unordered_set<std::string> texts_;
};

// Plain text, one document per line.
inline EvalTextSet load_eval_texts(const std::filesystem::path& path) {
  auto in = open_input(path);
  EvalTextSet set;
  std::string line;
  while (std::getline(in, line)) set.insert(line);
  return set;
}

inline bool contaminated(const RawPair& p, const EvalTextSet& eval) {
  return !eval.empty() && (eval.contains(p.query) || eval.contains(p.passage));
}

inline std::vector<RawPair> decontaminate(std::span<const RawPair> pairs, const EvalTextSet& eval) {
  std::vector<RawPair> out;
  for (const auto& p : pairs) {
    if (!contaminated(p, eval)) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Consistency-based filter

struct FilterConfig {
  std::size_t k = 2;
  std::size_t pool_size = 10000;
  std::uint64_t seed = 0;
  double tau = 0.01;

  void validate() const {
    if (k < 1) throw ConfigurationError("filter k must be >= 1");
    if (pool_size + 1 < k) throw ConfigurationError("filter k must be <= pool_size + 1");
    if (!(tau > 0.0)) throw ConfigurationError("temperature must be > 0");
  }
};

struct ConsistencyResult {
  std::vector<std::size_t> ranks;  // rank of each pair's own passage, 1-based
  std::vector<char> keep;
  std::vector<std::size_t> pool;   // indices of the pool passages
};

namespace detail {

inline MatrixD unit_rows(MatrixD m, const char* what) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = norm(m.row(i));
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw DegenerateEmbeddingError(std::string(what) + " " + std::to_string(i) + " has a zero embedding");
    }
    for (double& v : m.row(i)) v /= n;
  }
  return m;
}

}  // namespace detail

// Ranks every pair's own passage against one seeded pool of passages drawn
// from the same data. A pair whose own passage was drawn into the pool is
// compared against the rest of the pool. Pool passages that tie with the
// true passage rank ahead of it. Keeps the pair iff rank <= k.
template <TextEncoder E>
ConsistencyResult consistency_ranks(std::span<const RawPair> pairs, const E& scorer, const FilterConfig& cfg) {
  cfg.validate();
  if (cfg.pool_size > pairs.size()) {
    throw DataStarvationError("pool_size " + std::to_string(cfg.pool_size) + " exceeds the " +
                              std::to_string(pairs.size()) + " available passages");
  }
  std::vector<TextInput> qs, ps;
  qs.reserve(pairs.size());
  ps.reserve(pairs.size());
  for (const auto& p : pairs) {
    qs.push_back({p.query, Role::query});
    ps.push_back({p.passage, Role::passage});
  }
  const MatrixD q = detail::unit_rows(scorer.embed(qs), "query");
  const MatrixD p = detail::unit_rows(scorer.embed(ps), "passage");

  ConsistencyResult out;
  Rng rng(cfg.seed);
  out.pool = rng.sample_without_replacement(pairs.size(), cfg.pool_size);
  std::sort(out.pool.begin(), out.pool.end());
  MatrixD pool(out.pool.size(), p.cols());
  for (std::size_t j = 0; j < out.pool.size(); ++j) {
    std::copy(p.row(out.pool[j]).begin(), p.row(out.pool[j]).end(), pool.row(j).begin());
  }

  out.ranks.assign(pairs.size(), 0);
  out.keep.assign(pairs.size(), 0);
  const double inv_tau = 1.0 / cfg.tau;
  parallel_for(pairs.size(), [&](std::size_t i) {
    auto qi = q.row(i);
    const double truth = dot(qi, p.row(i)) * inv_tau;
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < out.pool.size(); ++j) {
      if (out.pool[j] == i) continue;
      if (dot(qi, pool.row(j)) * inv_tau >= truth) ++ahead;
    }
    out.ranks[i] = ahead + 1;
    out.keep[i] = out.ranks[i] <= cfg.k ? 1 : 0;
  });
  return out;
}

template <TextEncoder E>
std::vector<RawPair> consistency_filter(std::span<const RawPair> pairs, const E& scorer, const FilterConfig& cfg) {
  const auto r = consistency_ranks(pairs, scorer, cfg);
  std::vector<RawPair> kept;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (r.keep[i]) kept.push_back(pairs[i]);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Source sampling

inline void validate_weights(const std::map<std::string, double>& weights) {
  for (const auto& [source, w] : weights) {
    if (!(w > 0.0 && w <= 1.0)) {
      throw ConfigurationError("sample weight for source '" + source + "' must be in (0, 1], got " +
                               std::to_string(w));
    }
  }
}

// Retention mask: each pair independently kept with its source weight;
// sources without a weight are always kept.
inline std::vector<char> weighted_sample_mask(std::span<const RawPair> pairs,
                                              const std::map<std::string, double>& weights, std::uint64_t seed) {
  validate_weights(weights);
  Rng rng(seed);
  std::vector<char> keep(pairs.size(), 1);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double u = rng.uniform();  // drawn for every pair so streams stay aligned
    auto it = weights.find(pairs[i].source);
    if (it != weights.end()) keep[i] = u < it->second ? 1 : 0;
  }
  return keep;
}

inline std::vector<RawPair> weighted_sample(std::span<const RawPair> pairs,
                                            const std::map<std::string, double>& weights, std::uint64_t seed) {
  const auto keep = weighted_sample_mask(pairs, weights, seed);
  std::vector<RawPair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (keep[i]) out.push_back(pairs[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filter funnel

struct StageCounts {
  std::size_t input = 0;
  std::size_t dropped_heuristic = 0;
  std::size_t dropped_decontamination = 0;
  std::size_t dropped_consistency = 0;
  std::size_t dropped_sampling = 0;
  std::size_t kept = 0;

  bool reconciles() const {
    return dropped_heuristic + dropped_decontamination + dropped_consistency + dropped_sampling + kept == input;
  }

  Json to_json() const {
    Json j;
    j["input"] = input;
    j["dropped_by_heuristic"] = dropped_heuristic;
    j["dropped_by_decontamination"] = dropped_decontamination;
    j["dropped_by_consistency"] = dropped_consistency;
    j["dropped_by_sampling"] = dropped_sampling;
    j["kept"] = kept;
    return j;
  }
};

struct FilterReport {
  StageCounts total;
  std::map<std::string, StageCounts> per_source;

  Json to_json() const {
    Json j = total.to_json();
    Json src = Json::object();
    for (const auto& [name, c] : per_source) src[name] = c.to_json();
    j["per_source"] = std::move(src);
    return j;
  }
};

struct FilterPlan {
  bool heuristics = true;
  HeuristicConfig heuristic;
  EvalTextSet eval_texts;
  bool consistency = true;
  FilterConfig consistency_cfg;
  std::map<std::string, double> weights;
  std::uint64_t sample_seed = 0;
};

struct FilterOutcome {
  std::vector<RawPair> kept;
  FilterReport report;
  std::vector<std::size_t> kept_indices;  // positions in the input
};

enum class DropStage { none, heuristic, decontamination, consistency, sampling };

inline FilterReport tally_filter(std::span<const RawPair> input, std::span<const DropStage> fate) {
  if (fate.size() != input.size()) throw DimensionError("tally_filter: one fate per input pair");
  FilterReport report;
  for (std::size_t i = 0; i < input.size(); ++i) {
    for (StageCounts* c : {&report.total, &report.per_source[input[i].source]}) {
      c->input += 1;
      switch (fate[i]) {
        case DropStage::heuristic: c->dropped_heuristic += 1; break;
        case DropStage::decontamination: c->dropped_decontamination += 1; break;
        case DropStage::consistency: c->dropped_consistency += 1; break;
        case DropStage::sampling: c->dropped_sampling += 1; break;
        case DropStage::none: c->kept += 1; break;
      }
    }
  }
  return report;
}

// Runs heuristics, decontamination, the consistency filter (when a scorer is
// given and enabled) and source sampling, in that order. Every stage sees
// only the survivors of the previous one.
template <TextEncoder E>
FilterOutcome run_filter(std::span<const RawPair> input, const FilterPlan& plan, const E* scorer) {
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
  auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<RawPair> v;
    v.reserve(idx.size());
    for (auto i : idx) v.push_back(input[i]);
    return v;
  };
  if (plan.consistency && scorer != nullptr && !alive.empty()) {
    const auto subset = gather(alive);
    const auto r = consistency_ranks(std::span<const RawPair>(subset), *scorer, plan.consistency_cfg);
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < alive.size(); ++k) {
      if (r.keep[k]) {
        next.push_back(alive[k]);
      } else {
        fate[alive[k]] = DropStage::consistency;
      }
    }
    alive = std::move(next);
  }
  if (!plan.weights.empty()) {
    const auto subset = gather(alive);
    const auto keep = weighted_sample_mask(subset, plan.weights, plan.sample_seed);
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

  FilterOutcome out;
  out.report = tally_filter(input, fate);
  out.kept_indices = alive;
  out.kept = gather(alive);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
//
// Each topic owns a set of concepts. A concept has two unrelated surface
// forms: one used on the query side and one on the passage side, so an
// untrained encoder sees no lexical overlap between a query and its passage
// and must learn the association. A pair draws a few concepts for the query;
// its passage carries the passage forms of those concepts plus extra concepts
// from the same topic.

struct SyntheticSpec {
  std::size_t topics = 50;
  std::size_t pairs_per_topic = 200;
  std::size_t concepts_per_topic = 20;
  std::size_t query_concepts = 4;
  std::size_t passage_extra_concepts = 1;
  double noise_fraction = 0.0;
  std::size_t heldout_per_topic = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(noise_fraction >= 0.0 && noise_fraction < 1.0)) {
      throw ConfigurationError("noise_fraction must be in [0, 1)");
    }
    if (topics < 1 || concepts_per_topic < query_concepts + passage_extra_concepts || query_concepts < 1) {
      throw ConfigurationError("synthetic spec: need topics >= 1 and concepts_per_topic >= query+extra concepts");
    }
    if (noise_fraction > 0.0 && topics < 2) throw ConfigurationError("noise needs at least 2 topics");
  }
};

class SyntheticWorld {
 public:
  SyntheticWorld(std::size_t topics, std::size_t concepts_per_topic, std::uint64_t seed)
      : topics_(topics), concepts_(concepts_per_topic) {
    Rng rng(derive_seed(seed, 7));
    std::unordered_set<std::string> used;
    auto fresh = [&] {
      for (;;) {
        auto w = pseudo_word(rng, 3);
        if (used.insert(w).second) return w;
      }
    };
    query_forms_.resize(topics * concepts_per_topic);
    passage_forms_.resize(topics * concepts_per_topic);
    for (std::size_t i = 0; i < query_forms_.size(); ++i) {
      query_forms_[i] = fresh();
      passage_forms_[i] = fresh();
    }
  }

  static std::string pseudo_word(Rng& rng, std::size_t syllables) {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w.push_back(consonants[rng.below(consonants.size())]);
      w.push_back(vowels[rng.below(vowels.size())]);
    }
    return w;
  }

  std::size_t topics() const noexcept { return topics_; }
  std::size_t concepts_per_topic() const noexcept { return concepts_; }
  const std::string& query_form(std::size_t topic, std::size_t concept_id) const {
    return query_forms_[topic * concepts_ + concept_id];
  }
  const std::string& passage_form(std::size_t topic, std::size_t concept_id) const {
    return passage_forms_[topic * concepts_ + concept_id];
  }

  struct Item {
    std::string query;
    std::string passage;
    std::size_t topic = 0;
    std::vector<std::size_t> query_concepts;
    std::vector<std::size_t> passage_concepts;
  };

  Item make_item(std::size_t topic, std::size_t n_query, std::size_t n_extra, Rng& rng) const {
    Item it;
    it.topic = topic;
    auto picks = rng.sample_without_replacement(concepts_, n_query + n_extra);
    it.query_concepts.assign(picks.begin(), picks.begin() + static_cast<std::ptrdiff_t>(n_query));
    it.passage_concepts = picks;
    std::sort(it.passage_concepts.begin(), it.passage_concepts.end());
    it.query = query_text(topic, it.query_concepts, rng);
    it.passage = passage_text(topic, it.passage_concepts, rng);
    return it;
  }

  std::string query_text(std::size_t topic, std::span<const std::size_t> concept_ids, Rng& rng) const {
    std::vector<std::string> words;
    for (auto c : concept_ids) words.push_back(query_form(topic, c));
    words.push_back(std::string(stopword(rng)));
    return join_shuffled(words, rng);
  }

  std::string passage_text(std::size_t topic, std::span<const std::size_t> concept_ids, Rng& rng) const {
    std::vector<std::string> words;
    for (auto c : concept_ids) words.push_back(passage_form(topic, c));
    words.push_back(std::string(stopword(rng)));
    words.push_back(std::string(stopword(rng)));
    return join_shuffled(words, rng);
  }

 private:
  static std::string_view stopword(Rng& rng) {
    static constexpr std::array<std::string_view, 8> words{"the", "of", "and", "in", "a", "to", "with", "about"};
    return words[rng.below(words.size())];
  }

  static std::string join_shuffled(std::vector<std::string>& words, Rng& rng) {
    rng.shuffle(words);
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) out.push_back(' ');
      out += words[i];
    }
    return out;
  }

  std::size_t topics_;
  std::size_t concepts_;
  std::vector<std::string> query_forms_;
  std::vector<std::string> passage_forms_;
};

inline constexpr std::array<std::string_view, 5> kSyntheticSources{"reddit", "stackexchange", "wikipedia",
                                                                   "ccnews", "s2orc"};

struct SyntheticCorpus {
  std::vector<RawPair> pairs;
  std::vector<char> noisy;             // ground truth per pair
  std::vector<std::size_t> topics;     // topic of the query side
};

inline SyntheticWorld make_world(const SyntheticSpec& spec) {
  spec.validate();
  return SyntheticWorld(spec.topics, spec.concepts_per_topic, spec.seed);
}

// Exactly round(noise_fraction * N) pairs get their passage replaced by a
// fresh passage from a different topic.
inline SyntheticCorpus gen_synthetic(const SyntheticSpec& spec, const SyntheticWorld& world) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 100));
  SyntheticCorpus out;
  const std::size_t total = spec.topics * spec.pairs_per_topic;
  for (std::size_t t = 0; t < spec.topics; ++t) {
    for (std::size_t k = 0; k < spec.pairs_per_topic; ++k) {
      auto it = world.make_item(t, spec.query_concepts, spec.passage_extra_concepts, rng);
      const std::size_t idx = out.pairs.size();
      const auto source = kSyntheticSources[idx % kSyntheticSources.size()];
      RawPair p{std::move(it.query), std::move(it.passage), std::string(source), std::nullopt};
      if (source == "reddit") p.score = 1 + static_cast<std::int64_t>(rng.below(50));
      out.pairs.push_back(std::move(p));
      out.topics.push_back(t);
    }
  }
  out.noisy.assign(total, 0);
  const auto n_noisy = static_cast<std::size_t>(std::llround(spec.noise_fraction * static_cast<double>(total)));
  Rng noise_rng(derive_seed(spec.seed, 102));
  for (std::size_t idx : noise_rng.sample_without_replacement(total, n_noisy)) {
    std::size_t other = static_cast<std::size_t>(noise_rng.below(spec.topics - 1));
    if (other >= out.topics[idx]) ++other;
    auto it = world.make_item(other, spec.query_concepts, spec.passage_extra_concepts, noise_rng);
    out.pairs[idx].passage = std::move(it.passage);
    out.noisy[idx] = 1;
  }
  return out;
}

inline SyntheticCorpus gen_synthetic(const SyntheticSpec& spec) { return gen_synthetic(spec, make_world(spec)); }

struct IdText {
  std::string id;
  std::string text;

  friend bool operator==(const IdText&, const IdText&) = default;
};

struct LabeledText {
  std::string text;
  std::string label;
};

struct ScoredTextPair {
  std::string text1;
  std::string text2;
  double score = 0.0;
};

// Graded relevance: query id -> doc id -> grade.
using Qrels = std::map<std::string, std::map<std::string, int>>;

struct RetrievalSet {
  std::vector<IdText> queries;
  std::vector<IdText> corpus;
  Qrels qrels;
};

// Fresh clean pairs from the same world, for held-out retrieval: query i is
// relevant to doc i only.
inline RetrievalSet gen_heldout(const SyntheticSpec& spec, const SyntheticWorld& world) {
  Rng rng(derive_seed(spec.seed, 101));
  RetrievalSet out;
  std::size_t n = 0;
  for (std::size_t t = 0; t < spec.topics; ++t) {
    for (std::size_t k = 0; k < spec.heldout_per_topic; ++k, ++n) {
      auto it = world.make_item(t, spec.query_concepts, spec.passage_extra_concepts, rng);
      const auto qid = "q" + std::to_string(n);
      const auto did = "d" + std::to_string(n);
      out.queries.push_back({qid, std::move(it.query)});
      out.corpus.push_back({did, std::move(it.passage)});
      out.qrels[qid][did] = 1;
    }
  }
  return out;
}

// Query-form text vs passage-form text sharing `overlap` of their concepts;
// the gold score is the overlap count.
inline std::vector<ScoredTextPair> gen_sts(const SyntheticSpec& spec, const SyntheticWorld& world,
                                           std::size_t count) {
  Rng rng(derive_seed(spec.seed, 103));
  const std::size_t qc = spec.query_concepts;
  std::vector<ScoredTextPair> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t = static_cast<std::size_t>(rng.below(spec.topics));
    const std::size_t overlap = i % (qc + 1);
    auto picks = rng.sample_without_replacement(world.concepts_per_topic(), 2 * qc - overlap);
    std::vector<std::size_t> a(picks.begin(), picks.begin() + static_cast<std::ptrdiff_t>(qc));
    std::vector<std::size_t> b(picks.begin(), picks.begin() + static_cast<std::ptrdiff_t>(overlap));
    b.insert(b.end(), picks.begin() + static_cast<std::ptrdiff_t>(qc), picks.end());
    out.push_back({world.query_text(t, a, rng), world.passage_text(t, b, rng), static_cast<double>(overlap)});
  }
  return out;
}

// Queries labeled with their topic, drawn from the first `topics` topics.
inline std::vector<LabeledText> gen_topic_labeled(const SyntheticSpec& spec, const SyntheticWorld& world,
                                                  std::size_t topics, std::size_t per_topic,
                                                  std::uint64_t stream) {
  Rng rng(derive_seed(spec.seed, stream));
  std::vector<LabeledText> out;
  for (std::size_t t = 0; t < std::min(topics, spec.topics); ++t) {
    for (std::size_t k = 0; k < per_topic; ++k) {
      auto it = world.make_item(t, spec.query_concepts, spec.passage_extra_concepts, rng);
      out.push_back({std::move(it.query), "topic" + std::to_string(t)});
    }
  }
  return out;
}

struct SyntheticFinetune {
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;
  std::vector<double> teacher_scores;
};

// Fine-tuning examples with same-topic hard negatives and an oracle teacher
// whose score is proportional to concept overlap with the query.
inline std::vector<SyntheticFinetune> gen_finetune_examples(const SyntheticSpec& spec, const SyntheticWorld& world,
                                                            std::size_t count, std::size_t hard_negatives,
                                                            std::uint64_t stream, double teacher_scale = 2.0) {
  Rng rng(derive_seed(spec.seed, stream));
  std::vector<SyntheticFinetune> out;
  auto overlap = [](const std::vector<std::size_t>& q, const std::vector<std::size_t>& p) {
    std::size_t n = 0;
    for (auto c : q) n += std::binary_search(p.begin(), p.end(), c);
    return static_cast<double>(n);
  };
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t = static_cast<std::size_t>(rng.below(spec.topics));
    auto pos = world.make_item(t, spec.query_concepts, spec.passage_extra_concepts, rng);
    SyntheticFinetune ex{pos.query, pos.passage, {}, {teacher_scale * overlap(pos.query_concepts, pos.passage_concepts)}};
    for (std::size_t j = 0; j < hard_negatives; ++j) {
      auto neg = world.make_item(t, spec.query_concepts, spec.passage_extra_concepts, rng);
      ex.teacher_scores.push_back(teacher_scale * overlap(pos.query_concepts, neg.passage_concepts));
      ex.negatives.push_back(std::move(neg.passage));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// Sentiment corpus for prompt-based zero-shot classification. Reviews carry
// planted polarity cue words among neutral fillers; training passages
// describe the review with polarity adjectives.
struct PolaritySpec {
  std::size_t train_pairs = 4000;
  std::size_t test_items = 500;
  double positive_share = 0.6;
  std::size_t cues_per_review = 2;
  std::size_t fillers_per_review = 4;
  std::uint64_t seed = 0;
};

struct PolarityCorpus {
  std::vector<RawPair> pairs;
  std::vector<LabeledText> test;  // raw review text, label "negative" or "positive"
};

inline PolarityCorpus gen_polarity(const PolaritySpec& spec) {
  static constexpr std::array<std::string_view, 10> pos_cues{"enjoy", "love", "brilliant", "delightful", "charming",
                                                              "superb", "moving", "fun", "beautiful", "masterpiece"};
  static constexpr std::array<std::string_view, 10> neg_cues{"hate", "boring", "waste", "dull", "tedious",
                                                              "mess", "annoying", "disappointing", "clumsy", "bland"};
  static constexpr std::array<std::string_view, 5> pos_adj{"great", "good", "excellent", "wonderful", "fantastic"};
  static constexpr std::array<std::string_view, 5> neg_adj{"terrible", "bad", "awful", "horrible", "poor"};
  Rng word_rng(derive_seed(spec.seed, 200));
  std::vector<std::string> fillers;
  std::unordered_set<std::string> seen;
  while (fillers.size() < 200) {
    auto w = SyntheticWorld::pseudo_word(word_rng, 3);
    if (seen.insert(w).second) fillers.push_back(w);
  }
  Rng rng(derive_seed(spec.seed, 201));
  auto review = [&](bool positive) {
    std::vector<std::string> words;
    const auto& cues = positive ? pos_cues : neg_cues;
    for (auto c : rng.sample_without_replacement(cues.size(), spec.cues_per_review)) words.emplace_back(cues[c]);
    for (std::size_t k = 0; k < spec.fillers_per_review; ++k) words.push_back(fillers[rng.below(fillers.size())]);
    rng.shuffle(words);
    std::string s;
    for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
    return s;
  };
  PolarityCorpus out;
  for (std::size_t i = 0; i < spec.train_pairs; ++i) {
    const bool positive = rng.bernoulli(0.5);
    const auto& adj = positive ? pos_adj : neg_adj;
    auto a = rng.sample_without_replacement(adj.size(), 2);
    std::string passage = std::string(adj[a[0]]) + " and " + std::string(adj[a[1]]) + " movie with " +
                          fillers[rng.below(fillers.size())];
    out.pairs.push_back({"movie review: " + review(positive), std::move(passage), "reviews", std::nullopt});
  }
  for (std::size_t i = 0; i < spec.test_items; ++i) {
    const bool positive = rng.uniform() < spec.positive_share;
    out.test.push_back({review(positive), positive ? "positive" : "negative"});
  }
  return out;
}

}  // namespace e5kit
