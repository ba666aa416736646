// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "e5kit/datapipe.hpp"
#include "e5kit/encoder.hpp"
#include "e5kit/errors.hpp"
#include "e5kit/io.hpp"
#include "e5kit/rng.hpp"
#include "e5kit/tensor.hpp"

namespace e5kit {

// ---------------------------------------------------------------------------
// Index and exact search

struct Corpus {
  std::vector<std::string> ids;
  std::vector<std::string> texts;  // empty when loaded from an embedding store
  MatrixF embeddings;
  std::vector<double> norms;

  std::size_t size() const noexcept { return ids.size(); }

  void finalize() {
    if (embeddings.rows() != ids.size()) throw ValidationError("embedding rows != number of doc ids");
    std::unordered_set<std::string_view> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw ValidationError("duplicate doc id '" + id + "'");
    }
    norms.resize(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      norms[i] = norm(embeddings.row(i));
      if (!(norms[i] > 0.0)) throw DegenerateEmbeddingError("doc '" + ids[i] + "' has a zero embedding");
    }
  }
};

// Encodes documents with the passage prefix (or the query prefix, for
// symmetric tasks such as duplicate-question retrieval).
template <TextEncoder E>
Corpus build_index(std::span<const IdText> docs, const E& encoder, Role role = Role::passage) {
  if (docs.empty()) throw ValidationError("cannot index an empty corpus");
  Corpus c;
  std::unordered_set<std::string_view> seen;
  std::vector<TextInput> inputs;
  for (const auto& d : docs) {
    if (!seen.insert(d.id).second) throw ValidationError("duplicate doc id '" + d.id + "'");
    c.ids.push_back(d.id);
    c.texts.push_back(d.text);
  }
  for (const auto& t : c.texts) inputs.push_back({t, role});
  c.embeddings = encoder.embed(inputs).template cast<float>();
  c.finalize();
  return c;
}

// Embeddings go to `path` in the E5MX format (f32); ids go to `path.ids`.
inline void save_index(const Corpus& c, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& os) { write_matrix(os, c.embeddings); }, true);
  auto ids_path = path;
  ids_path += ".ids";
  atomic_write(ids_path, [&](std::ostream& os) {
    for (const auto& id : c.ids) os << id << '\n';
  });
}

inline Corpus load_index(const std::filesystem::path& path) {
  Corpus c;
  {
    auto in = open_input(path);
    c.embeddings = read_matrix<float>(in);
  }
  auto ids_path = path;
  ids_path += ".ids";
  auto in = open_input(ids_path);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) c.ids.push_back(line);
  }
  c.finalize();
  return c;
}

struct RankedList {
  std::string query_id;
  std::vector<std::pair<std::string, double>> items;  // (doc id, score), best first
};

// Cosine of a query vector against one stored document.
inline double corpus_cosine(std::span<const double> q, double q_norm, const Corpus& c, std::size_t doc) {
  return dot(q, c.embeddings.row(doc)) / (q_norm * c.norms[doc]);
}

// Exact top-k by cosine; ties resolved by ascending doc id.
inline RankedList search_embedding(std::span<const double> query, const Corpus& corpus, std::size_t k,
                                   std::string query_id = {}) {
  if (corpus.size() == 0) throw ValidationError("search over an empty corpus");
  if (k < 1) throw ConfigurationError("k must be >= 1");
  const double qn = norm(query);
  if (!(qn > 0.0)) throw DegenerateEmbeddingError("query has a zero embedding");
  std::vector<double> scores(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) scores[i] = corpus_cosine(query, qn, corpus, i);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t top = std::min(k, corpus.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return corpus.ids[a] < corpus.ids[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(), better);
  RankedList out{std::move(query_id), {}};
  out.items.reserve(top);
  for (std::size_t r = 0; r < top; ++r) out.items.emplace_back(corpus.ids[order[r]], scores[order[r]]);
  return out;
}

template <TextEncoder E>
RankedList search_topk(std::string_view query, const Corpus& corpus, std::size_t k, const E& encoder,
                       std::string query_id = {}) {
  const TextInput in{query, Role::query};
  const MatrixD q = encoder.embed(std::span<const TextInput>(&in, 1));
  return search_embedding(q.row(0), corpus, k, std::move(query_id));
}

template <TextEncoder E>
std::vector<RankedList> search_all(std::span<const IdText> queries, const Corpus& corpus, std::size_t k,
                                   const E& encoder) {
  std::vector<TextInput> inputs;
  for (const auto& q : queries) inputs.push_back({q.text, Role::query});
  const MatrixD emb = encoder.embed(inputs);
  std::vector<RankedList> out(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) { out[i] = search_embedding(emb.row(i), corpus, k, queries[i].id); });
  return out;
}

// ---------------------------------------------------------------------------
// Ranking metrics. `relevance` maps doc id -> grade for one query.

using Relevance = std::map<std::string, int>;

inline int grade_of(const Relevance& rel, const std::string& doc) {
  auto it = rel.find(doc);
  return it == rel.end() ? 0 : it->second;
}

// Gain 2^rel - 1, discount log2(rank + 1); 0 when the query has no relevant doc.
inline double ndcg_at_k(const RankedList& ranked, const Relevance& rel, std::size_t k = 10) {
  if (k < 1) throw ConfigurationError("k must be >= 1");
  std::vector<int> grades;
  for (const auto& [doc, g] : rel) {
    if (g > 0) grades.push_back(g);
  }
  if (grades.empty()) return 0.0;
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double ideal = 0.0;
  for (std::size_t r = 0; r < std::min(k, grades.size()); ++r) {
    ideal += (std::exp2(grades[r]) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranked.items.size()); ++r) {
    const int g = grade_of(rel, ranked.items[r].first);
    if (g > 0) dcg += (std::exp2(g) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  return dcg / ideal;
}

inline double mrr_at_k(const RankedList& ranked, const Relevance& rel, std::size_t k = 10) {
  if (k < 1) throw ConfigurationError("k must be >= 1");
  for (std::size_t r = 0; r < std::min(k, ranked.items.size()); ++r) {
    if (grade_of(rel, ranked.items[r].first) > 0) return 1.0 / static_cast<double>(r + 1);
  }
  return 0.0;
}

// Undefined (nullopt) when the query has no relevant doc.
inline std::optional<double> recall_at_k(const RankedList& ranked, const Relevance& rel, std::size_t k) {
  if (k < 1) throw ConfigurationError("k must be >= 1");
  std::size_t relevant = 0;
  for (const auto& [doc, g] : rel) relevant += g > 0;
  if (relevant == 0) return std::nullopt;
  std::size_t hit = 0;
  for (std::size_t r = 0; r < std::min(k, ranked.items.size()); ++r) {
    hit += grade_of(rel, ranked.items[r].first) > 0;
  }
  return static_cast<double>(hit) / static_cast<double>(relevant);
}

struct RetrievalMetrics {
  std::map<std::string, double> values;
  std::size_t queries = 0;
  std::size_t skipped_recall = 0;  // queries without relevant docs
};

// Averages over queries that have judgments in qrels.
inline RetrievalMetrics aggregate_retrieval(std::span<const RankedList> runs, const Qrels& qrels,
                                            std::span<const std::size_t> recall_ks) {
  RetrievalMetrics m;
  double ndcg = 0.0, mrr = 0.0;
  std::vector<double> recall(recall_ks.size(), 0.0);
  std::size_t recall_n = 0;
  for (const auto& run : runs) {
    auto it = qrels.find(run.query_id);
    if (it == qrels.end()) continue;
    ++m.queries;
    ndcg += ndcg_at_k(run, it->second, 10);
    mrr += mrr_at_k(run, it->second, 10);
    bool defined = true;
    for (std::size_t j = 0; j < recall_ks.size(); ++j) {
      auto r = recall_at_k(run, it->second, recall_ks[j]);
      if (!r) {
        defined = false;
        break;
      }
      recall[j] += *r;
    }
    if (defined) {
      ++recall_n;
    } else {
      ++m.skipped_recall;
    }
  }
  const double nq = m.queries ? static_cast<double>(m.queries) : 1.0;
  m.values["ndcg@10"] = ndcg / nq;
  m.values["mrr@10"] = mrr / nq;
  for (std::size_t j = 0; j < recall_ks.size(); ++j) {
    m.values["recall@" + std::to_string(recall_ks[j])] = recall_n ? recall[j] / static_cast<double>(recall_n) : 0.0;
  }
  return m;
}

// Whitespace-separated `query-id 0 doc-id grade` lines.
inline Qrels read_qrels(std::istream& in) {
  Qrels q;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string qid, iter, did;
    long long grade = 0;
    if (!(ss >> qid)) continue;
    if (!(ss >> iter >> did >> grade)) throw ParseError(lineno, "expected 'query-id 0 doc-id grade'");
    q[qid][did] = static_cast<int>(grade);
  }
  return q;
}

inline std::vector<IdText> read_id_texts(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::vector<IdText> out;
  for_each_line(in, [&](std::size_t lineno, const std::string& line) {
    const Json obj = parse_json_line(line, lineno);
    IdText it{require_string(obj, "id", lineno), require_string(obj, "text", lineno)};
    if (detail::blank(it.text)) throw ParseError(lineno, "empty text");
    out.push_back(std::move(it));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Rank correlation

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelationError("correlation undefined: zero variance input");
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size()) throw DimensionError("spearman: length mismatch");
  if (pred.size() < 2) throw DimensionError("spearman: need at least 2 points");
  const auto rp = average_ranks(pred);
  const auto rg = average_ranks(gold);
  return pearson(rp, rg);
}

// Cosine per pair, both sides encoded with the query prefix.
template <TextEncoder E>
std::vector<double> sts_score(std::span<const ScoredTextPair> pairs, const E& encoder) {
  std::vector<TextInput> a, b;
  for (const auto& p : pairs) {
    a.push_back({p.text1, Role::query});
    b.push_back({p.text2, Role::query});
  }
  const MatrixD ea = encoder.embed(a), eb = encoder.embed(b);
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double na = norm(ea.row(i)), nb = norm(eb.row(i));
    if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateEmbeddingError("sts pair " + std::to_string(i) + " has a zero embedding");
    out[i] = std::clamp(dot(ea.row(i), eb.row(i)) / (na * nb), -1.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clustering

struct ClusterAssignment {
  std::vector<std::size_t> labels;
  MatrixD centroids;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

// Lloyd iterations from a k-means++ seeding. Stops when assignments stop
// changing or after max_iters. An empty cluster keeps its previous centroid.
inline ClusterAssignment kmeans(const MatrixD& points, std::size_t k, std::uint64_t seed, std::size_t max_iters = 100) {
  const std::size_t n = points.rows();
  if (k < 1) throw ValidationError("k must be >= 1");
  if (k > n) throw ValidationError("k = " + std::to_string(k) + " exceeds point count " + std::to_string(n));
  Rng rng(seed);
  ClusterAssignment out;
  out.centroids = MatrixD(k, points.cols());
  std::vector<char> chosen(n, 0);
  auto take = [&](std::size_t c, std::size_t p) {
    std::copy(points.row(p).begin(), points.row(p).end(), out.centroids.row(c).begin());
    chosen[p] = 1;
  };
  take(0, static_cast<std::size_t>(rng.below(n)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = detail::sq_dist(points.row(i), out.centroids.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // Every remaining point coincides with a centroid.
      for (std::size_t i = 0; i < n && pick == n; ++i) {
        if (!chosen[i]) pick = i;
      }
    }
    take(c, pick);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], detail::sq_dist(points.row(i), out.centroids.row(c)));
  }

  out.labels.assign(n, k);
  std::vector<std::size_t> counts(k);
  for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iters, 1); ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = detail::sq_dist(points.row(i), out.centroids.row(c));
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (out.labels[i] != best) {
        out.labels[i] = best;
        changed = true;
      }
    }
    out.iterations = iter + 1;
    if (!changed) break;
    MatrixD sums(k, points.cols());
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(out.labels[i]);
      auto p = points.row(i);
      for (std::size_t j = 0; j < s.size(); ++j) s[j] += p[j];
      ++counts[out.labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto dst = out.centroids.row(c);
      auto s = sums.row(c);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = s[j] / static_cast<double>(counts[c]);
    }
  }
  out.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) out.inertia += detail::sq_dist(points.row(i), out.centroids.row(out.labels[i]));
  return out;
}

struct VMeasure {
  double homogeneity = 0.0;
  double completeness = 0.0;
  double v = 0.0;
};

namespace detail {

template <class L>
std::vector<std::size_t> dense_codes(std::span<const L> labels, std::size_t& distinct) {
  std::map<L, std::size_t> code;
  for (const auto& l : labels) code.emplace(l, 0);
  std::size_t next = 0;
  for (auto& [l, c] : code) c = next++;
  distinct = next;
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(code.at(l));
  return out;
}

}  // namespace detail

// Entropy-based homogeneity/completeness (natural log) and their harmonic mean.
template <class A, class G>
VMeasure v_measure(std::span<const A> assignment, std::span<const G> gold) {
  if (assignment.size() != gold.size()) throw DimensionError("v_measure: length mismatch");
  const std::size_t n = assignment.size();
  if (n == 0) return {1.0, 1.0, 1.0};
  std::size_t nk = 0, nc = 0;
  const auto k = detail::dense_codes(assignment, nk);
  const auto c = detail::dense_codes(gold, nc);
  std::vector<double> joint(nk * nc, 0.0), pk(nk, 0.0), pc(nc, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    joint[k[i] * nc + c[i]] += 1.0;
    pk[k[i]] += 1.0;
    pc[c[i]] += 1.0;
  }
  const double N = static_cast<double>(n);
  auto entropy = [N](const std::vector<double>& counts) {
    double h = 0.0;
    for (double x : counts) {
      if (x > 0.0) h -= (x / N) * std::log(x / N);
    }
    return h;
  };
  const double hc = entropy(pc), hk = entropy(pk);
  double hc_given_k = 0.0, hk_given_c = 0.0;
  for (std::size_t a = 0; a < nk; ++a) {
    for (std::size_t b = 0; b < nc; ++b) {
      const double x = joint[a * nc + b];
      if (x <= 0.0) continue;
      hc_given_k -= (x / N) * std::log(x / pk[a]);
      hk_given_c -= (x / N) * std::log(x / pc[b]);
    }
  }
  VMeasure out;
  out.homogeneity = hc == 0.0 ? 1.0 : 1.0 - hc_given_k / hc;
  out.completeness = hk == 0.0 ? 1.0 : 1.0 - hk_given_c / hk;
  const double s = out.homogeneity + out.completeness;
  out.v = s == 0.0 ? 0.0 : 2.0 * out.homogeneity * out.completeness / s;
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeConfig {
  std::size_t steps = 500;
  double lr = 0.1;
};

// Multinomial logistic regression trained by full-batch gradient descent on
// frozen embeddings; returns test accuracy.
template <class L>
double linear_probe(const MatrixD& train_x, std::span<const L> train_y, const MatrixD& test_x,
                    std::span<const L> test_y, const ProbeConfig& cfg = {}) {
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size()) {
    throw DimensionError("linear_probe: features and labels misaligned");
  }
  if (train_x.cols() != test_x.cols()) throw DimensionError("linear_probe: feature widths differ");
  std::map<L, std::size_t> classes;
  for (const auto& y : train_y) classes.emplace(y, 0);
  if (classes.size() < 2) throw ValidationError("linear_probe: training data has a single class");
  std::size_t next = 0;
  for (auto& [l, c] : classes) c = next++;
  const std::size_t C = classes.size(), d = train_x.cols(), n = train_x.rows();
  MatrixD w(C, d);
  std::vector<double> b(C, 0.0);
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = classes.at(train_y[i]);

  std::vector<double> logits(C);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    MatrixD gw(C, d);
    std::vector<double> gb(C, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto x = train_x.row(i);
      for (std::size_t c = 0; c < C; ++c) logits[c] = b[c] + dot(w.row(c), x);
      softmax_inplace(logits);
      logits[y[i]] -= 1.0;
      for (std::size_t c = 0; c < C; ++c) {
        gb[c] += logits[c];
        auto g = gw.row(c);
        for (std::size_t j = 0; j < d; ++j) g[j] += logits[c] * x[j];
      }
    }
    const double scale = cfg.lr / static_cast<double>(n);
    for (std::size_t c = 0; c < C; ++c) {
      b[c] -= scale * gb[c];
      auto wr = w.row(c);
      auto g = gw.row(c);
      for (std::size_t j = 0; j < d; ++j) wr[j] -= scale * g[j];
    }
  }

  std::vector<L> names(C);
  for (const auto& [l, c] : classes) names[c] = l;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_x.rows(); ++i) {
    auto x = test_x.row(i);
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      const double v = b[c] + dot(w.row(c), x);
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    correct += names[best] == test_y[i];
  }
  return test_x.rows() ? static_cast<double>(correct) / static_cast<double>(test_x.rows()) : 0.0;
}

// ---------------------------------------------------------------------------
// Prompt-based zero-shot classification

struct PromptTemplate {
  std::string input_template = "{}";
  std::vector<std::pair<std::string, std::string>> labels;  // (label, label text)

  static constexpr std::string_view kPlaceholder = "{}";

  void validate() const {
    if (labels.size() < 2) throw ValidationError("prompt template needs at least 2 labels");
    const auto first = input_template.find(kPlaceholder);
    if (first == std::string::npos || input_template.find(kPlaceholder, first + 1) != std::string::npos) {
      throw ValidationError("input template must contain the {} placeholder exactly once");
    }
  }

  std::string render(std::string_view input) const {
    std::string out = input_template;
    out.replace(out.find(kPlaceholder), kPlaceholder.size(), input);
    return out;
  }

  Json to_json() const {
    Json j;
    j["input"] = input_template;
    Json arr = Json::array();
    for (const auto& [label, text] : labels) arr.push_back({{"label", label}, {"text", text}});
    j["labels"] = std::move(arr);
    return j;
  }

  static PromptTemplate from_json(const Json& j) {
    PromptTemplate t;
    try {
      t.input_template = j.at("input").get<std::string>();
      for (const auto& l : j.at("labels")) t.labels.emplace_back(l.at("label").get<std::string>(), l.at("text").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("bad prompt template: ") + e.what());
    }
    t.validate();
    return t;
  }
};

struct ZeroShotRoles {
  Role input = Role::query;
  Role label = Role::passage;
};

// Index of the label whose text embedding is closest (cosine) to each
// rendered input; ties go to the earlier label.
template <TextEncoder E>
std::vector<std::size_t> zero_shot_predict(std::span<const std::string> inputs, const PromptTemplate& tmpl,
                                           const E& encoder, ZeroShotRoles roles = {}) {
  tmpl.validate();
  std::vector<std::string> rendered;
  for (const auto& s : inputs) rendered.push_back(tmpl.render(s));
  std::vector<TextInput> in, lab;
  for (const auto& r : rendered) in.push_back({r, roles.input});
  for (const auto& [label, text] : tmpl.labels) lab.push_back({text, roles.label});
  const MatrixD ei = encoder.embed(in), el = encoder.embed(lab);
  std::vector<double> ln(el.rows());
  for (std::size_t j = 0; j < el.rows(); ++j) ln[j] = norm(el.row(j));
  std::vector<std::size_t> out(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double ni = norm(ei.row(i));
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < el.rows(); ++j) {
      const double v = dot(ei.row(i), el.row(j)) / (ni * ln[j]);
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    out[i] = best;
  }
  return out;
}

template <TextEncoder E>
std::string zero_shot_classify(std::string_view input, const PromptTemplate& tmpl, const E& encoder,
                               ZeroShotRoles roles = {}) {
  const std::string s(input);
  const auto idx = zero_shot_predict(std::span<const std::string>(&s, 1), tmpl, encoder, roles);
  return tmpl.labels[idx[0]].first;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::string dataset;
  std::map<std::string, double> metrics;
  Json config = Json::object();

  Json to_json() const {
    for (const auto& [name, v] : metrics) {
      if (!std::isfinite(v)) throw ValidationError("metric " + name + " is not finite");
    }
    Json j;
    j["dataset"] = dataset;
    Json m = Json::object();
    for (const auto& [name, v] : metrics) m[name] = v;
    j["metrics"] = std::move(m);
    j["config"] = config;
    return j;
  }
};

}  // namespace e5kit
