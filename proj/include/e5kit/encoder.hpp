// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "e5kit/errors.hpp"
#include "e5kit/rng.hpp"
#include "e5kit/tensor.hpp"

namespace e5kit {

using TokenId = std::uint32_t;

enum class Role { query, passage, none };

inline constexpr TokenId kQueryToken = 0;
inline constexpr TokenId kPassageToken = 1;
inline constexpr TokenId kFirstWordToken = 2;

struct TokenizerConfig {
  std::size_t vocab_size = 32768;
  std::uint64_t hash_seed = 0;
  bool lowercase = true;
  std::size_t max_tokens = 64;

  void validate() const {
    if (vocab_size < 3) throw ConfigurationError("vocab_size must be >= 3");
    if (max_tokens < 1) throw ConfigurationError("max_tokens must be >= 1");
  }

  friend bool operator==(const TokenizerConfig&, const TokenizerConfig&) = default;
};

// FNV-1a over the UTF-8 bytes; the seed perturbs the offset basis.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = 14695981039346656037ULL ^ seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline TokenId hash_word(std::string_view word, const TokenizerConfig& cfg) {
  return kFirstWordToken + static_cast<TokenId>(fnv1a(word, cfg.hash_seed) % (cfg.vocab_size - 2));
}

namespace detail {

inline bool is_word_byte(unsigned char c) {
  return c >= 0x80 || (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

}  // namespace detail

// Splits on whitespace and ASCII punctuation, hashes each word into [2, V)
// and prepends the role token. The role token always survives truncation.
inline std::vector<TokenId> tokenize(std::string_view text, Role role, const TokenizerConfig& cfg) {
  cfg.validate();
  std::vector<TokenId> out;
  if (role == Role::query) out.push_back(kQueryToken);
  if (role == Role::passage) out.push_back(kPassageToken);
  bool any_word = false;

  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    any_word = true;
    if (out.size() < cfg.max_tokens) out.push_back(hash_word(word, cfg));
    word.clear();
  };
  for (unsigned char c : text) {
    if (detail::is_word_byte(c)) {
      if (cfg.lowercase && c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
      word.push_back(static_cast<char>(c));
    } else {
      flush();
    }
  }
  flush();
  if (!any_word) {
    // Covers whitespace-only text as well as punctuation-only text.
    bool blank = true;
    for (unsigned char c : text) blank = blank && std::isspace(c);
    throw EmptyInputError(blank ? "empty text" : "text contains no word tokens");
  }
  return out;
}

// Trainable parameters of the reference encoder.
struct EncoderParams {
  MatrixD table;       // V x d
  MatrixD projection;  // d x d
  std::vector<double> bias;

  std::size_t vocab() const noexcept { return table.rows(); }
  std::size_t dim() const noexcept { return table.cols(); }

  void validate() const {
    if (dim() < 2) throw ConfigurationError("embedding dim must be >= 2");
    if (projection.rows() != dim() || projection.cols() != dim() || bias.size() != dim()) {
      throw DimensionError("encoder params: projection/bias shape does not match table");
    }
    if (!table.all_finite() || !projection.all_finite()) throw ValidationError("encoder params not finite");
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

struct EncoderInit {
  // Small table entries keep initial embeddings close to tanh(bias), which
  // makes the initial score distribution near-uniform even at tau = 0.01.
  double table_scale = 0.01;
  double bias_scale = 1.0;
};

inline EncoderParams random_params(std::size_t vocab, std::size_t dim, std::uint64_t seed,
                                   EncoderInit init = {}) {
  if (dim < 2) throw ConfigurationError("embedding dim must be >= 2");
  Rng rng(seed);
  EncoderParams p{MatrixD(vocab, dim), MatrixD(dim, dim), std::vector<double>(dim)};
  for (double& v : p.table.storage()) v = rng.normal(0.0, init.table_scale);
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : p.projection.storage()) v = rng.normal(0.0, proj_scale);
  for (double& v : p.bias) v = rng.normal(0.0, init.bias_scale);
  return p;
}

inline EncoderParams zero_params(std::size_t vocab, std::size_t dim) {
  return {MatrixD(vocab, dim), MatrixD(dim, dim), std::vector<double>(dim, 0.0)};
}

namespace detail {

inline void mean_pool(std::span<const TokenId> tokens, const MatrixD& table, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (TokenId t : tokens) {
    if (t >= table.rows()) {
      throw IndexError("token id " + std::to_string(t) + " out of range for vocab " +
                       std::to_string(table.rows()));
    }
    auto r = table.row(t);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += r[j];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (double& v : out) v *= inv;
}

inline void project_tanh(std::span<const double> pooled, const EncoderParams& p, std::span<double> out) {
  const std::size_t d = p.dim();
  for (std::size_t i = 0; i < d; ++i) {
    double z = p.bias[i];
    auto prow = p.projection.row(i);
    for (std::size_t j = 0; j < d; ++j) z += prow[j] * pooled[j];
    out[i] = std::tanh(z);
  }
}

}  // namespace detail

// Mean of token embeddings, affine projection, tanh. Unnormalized.
inline std::vector<double> encode(std::span<const TokenId> tokens, const EncoderParams& params) {
  if (tokens.empty()) throw EmptyInputError("encode: empty token sequence");
  std::vector<double> pooled(params.dim());
  std::vector<double> out(params.dim());
  detail::mean_pool(tokens, params.table, pooled);
  detail::project_tanh(pooled, params, out);
  return out;
}

struct TextInput {
  std::string_view text;
  Role role = Role::none;
};

// Encodes a batch; row i corresponds to texts[i].
inline MatrixD encode_batch(std::span<const TextInput> texts, const TokenizerConfig& cfg,
                            const EncoderParams& params) {
  MatrixD out(texts.size(), params.dim());
  std::vector<std::string> errors(texts.size());
  parallel_for(texts.size(), [&](std::size_t i) {
    try {
      const auto tokens = tokenize(texts[i].text, texts[i].role, cfg);
      const auto v = encode(tokens, params);
      std::copy(v.begin(), v.end(), out.row(i).begin());
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) throw BatchItemError(i, errors[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder interface used by the trainers. A backend provides embed() for
// inference and forward()/backward() plus flat parameter views for training.

template <class E>
concept TextEncoder = requires(const E& e, std::span<const TextInput> texts) {
  { e.embed(texts) } -> std::same_as<MatrixD>;
  { e.dim() } -> std::convertible_to<std::size_t>;
};

template <class E>
concept TrainableEncoder =
    TextEncoder<E> && std::copyable<E> &&
    requires(E& e, const E& ce, std::span<const TextInput> texts, const typename E::Forward& fwd,
             const MatrixD& grad, ParamBuffers& grads) {
      { ce.forward(texts) } -> std::same_as<typename E::Forward>;
      { fwd.embeddings } -> std::convertible_to<const MatrixD&>;
      ce.backward(fwd, grad, grads);
      { e.parameters() } -> std::same_as<std::vector<std::span<double>>>;
    };

// Hashed bag-of-tokens encoder with a single tanh projection layer.
class BagEncoder {
 public:
  struct Forward {
    MatrixD embeddings;
    MatrixD pooled;
    std::vector<std::vector<TokenId>> tokens;
  };

  BagEncoder() = default;
  BagEncoder(TokenizerConfig tokenizer, EncoderParams params)
      : tokenizer_(tokenizer), params_(std::move(params)) {
    tokenizer_.validate();
    params_.validate();
    if (params_.vocab() != tokenizer_.vocab_size) {
      throw DimensionError("encoder table rows " + std::to_string(params_.vocab()) +
                           " != vocab_size " + std::to_string(tokenizer_.vocab_size));
    }
  }

  static BagEncoder random(TokenizerConfig tokenizer, std::size_t dim, std::uint64_t seed,
                           EncoderInit init = {}) {
    tokenizer.validate();
    return BagEncoder(tokenizer, random_params(tokenizer.vocab_size, dim, seed, init));
  }

  std::size_t dim() const noexcept { return params_.dim(); }
  const TokenizerConfig& tokenizer() const noexcept { return tokenizer_; }
  const EncoderParams& params() const noexcept { return params_; }
  EncoderParams& params() noexcept { return params_; }

  MatrixD embed(std::span<const TextInput> texts) const { return encode_batch(texts, tokenizer_, params_); }

  Forward forward(std::span<const TextInput> texts) const {
    Forward f{MatrixD(texts.size(), dim()), MatrixD(texts.size(), dim()),
              std::vector<std::vector<TokenId>>(texts.size())};
    std::vector<std::string> errors(texts.size());
    parallel_for(texts.size(), [&](std::size_t i) {
      try {
        f.tokens[i] = tokenize(texts[i].text, texts[i].role, tokenizer_);
        detail::mean_pool(f.tokens[i], params_.table, f.pooled.row(i));
        detail::project_tanh(f.pooled.row(i), params_, f.embeddings.row(i));
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    });
    for (std::size_t i = 0; i < errors.size(); ++i) {
      if (!errors[i].empty()) throw BatchItemError(i, errors[i]);
    }
    return f;
  }

  // Accumulates d(loss)/d(params) into grads given d(loss)/d(embeddings).
  // Rows are visited in order so accumulation is deterministic.
  void backward(const Forward& f, const MatrixD& grad, ParamBuffers& grads) const {
    if (grad.rows() != f.embeddings.rows() || grad.cols() != dim()) {
      throw DimensionError("backward: gradient shape does not match forward batch");
    }
    if (grads.size() != 3) throw DimensionError("backward: expected 3 gradient groups");
    const std::size_t d = dim();
    double* g_table = grads[0].data();
    double* g_proj = grads[1].data();
    double* g_bias = grads[2].data();
    std::vector<double> dz(d), dm(d);
    for (std::size_t r = 0; r < grad.rows(); ++r) {
      auto u = f.embeddings.row(r);
      auto du = grad.row(r);
      auto m = f.pooled.row(r);
      bool any = false;
      for (std::size_t i = 0; i < d; ++i) {
        dz[i] = du[i] * (1.0 - u[i] * u[i]);
        any = any || dz[i] != 0.0;
      }
      if (!any) continue;
      std::fill(dm.begin(), dm.end(), 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        g_bias[i] += dz[i];
        auto prow = params_.projection.row(i);
        double* gp = g_proj + i * d;
        for (std::size_t j = 0; j < d; ++j) {
          gp[j] += dz[i] * m[j];
          dm[j] += prow[j] * dz[i];
        }
      }
      const double inv = 1.0 / static_cast<double>(f.tokens[r].size());
      for (TokenId t : f.tokens[r]) {
        double* gt = g_table + static_cast<std::size_t>(t) * d;
        for (std::size_t j = 0; j < d; ++j) gt[j] += dm[j] * inv;
      }
    }
  }

  std::vector<std::span<double>> parameters() {
    return {params_.table.data(), params_.projection.data(), std::span<double>(params_.bias)};
  }

  friend bool operator==(const BagEncoder&, const BagEncoder&) = default;

 private:
  TokenizerConfig tokenizer_;
  EncoderParams params_;
};

static_assert(TrainableEncoder<BagEncoder>);

// ---------------------------------------------------------------------------
// Checkpoint: "E5CK", u32 version, manifest {u64 V, u64 d, u64 hash_seed,
// u64 max_tokens, u32 lowercase}, then table, projection and bias (1 x d) as
// f64 matrices in the E5MX format.

inline constexpr char kCheckpointMagic[4] = {'E', '5', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const BagEncoder& enc) {
  const auto& tk = enc.tokenizer();
  const auto& p = enc.params();
  os.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, tk.vocab_size);
  detail::write_le<std::uint64_t>(os, p.dim());
  detail::write_le<std::uint64_t>(os, tk.hash_seed);
  detail::write_le<std::uint64_t>(os, tk.max_tokens);
  detail::write_le<std::uint32_t>(os, tk.lowercase ? 1u : 0u);
  write_matrix(os, p.table);
  write_matrix(os, p.projection);
  write_matrix(os, MatrixD(1, p.dim(), p.bias));
  if (!os) throw IoError("failed writing checkpoint");
}

inline BagEncoder read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IoError("not an encoder checkpoint (bad magic)");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  TokenizerConfig tk;
  tk.vocab_size = detail::read_le<std::uint64_t>(is);
  const auto dim = detail::read_le<std::uint64_t>(is);
  tk.hash_seed = detail::read_le<std::uint64_t>(is);
  tk.max_tokens = detail::read_le<std::uint64_t>(is);
  tk.lowercase = detail::read_le<std::uint32_t>(is) != 0;
  EncoderParams p;
  p.table = read_matrix<double>(is);
  p.projection = read_matrix<double>(is);
  auto bias = read_matrix<double>(is);
  if (p.table.rows() != tk.vocab_size || p.table.cols() != dim || bias.rows() != 1 || bias.cols() != dim) {
    throw IoError("checkpoint manifest does not match stored tensors");
  }
  p.bias = bias.storage();
  return BagEncoder(tk, std::move(p));
}

inline BagEncoder load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace e5kit
