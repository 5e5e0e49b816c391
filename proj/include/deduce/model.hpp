#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deduce/errors.hpp"
#include "deduce/linalg.hpp"
#include "deduce/rng.hpp"

namespace deduce {

struct ModelConfig {
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 1;
  int context_len = 45;
  int vocab_size = 28;
  bool mlp_enabled = false;
  int d_ff = 512;

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || context_len <= 0 || vocab_size <= 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (mlp_enabled && d_ff <= 0) throw ConfigError("d_ff must be positive when the MLP is enabled");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kInitStddev = 0.02;

/// One pre-normalized transformer block. Projection matrices follow the
/// [out x in] convention, so a query is `w_q * normed + b_q` for a column
/// vector and `normed * w_q^T` for a stack of rows.
template <typename Scalar>
struct Block {
  Vector<Scalar> norm_scale, norm_shift;
  Matrix<Scalar> w_q, w_k, w_v, w_o;
  Vector<Scalar> b_q, b_k, b_v, b_o;
  // Left empty unless ModelConfig::mlp_enabled.
  Vector<Scalar> mlp_norm_scale, mlp_norm_shift;
  Matrix<Scalar> w_fc, w_proj;
  Vector<Scalar> b_fc, b_proj;
};

/// All learnable tensors. The unembedding is token_embedding^T; there is no
/// separate output matrix.
template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  Matrix<Scalar> token_embedding;     // vocab x d_model
  Matrix<Scalar> position_embedding;  // context x d_model
  std::vector<Block<Scalar>> blocks;
  Vector<Scalar> final_scale, final_shift;

  static ModelParams zeros(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    ModelParams p;
    p.config = config;
    p.token_embedding = Matrix<Scalar>::Zero(config.vocab_size, d);
    p.position_embedding = Matrix<Scalar>::Zero(config.context_len, d);
    p.blocks.resize(static_cast<std::size_t>(config.n_layers));
    for (Block<Scalar>& b : p.blocks) {
      b.norm_scale = Vector<Scalar>::Zero(d);
      b.norm_shift = Vector<Scalar>::Zero(d);
      for (Matrix<Scalar>* w : {&b.w_q, &b.w_k, &b.w_v, &b.w_o}) *w = Matrix<Scalar>::Zero(d, d);
      for (Vector<Scalar>* v : {&b.b_q, &b.b_k, &b.b_v, &b.b_o}) *v = Vector<Scalar>::Zero(d);
      if (config.mlp_enabled) {
        b.mlp_norm_scale = Vector<Scalar>::Zero(d);
        b.mlp_norm_shift = Vector<Scalar>::Zero(d);
        b.w_fc = Matrix<Scalar>::Zero(config.d_ff, d);
        b.b_fc = Vector<Scalar>::Zero(config.d_ff);
        b.w_proj = Matrix<Scalar>::Zero(d, config.d_ff);
        b.b_proj = Vector<Scalar>::Zero(d);
      }
    }
    p.final_scale = Vector<Scalar>::Zero(d);
    p.final_shift = Vector<Scalar>::Zero(d);
    return p;
  }

  /// Calls f(name, tensor) for every learnable tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out = ModelParams<Other>::zeros(config);
    std::vector<const Scalar*> sources;
    visit([&](const std::string&, const auto& t) { sources.push_back(t.data()); });
    std::size_t i = 0;
    out.visit([&](const std::string&, auto& t) {
      for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] = static_cast<Other>(sources[i][j]);
      ++i;
    });
    return out;
  }

  std::size_t size() const {
    std::size_t total = 0;
    visit([&](const std::string&, const auto& t) { total += static_cast<std::size_t>(t.size()); });
    return total;
  }

  bool all_finite() const {
    bool finite = true;
    visit([&](const std::string&, const auto& t) { finite = finite && t.allFinite(); });
    return finite;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string prefix = "blocks." + std::to_string(i) + ".";
      f(prefix + "norm.scale", b.norm_scale);
      f(prefix + "norm.shift", b.norm_shift);
      f(prefix + "attn.w_q", b.w_q);
      f(prefix + "attn.b_q", b.b_q);
      f(prefix + "attn.w_k", b.w_k);
      f(prefix + "attn.b_k", b.b_k);
      f(prefix + "attn.w_v", b.w_v);
      f(prefix + "attn.b_v", b.b_v);
      f(prefix + "attn.w_o", b.w_o);
      f(prefix + "attn.b_o", b.b_o);
      if (self.config.mlp_enabled) {
        f(prefix + "mlp.norm.scale", b.mlp_norm_scale);
        f(prefix + "mlp.norm.shift", b.mlp_norm_shift);
        f(prefix + "mlp.w_fc", b.w_fc);
        f(prefix + "mlp.b_fc", b.b_fc);
        f(prefix + "mlp.w_proj", b.w_proj);
        f(prefix + "mlp.b_proj", b.b_proj);
      }
    }
    f(std::string("final_norm.scale"), self.final_scale);
    f(std::string("final_norm.shift"), self.final_shift);
  }
};

using ParamsF = ModelParams<float>;

/// Weights ~ N(0, 0.02^2) drawn in visit order, biases 0, norm scales 1.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<Scalar> p = ModelParams<Scalar>::zeros(config);
  Rng rng(seed);
  p.visit([&](const std::string& name, auto& t) {
    const bool is_scale = name.ends_with(".scale");
    const bool is_matrix = name.find(".w_") != std::string::npos || name.ends_with("embedding");
    if (is_scale) {
      t.setOnes();
    } else if (is_matrix) {
      for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] = static_cast<Scalar>(rng.normal(0.0, kInitStddev));
    }
  });
  return p;
}

struct ParamGroup {
  std::string name;
  std::size_t count = 0;
};

/// Per-tensor learnable parameter counts derived from the config alone.
std::vector<ParamGroup> param_breakdown(const ModelConfig& config);
std::size_t param_count(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Building blocks shared by the batched forward pass and cached decoding.

template <typename Scalar>
struct NormCache {
  Matrix<Scalar> xhat;
  Vector<Scalar> rstd;
};

/// Row-wise layer normalization.
template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Vector<Scalar>& scale, const Vector<Scalar>& shift,
                          NormCache<Scalar>* cache = nullptr) {
  const Eigen::Index rows = x.rows();
  const Scalar inv_d = static_cast<Scalar>(1) / static_cast<Scalar>(x.cols());
  Matrix<Scalar> y(rows, x.cols());
  if (cache != nullptr) {
    cache->xhat.resize(rows, x.cols());
    cache->rstd.resize(rows);
  }
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Scalar mean = x.row(r).sum() * inv_d;
    auto out = y.row(r);
    out = x.row(r).array() - mean;
    const Scalar rstd = static_cast<Scalar>(1) / std::sqrt(out.squaredNorm() * inv_d + static_cast<Scalar>(kNormEpsilon));
    out *= rstd;
    if (cache != nullptr) {
      cache->xhat.row(r) = out;
      cache->rstd(r) = rstd;
    }
    out = out.cwiseProduct(scale.transpose()) + shift.transpose();
  }
  return y;
}

/// Accumulates scale/shift gradients and returns the input gradient.
template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dy, const Vector<Scalar>& scale,
                                   const NormCache<Scalar>& cache, Vector<Scalar>& dscale, Vector<Scalar>& dshift) {
  dscale.noalias() += (dy.cwiseProduct(cache.xhat)).colwise().sum().transpose();
  dshift.noalias() += dy.colwise().sum().transpose();
  const Scalar inv_d = static_cast<Scalar>(1) / static_cast<Scalar>(dy.cols());
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    auto out = dx.row(r);
    out = dy.row(r).cwiseProduct(scale.transpose());
    const Scalar mean_dxhat = out.sum() * inv_d;
    const Scalar mean_dxhat_xhat = out.dot(cache.xhat.row(r)) * inv_d;
    out = (out.array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat) * cache.rstd(r);
  }
  return dx;
}

template <typename Scalar>
Matrix<Scalar> linear(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Vector<Scalar>& b) {
  Matrix<Scalar> y = x * w.transpose();
  y.rowwise() += b.transpose();
  return y;
}

/// Tied unembedding: logits = normed * token_embedding^T. Every caller goes
/// through here so re-unembedding a captured residual is bit-identical.
template <typename Scalar>
Matrix<Scalar> unembed(const ModelParams<Scalar>& p, const Matrix<Scalar>& normed) {
  Matrix<Scalar> logits(normed.rows(), p.token_embedding.rows());
  logits.noalias() = normed * p.token_embedding.transpose();
  return logits;
}

template <typename Scalar>
Scalar gelu(Scalar u) {
  return static_cast<Scalar>(0.5) * u * (static_cast<Scalar>(1) + std::erf(u / std::sqrt(static_cast<Scalar>(2))));
}

template <typename Scalar>
Scalar gelu_grad(Scalar u) {
  const Scalar cdf = static_cast<Scalar>(0.5) * (static_cast<Scalar>(1) + std::erf(u / std::sqrt(static_cast<Scalar>(2))));
  const Scalar pdf = std::exp(static_cast<Scalar>(-0.5) * u * u) / std::sqrt(static_cast<Scalar>(2 * M_PI));
  return cdf + u * pdf;
}

/// Causal single-sequence attention over `n_heads` column blocks:
/// pattern = softmax(mask(q k^T / sqrt(d_head))), mixed = pattern v.
/// Returns the per-head patterns; `mixed` receives the concatenated head
/// outputs (before the output projection).
template <typename Scalar, typename QIn, typename KIn, typename VIn, typename Out>
std::vector<Matrix<Scalar>> causal_attention(const Eigen::MatrixBase<QIn>& q, const Eigen::MatrixBase<KIn>& k,
                                             const Eigen::MatrixBase<VIn>& v, int n_heads,
                                             Eigen::MatrixBase<Out>& mixed) {
  const Eigen::Index t = q.rows();
  const Eigen::Index dh = q.cols() / n_heads;
  const Scalar scale = static_cast<Scalar>(1) / std::sqrt(static_cast<Scalar>(dh));
  std::vector<Matrix<Scalar>> patterns;
  patterns.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    const auto vh = v.middleCols(h * dh, dh);
    Matrix<Scalar> p = Matrix<Scalar>::Zero(t, t);
    p.noalias() = (qh * kh.transpose()) * scale;
    for (Eigen::Index i = 0; i < t; ++i) {
      auto row = p.row(i).head(i + 1);
      const Scalar peak = row.maxCoeff();
      row = (row.array() - peak).exp().matrix();
      row /= row.sum();
      p.row(i).tail(t - i - 1).setZero();
    }
    mixed.middleCols(h * dh, dh).noalias() = p * vh;
    patterns.push_back(std::move(p));
  }
  return patterns;
}

// ---------------------------------------------------------------------------
// Batched forward pass.

template <typename Scalar>
struct BlockCache {
  Matrix<Scalar> resid_pre;  // N x d
  NormCache<Scalar> norm;
  Matrix<Scalar> normed;
  Matrix<Scalar> q, k, v;
  std::vector<Matrix<Scalar>> patterns;  // [sequence * n_heads + head], each T x T
  Matrix<Scalar> mixed;
  Matrix<Scalar> resid_mid;  // after attention, before the MLP
  NormCache<Scalar> mlp_norm;
  Matrix<Scalar> mlp_normed, mlp_pre, mlp_act;
};

/// Every intermediate of a forward pass over `batch` sequences of equal
/// `length`, stacked row-wise (row = sequence * length + position).
template <typename Scalar>
struct ForwardPass {
  int batch = 0;
  int length = 0;
  std::vector<BlockCache<Scalar>> blocks;
  Matrix<Scalar> resid_final;
  NormCache<Scalar> final_norm;
  Matrix<Scalar> normed_final;
  Matrix<Scalar> logits;
};

template <typename Scalar>
void check_tokens(const ModelConfig& config, std::span<const int> tokens, int batch, int length) {
  if (length <= 0 || batch <= 0) throw InputError("empty token batch");
  if (length > config.context_len) {
    throw InputError("sequence length " + std::to_string(length) + " exceeds context length " +
                     std::to_string(config.context_len));
  }
  if (tokens.size() != static_cast<std::size_t>(batch) * static_cast<std::size_t>(length)) {
    throw InputError("token buffer does not match batch x length");
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[i]) + " out of range", i % static_cast<std::size_t>(length));
    }
  }
}

template <typename Scalar>
Matrix<Scalar> embed(const ModelParams<Scalar>& p, std::span<const int> tokens, int length) {
  Matrix<Scalar> x(static_cast<Eigen::Index>(tokens.size()), p.config.d_model);
  for (std::size_t n = 0; n < tokens.size(); ++n) {
    const auto row = static_cast<Eigen::Index>(n);
    x.row(row) = p.token_embedding.row(tokens[n]) +
                 p.position_embedding.row(static_cast<Eigen::Index>(n % static_cast<std::size_t>(length)));
  }
  return x;
}

template <typename Scalar>
Matrix<Scalar> mlp_forward(const Block<Scalar>& b, const Matrix<Scalar>& x, BlockCache<Scalar>* cache) {
  NormCache<Scalar> norm;
  Matrix<Scalar> normed = layer_norm(x, b.mlp_norm_scale, b.mlp_norm_shift, &norm);
  Matrix<Scalar> pre = linear(normed, b.w_fc, b.b_fc);
  Matrix<Scalar> act = pre.unaryExpr([](Scalar u) { return gelu(u); });
  Matrix<Scalar> out = linear(act, b.w_proj, b.b_proj);
  if (cache != nullptr) {
    cache->mlp_norm = std::move(norm);
    cache->mlp_normed = std::move(normed);
    cache->mlp_pre = std::move(pre);
    cache->mlp_act = std::move(act);
  }
  return out;
}

/// residual := residual + attention(norm(residual)) [+ mlp(norm(residual))]
/// per block, then the final norm and the tied unembedding.
template <typename Scalar>
ForwardPass<Scalar> forward(const ModelParams<Scalar>& p, std::span<const int> tokens, int batch, int length) {
  check_tokens<Scalar>(p.config, tokens, batch, length);
  const int heads = p.config.n_heads;
  ForwardPass<Scalar> pass;
  pass.batch = batch;
  pass.length = length;
  Matrix<Scalar> x = embed(p, tokens, length);
  for (const Block<Scalar>& b : p.blocks) {
    BlockCache<Scalar> c;
    c.resid_pre = x;
    c.normed = layer_norm(x, b.norm_scale, b.norm_shift, &c.norm);
    c.q = linear(c.normed, b.w_q, b.b_q);
    c.k = linear(c.normed, b.w_k, b.b_k);
    c.v = linear(c.normed, b.w_v, b.b_v);
    c.mixed.resize(x.rows(), x.cols());
    for (int s = 0; s < batch; ++s) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(s) * length;
      auto mixed = c.mixed.middleRows(r0, length);
      auto pats = causal_attention<Scalar>(c.q.middleRows(r0, length), c.k.middleRows(r0, length),
                                           c.v.middleRows(r0, length), heads, mixed);
      for (auto& pat : pats) c.patterns.push_back(std::move(pat));
    }
    x += linear(c.mixed, b.w_o, b.b_o);
    if (p.config.mlp_enabled) {
      c.resid_mid = x;
      x += mlp_forward(b, c.resid_mid, &c);
    }
    pass.blocks.push_back(std::move(c));
  }
  pass.resid_final = x;
  pass.normed_final = layer_norm(x, p.final_scale, p.final_shift, &pass.final_norm);
  pass.logits = unembed(p, pass.normed_final);
  return pass;
}

/// Reverse-mode gradient of sum(dlogits .* logits) with respect to every
/// parameter. Reduction order is fixed, so results are reproducible.
template <typename Scalar>
ModelParams<Scalar> backward(const ModelParams<Scalar>& p, const ForwardPass<Scalar>& pass,
                             std::span<const int> tokens, const Matrix<Scalar>& dlogits) {
  ModelParams<Scalar> g = ModelParams<Scalar>::zeros(p.config);
  const int heads = p.config.n_heads;
  const int length = pass.length;
  const Eigen::Index dh = p.config.d_head();
  const Scalar scale = static_cast<Scalar>(1) / std::sqrt(static_cast<Scalar>(dh));

  g.token_embedding.noalias() += dlogits.transpose() * pass.normed_final;
  const Matrix<Scalar> dnormed_final = dlogits * p.token_embedding;
  Matrix<Scalar> dx = layer_norm_backward(dnormed_final, p.final_scale, pass.final_norm, g.final_scale, g.final_shift);

  for (std::size_t l = p.blocks.size(); l-- > 0;) {
    const Block<Scalar>& b = p.blocks[l];
    const BlockCache<Scalar>& c = pass.blocks[l];
    Block<Scalar>& gb = g.blocks[l];

    if (p.config.mlp_enabled) {
      gb.w_proj.noalias() += dx.transpose() * c.mlp_act;
      gb.b_proj += dx.colwise().sum().transpose();
      Matrix<Scalar> dpre = dx * b.w_proj;
      dpre.array() *= c.mlp_pre.unaryExpr([](Scalar u) { return gelu_grad(u); }).array();
      gb.w_fc.noalias() += dpre.transpose() * c.mlp_normed;
      gb.b_fc += dpre.colwise().sum().transpose();
      const Matrix<Scalar> dnormed2 = dpre * b.w_fc;
      dx += layer_norm_backward(dnormed2, b.mlp_norm_scale, c.mlp_norm, gb.mlp_norm_scale, gb.mlp_norm_shift);
    }

    gb.w_o.noalias() += dx.transpose() * c.mixed;
    gb.b_o += dx.colwise().sum().transpose();
    const Matrix<Scalar> dmixed = dx * b.w_o;

    Matrix<Scalar> dq(dx.rows(), dx.cols()), dk(dx.rows(), dx.cols()), dv(dx.rows(), dx.cols());
    for (int s = 0; s < pass.batch; ++s) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(s) * length;
      for (int h = 0; h < heads; ++h) {
        const Matrix<Scalar>& pat = c.patterns[static_cast<std::size_t>(s * heads + h)];
        const auto dmix = dmixed.block(r0, h * dh, length, dh);
        const auto vh = c.v.block(r0, h * dh, length, dh);
        Matrix<Scalar> dpat = dmix * vh.transpose();
        dv.block(r0, h * dh, length, dh).noalias() = pat.transpose() * dmix;
        // Softmax backward; masked entries have pat == 0 and drop out.
        const Vector<Scalar> inner = (dpat.array() * pat.array()).rowwise().sum();
        Matrix<Scalar> dscore = pat.array() * (dpat.colwise() - inner).array();
        dscore *= scale;
        dq.block(r0, h * dh, length, dh).noalias() = dscore * c.k.block(r0, h * dh, length, dh);
        dk.block(r0, h * dh, length, dh).noalias() = dscore.transpose() * c.q.block(r0, h * dh, length, dh);
      }
    }
    gb.w_q.noalias() += dq.transpose() * c.normed;
    gb.w_k.noalias() += dk.transpose() * c.normed;
    gb.w_v.noalias() += dv.transpose() * c.normed;
    gb.b_q += dq.colwise().sum().transpose();
    gb.b_k += dk.colwise().sum().transpose();
    gb.b_v += dv.colwise().sum().transpose();
    Matrix<Scalar> dnormed = dq * b.w_q;
    dnormed.noalias() += dk * b.w_k;
    dnormed.noalias() += dv * b.w_v;
    dx += layer_norm_backward(dnormed, b.norm_scale, c.norm, gb.norm_scale, gb.norm_shift);
  }

  for (std::size_t n = 0; n < tokens.size(); ++n) {
    const auto row = static_cast<Eigen::Index>(n);
    g.token_embedding.row(tokens[n]) += dx.row(row);
    g.position_embedding.row(static_cast<Eigen::Index>(n % static_cast<std::size_t>(length))) += dx.row(row);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Single-sequence activation capture.

template <typename Scalar>
struct LayerTrace {
  Matrix<Scalar> resid_pre;   // seq x d, input of the block
  Matrix<Scalar> resid_post;  // seq x d, output of the block
  Matrix<Scalar> normed;      // normalized input that Q/K/V are computed from
  std::vector<Matrix<Scalar>> patterns;  // one seq x seq matrix per head
  Matrix<Scalar> q, k, v;
};

template <typename Scalar>
struct ActivationTrace {
  std::vector<int> tokens;
  std::vector<LayerTrace<Scalar>> layers;
  Matrix<Scalar> normed_final;  // post-final-norm residual
  Matrix<Scalar> logits;        // seq x vocab
};

template <typename Scalar>
ActivationTrace<Scalar> capture(const ModelParams<Scalar>& p, std::span<const int> tokens) {
  const int length = static_cast<int>(tokens.size());
  ForwardPass<Scalar> pass = forward(p, tokens, 1, length);
  ActivationTrace<Scalar> trace;
  trace.tokens.assign(tokens.begin(), tokens.end());
  for (std::size_t l = 0; l < pass.blocks.size(); ++l) {
    BlockCache<Scalar>& c = pass.blocks[l];
    LayerTrace<Scalar> lt;
    lt.resid_pre = std::move(c.resid_pre);
    lt.resid_post = l + 1 < pass.blocks.size() ? pass.blocks[l + 1].resid_pre : pass.resid_final;
    lt.normed = std::move(c.normed);
    lt.patterns = std::move(c.patterns);
    lt.q = std::move(c.q);
    lt.k = std::move(c.k);
    lt.v = std::move(c.v);
    trace.layers.push_back(std::move(lt));
  }
  trace.normed_final = std::move(pass.normed_final);
  trace.logits = std::move(pass.logits);
  return trace;
}

/// Greedy choice with ties resolved to the lowest token id.
template <typename Derived>
int argmax(const Eigen::DenseBase<Derived>& row) {
  int best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = static_cast<int>(j);
  }
  return best;
}

/// Greedy decoding of `steps` tokens for `batch` prompts of equal length,
/// reusing cached keys and values of earlier positions. Returns the full
/// sequences (prompt followed by generated tokens), row-major.
template <typename Scalar>
std::vector<int> generate_batch(const ModelParams<Scalar>& p, std::span<const int> prompts, int batch,
                                int prompt_len, int steps) {
  if (steps < 0) throw InputError("negative generation steps");
  if (prompt_len + steps > p.config.context_len) {
    throw InputError("prompt of " + std::to_string(prompt_len) + " tokens plus " + std::to_string(steps) +
                     " steps exceeds context length " + std::to_string(p.config.context_len));
  }
  check_tokens<Scalar>(p.config, prompts, batch, prompt_len);
  const int total = prompt_len + steps;
  std::vector<int> out(static_cast<std::size_t>(batch) * static_cast<std::size_t>(total));
  for (int s = 0; s < batch; ++s) {
    for (int t = 0; t < prompt_len; ++t) {
      out[static_cast<std::size_t>(s * total + t)] = prompts[static_cast<std::size_t>(s * prompt_len + t)];
    }
  }
  if (steps == 0) return out;

  const ForwardPass<Scalar> prefill = forward(p, prompts, batch, prompt_len);
  const std::size_t n_layers = p.blocks.size();
  const Eigen::Index d = p.config.d_model;
  std::vector<Matrix<Scalar>> keys(n_layers), values(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    keys[l].resize(static_cast<Eigen::Index>(batch) * total, d);
    values[l].resize(static_cast<Eigen::Index>(batch) * total, d);
    for (int s = 0; s < batch; ++s) {
      keys[l].middleRows(static_cast<Eigen::Index>(s) * total, prompt_len) =
          prefill.blocks[l].k.middleRows(static_cast<Eigen::Index>(s) * prompt_len, prompt_len);
      values[l].middleRows(static_cast<Eigen::Index>(s) * total, prompt_len) =
          prefill.blocks[l].v.middleRows(static_cast<Eigen::Index>(s) * prompt_len, prompt_len);
    }
  }
  for (int s = 0; s < batch; ++s) {
    const Eigen::Index last = static_cast<Eigen::Index>(s) * prompt_len + prompt_len - 1;
    out[static_cast<std::size_t>(s * total + prompt_len)] = argmax(prefill.logits.row(last));
  }

  const int heads = p.config.n_heads;
  const Eigen::Index dh = p.config.d_head();
  const Scalar scale = static_cast<Scalar>(1) / std::sqrt(static_cast<Scalar>(dh));
  for (int t = prompt_len; t < total - 1; ++t) {
    Matrix<Scalar> x(batch, d);
    for (int s = 0; s < batch; ++s) {
      x.row(s) = p.token_embedding.row(out[static_cast<std::size_t>(s * total + t)]) + p.position_embedding.row(t);
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      const Block<Scalar>& b = p.blocks[l];
      const Matrix<Scalar> normed = layer_norm(x, b.norm_scale, b.norm_shift);
      const Matrix<Scalar> q = linear(normed, b.w_q, b.b_q);
      Matrix<Scalar> mixed(batch, d);
      for (int s = 0; s < batch; ++s) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(s) * total;
        keys[l].row(r0 + t) = normed.row(s) * b.w_k.transpose() + b.b_k.transpose();
        values[l].row(r0 + t) = normed.row(s) * b.w_v.transpose() + b.b_v.transpose();
        for (int h = 0; h < heads; ++h) {
          const auto kh = keys[l].block(r0, h * dh, t + 1, dh);
          const auto vh = values[l].block(r0, h * dh, t + 1, dh);
          RowVector<Scalar> w = (q.row(s).segment(h * dh, dh) * kh.transpose()) * scale;
          w = (w.array() - w.maxCoeff()).exp().matrix();
          w /= w.sum();
          mixed.row(s).segment(h * dh, dh).noalias() = w * vh;
        }
      }
      x += linear(mixed, b.w_o, b.b_o);
      if (p.config.mlp_enabled) x += mlp_forward<Scalar>(b, x, nullptr);
    }
    const Matrix<Scalar> logits = unembed(p, layer_norm(x, p.final_scale, p.final_shift));
    for (int s = 0; s < batch; ++s) out[static_cast<std::size_t>(s * total + t + 1)] = argmax(logits.row(s));
  }
  return out;
}

template <typename Scalar>
std::vector<int> generate(const ModelParams<Scalar>& p, std::span<const int> prompt, int steps) {
  return generate_batch(p, prompt, 1, static_cast<int>(prompt.size()), steps);
}

}  // namespace deduce
