#pragma once

// The gated contextual transformer: input embedding, post-norm encoder,
// shared-weight bidirectional decoder and the gated MLP output head.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gct/config.hpp"
#include "gct/data.hpp"
#include "gct/error.hpp"
#include "gct/ops.hpp"
#include "gct/optim.hpp"
#include "gct/patches.hpp"
#include "gct/tensor.hpp"

namespace gct {

template <class T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <class T>
struct AttentionParams {
  Linear<T> q, k, v, o;
};

template <class T>
struct FeedForwardParams {
  Linear<T> in, out;
};

template <class T>
struct EncoderBlockParams {
  AttentionParams<T> attn;
  LayerNormParams<T> ln1;
  FeedForwardParams<T> ff;
  LayerNormParams<T> ln2;
};

template <class T>
struct DecoderBlockParams {
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln1;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln2;
  FeedForwardParams<T> ff;
  LayerNormParams<T> ln3;
};

// proj maps d_model to V; fc1..fc3 are V x V. Without the gated head only
// proj exists and is followed by a plain softmax.
template <class T>
struct HeadParams {
  Linear<T> proj;
  std::optional<Linear<T>> fc1, fc2, fc3;
};

template <class T>
struct GctParams {
  Linear<T> input_proj;            // patch embedding or per-frame linear layer
  std::optional<Tensor<T>> enc_pos;  // max_patches x d_model, patches mode only
  Tensor<T> tok_emb;               // V x d_model, shared by both branches
  Tensor<T> dec_pos;               // max_target_len x d_model
  std::vector<EncoderBlockParams<T>> enc;
  std::vector<DecoderBlockParams<T>> dec;  // one stack, read by both branches
  HeadParams<T> head;
};

// Stable (path, tensor) listing; tensors alias the parameters.
template <class T>
NamedParams<T> named_params(const GctParams<T>& p) {
  NamedParams<T> out;
  auto lin = [&](const std::string& n, const Linear<T>& l) {
    out.emplace_back(n + ".weight", l.weight);
    out.emplace_back(n + ".bias", l.bias);
  };
  auto ln = [&](const std::string& n, const LayerNormParams<T>& l) {
    out.emplace_back(n + ".gain", l.gain);
    out.emplace_back(n + ".bias", l.bias);
  };
  auto attn = [&](const std::string& n, const AttentionParams<T>& a) {
    lin(n + ".q", a.q);
    lin(n + ".k", a.k);
    lin(n + ".v", a.v);
    lin(n + ".o", a.o);
  };
  lin("input_proj", p.input_proj);
  if (p.enc_pos) out.emplace_back("enc_pos", *p.enc_pos);
  out.emplace_back("tok_emb", p.tok_emb);
  out.emplace_back("dec_pos", p.dec_pos);
  for (std::size_t i = 0; i < p.enc.size(); ++i) {
    const std::string b = "enc." + std::to_string(i);
    attn(b + ".attn", p.enc[i].attn);
    ln(b + ".ln1", p.enc[i].ln1);
    lin(b + ".ff.in", p.enc[i].ff.in);
    lin(b + ".ff.out", p.enc[i].ff.out);
    ln(b + ".ln2", p.enc[i].ln2);
  }
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    const std::string b = "dec." + std::to_string(i);
    attn(b + ".self_attn", p.dec[i].self_attn);
    ln(b + ".ln1", p.dec[i].ln1);
    attn(b + ".cross_attn", p.dec[i].cross_attn);
    ln(b + ".ln2", p.dec[i].ln2);
    lin(b + ".ff.in", p.dec[i].ff.in);
    lin(b + ".ff.out", p.dec[i].ff.out);
    ln(b + ".ln3", p.dec[i].ln3);
  }
  lin("head.proj", p.head.proj);
  if (p.head.fc1) {
    lin("head.fc1", *p.head.fc1);
    lin("head.fc2", *p.head.fc2);
    lin("head.fc3", *p.head.fc3);
  }
  return out;
}

// Xavier-uniform linear weights, zero biases, N(0, 0.02) embeddings and
// positional tables, unit layer-norm gains.
template <class T>
GctParams<T> init_params(const GctConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  auto linear = [&](std::size_t in, std::size_t out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<T> w(in * out);
    for (auto& x : w) x = static_cast<T>(u(rng));
    return Linear<T>{Tensor<T>::parameter({in, out}, std::move(w)), Tensor<T>::parameter({out}, std::vector<T>(out, T(0)))};
  };
  auto table = [&](std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> n(0.0, 0.02);
    std::vector<T> w(rows * cols);
    for (auto& x : w) x = static_cast<T>(n(rng));
    return Tensor<T>::parameter({rows, cols}, std::move(w));
  };
  auto norm = [&] {
    return LayerNormParams<T>{Tensor<T>::parameter({d}, std::vector<T>(d, T(1))),
                              Tensor<T>::parameter({d}, std::vector<T>(d, T(0)))};
  };
  auto attn = [&] { return AttentionParams<T>{linear(d, d), linear(d, d), linear(d, d), linear(d, d)}; };

  GctParams<T> p;
  p.input_proj = linear(cfg.input_dim(), d);
  if (cfg.has_encoder_pos()) p.enc_pos = table(static_cast<std::size_t>(cfg.max_patches), d);
  p.tok_emb = table(v, d);
  p.dec_pos = table(static_cast<std::size_t>(cfg.max_target_len), d);
  for (int i = 0; i < cfg.enc_blocks; ++i) {
    EncoderBlockParams<T> b;
    b.attn = attn();
    b.ln1 = norm();
    b.ff = {linear(d, ff), linear(ff, d)};
    b.ln2 = norm();
    p.enc.push_back(std::move(b));
  }
  for (int i = 0; i < cfg.dec_blocks; ++i) {
    DecoderBlockParams<T> b;
    b.self_attn = attn();
    b.ln1 = norm();
    b.cross_attn = attn();
    b.ln2 = norm();
    b.ff = {linear(d, ff), linear(ff, d)};
    b.ln3 = norm();
    p.dec.push_back(std::move(b));
  }
  p.head.proj = linear(d, v);
  if (cfg.gcmlp) {
    p.head.fc1 = linear(v, v);
    p.head.fc2 = linear(v, v);
    p.head.fc3 = linear(v, v);
  }
  return p;
}

// Closed form; agrees with the size of init_params(cfg).
inline std::size_t count_parameters(const GctConfig& cfg) {
  const std::size_t d = cfg.d_model, v = cfg.vocab_size, ff = cfg.d_ff;
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::size_t attn = 4 * lin(d, d);
  const std::size_t ffn = lin(d, ff) + lin(ff, d);
  const std::size_t ln = 2 * d;
  std::size_t n = lin(cfg.input_dim(), d);
  if (cfg.has_encoder_pos()) n += static_cast<std::size_t>(cfg.max_patches) * d;
  n += v * d + static_cast<std::size_t>(cfg.max_target_len) * d;
  n += static_cast<std::size_t>(cfg.enc_blocks) * (attn + ffn + 2 * ln);
  n += static_cast<std::size_t>(cfg.dec_blocks) * (2 * attn + ffn + 3 * ln);
  n += lin(d, v);
  if (cfg.gcmlp) n += 3 * lin(v, v);
  return n;
}

// Deep copy of every parameter (fresh leaves).
template <class T>
GctParams<T> clone_params(const GctParams<T>& src) {
  GctParams<T> dst = src;
  auto rebind = [](Tensor<T>& t) { t = t.clone(); };
  rebind(dst.input_proj.weight);
  rebind(dst.input_proj.bias);
  if (dst.enc_pos) rebind(*dst.enc_pos);
  rebind(dst.tok_emb);
  rebind(dst.dec_pos);
  auto lin = [&](Linear<T>& l) {
    rebind(l.weight);
    rebind(l.bias);
  };
  auto ln = [&](LayerNormParams<T>& l) {
    rebind(l.gain);
    rebind(l.bias);
  };
  auto attn = [&](AttentionParams<T>& x) {
    lin(x.q);
    lin(x.k);
    lin(x.v);
    lin(x.o);
  };
  for (auto& b : dst.enc) {
    attn(b.attn);
    ln(b.ln1);
    lin(b.ff.in);
    lin(b.ff.out);
    ln(b.ln2);
  }
  for (auto& b : dst.dec) {
    attn(b.self_attn);
    ln(b.ln1);
    attn(b.cross_attn);
    ln(b.ln2);
    lin(b.ff.in);
    lin(b.ff.out);
    ln(b.ln3);
  }
  lin(dst.head.proj);
  if (dst.head.fc1) {
    lin(*dst.head.fc1);
    lin(*dst.head.fc2);
    lin(*dst.head.fc3);
  }
  return dst;
}

// ---------------------------------------------------------------------------

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

// One softmax map (rows = queries, cols = keys).
struct AttentionMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;

  double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }
};

// Indexed [block][head].
struct AttentionRecord {
  std::vector<std::vector<AttentionMap>> self_attn;
  std::vector<std::vector<AttentionMap>> cross_attn;
};

// Flattened model input: frames x n_mels (clip) or patches x patch_size.
// Zero mean, unit variance over the whole clip (mean removal only when flat).
inline Spectrogram standardize(Spectrogram s) {
  double mean = 0.0;
  for (double v : s.values) mean += v;
  mean /= static_cast<double>(s.values.size());
  double var = 0.0;
  for (double v : s.values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(s.values.size()));
  for (double& v : s.values) v = sd > 0.0 ? (v - mean) / sd : v - mean;
  return s;
}

template <class T>
Tensor<T> model_input(const Spectrogram& raw, const GctConfig& cfg) {
  const Spectrogram s = cfg.input_norm ? standardize(raw) : raw;
  if (cfg.input_mode == InputMode::kClip) {
    if (s.bins != static_cast<std::size_t>(cfg.n_mels)) {
      throw DimensionError("model_input: spectrogram has " + std::to_string(s.bins) + " bins, config expects " +
                           std::to_string(cfg.n_mels));
    }
    std::vector<T> v(s.values.begin(), s.values.end());
    return Tensor<T>({s.frames, s.bins}, std::move(v));
  }
  const PatchGrid g = to_patches(s, static_cast<std::size_t>(cfg.patch_time), static_cast<std::size_t>(cfg.patch_freq));
  std::vector<T> v(g.values.begin(), g.values.end());
  return Tensor<T>({g.num_patches(), g.patch_size()}, std::move(v));
}

// Frame index represented by each encoder position (for attention plots).
inline std::vector<double> encoder_position_times(const Spectrogram& s, const GctConfig& cfg) {
  std::vector<double> t;
  if (cfg.input_mode == InputMode::kClip) {
    for (std::size_t i = 0; i < s.frames; ++i) t.push_back(static_cast<double>(i));
  } else {
    const std::size_t gt = s.frames / static_cast<std::size_t>(cfg.patch_time);
    const std::size_t gf = s.bins / static_cast<std::size_t>(cfg.patch_freq);
    for (std::size_t i = 0; i < gt * gf; ++i) {
      t.push_back((static_cast<double>(i / gf) + 0.5) * cfg.patch_time - 0.5);
    }
  }
  return t;
}

template <class T>
Tensor<T> embed_input(const Tensor<T>& features, const GctConfig& cfg, const GctParams<T>& p,
                      const ForwardContext& ctx = {}) {
  if (features.ndim() != 2 || features.cols() != cfg.input_dim()) {
    throw DimensionError("embed_input: features " + shape_str(features.shape()) + " do not match input dim " +
                         std::to_string(cfg.input_dim()));
  }
  Tensor<T> x = p.input_proj(features);
  if (cfg.has_encoder_pos()) {
    const std::size_t n = features.rows();
    if (!p.enc_pos || n > p.enc_pos->rows()) {
      throw DimensionError("embed_input: " + std::to_string(n) + " patches exceed the positional table (" +
                           std::to_string(p.enc_pos ? p.enc_pos->rows() : 0) + ")");
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    x = add(x, gather_rows(*p.enc_pos, std::span<const std::size_t>(idx)));
  }
  return dropout(x, cfg.dropout, ctx.training, ctx.rng);
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& query, const Tensor<T>& memory, const AttentionParams<T>& a,
                               int n_heads, bool causal, std::vector<AttentionMap>* record) {
  const Tensor<T> q = a.q(query);
  const Tensor<T> k = a.k(memory);
  const Tensor<T> v = a.v(memory);
  const std::size_t d = q.cols();
  const std::size_t dh = d / static_cast<std::size_t>(n_heads);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor<T>> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    const Tensor<T> qh = n_heads == 1 ? q : slice_cols(q, off, dh);
    const Tensor<T> kh = n_heads == 1 ? k : slice_cols(k, off, dh);
    const Tensor<T> vh = n_heads == 1 ? v : slice_cols(v, off, dh);
    Tensor<T> scores = scale(matmul_nt(qh, kh), inv_sqrt);
    if (causal) scores = causal_mask(scores);
    const Tensor<T> attn = softmax(scores, 1);
    if (record) {
      record->push_back({attn.rows(), attn.cols(), std::vector<double>(attn.data().begin(), attn.data().end())});
    }
    heads.push_back(matmul(attn, vh));
  }
  const Tensor<T> joined = n_heads == 1 ? heads.front() : concat_cols(heads);
  return a.o(joined);
}

template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& f) {
  return f.out(relu(f.in(x)));
}

// Post-norm residual: LN(x + dropout(sublayer)).
template <class T>
Tensor<T> add_norm(const Tensor<T>& x, const Tensor<T>& sub, const LayerNormParams<T>& ln, const GctConfig& cfg,
                   const ForwardContext& ctx) {
  return layer_norm(add(x, dropout(sub, cfg.dropout, ctx.training, ctx.rng)), ln.gain, ln.bias,
                    static_cast<T>(cfg.ln_eps));
}

// Full (unmasked) self-attention blocks.
template <class T>
Tensor<T> encoder_forward(const Tensor<T>& emb, const GctConfig& cfg, const GctParams<T>& p,
                          const ForwardContext& ctx = {}) {
  Tensor<T> x = emb;
  for (const auto& b : p.enc) {
    x = add_norm(x, multi_head_attention(x, x, b.attn, cfg.n_heads, false, nullptr), b.ln1, cfg, ctx);
    x = add_norm(x, feed_forward(x, b.ff), b.ln2, cfg, ctx);
  }
  return x;
}

template <class T>
Tensor<T> encode(const Tensor<T>& features, const GctConfig& cfg, const GctParams<T>& p, const ForwardContext& ctx = {}) {
  return encoder_forward(embed_input(features, cfg, p, ctx), cfg, p, ctx);
}

enum class Branch { kNormal, kReverse };

inline std::string to_string(Branch b) { return b == Branch::kNormal ? "normal" : "reverse"; }

// One decoder branch. Both branches run the same blocks under a causal mask;
// the reverse branch differs only by its <S'>-led reversed token sequence.
template <class T>
Tensor<T> decoder_branch_forward(const Tensor<T>& enc_out, std::span<const TokenId> tokens, Branch branch,
                                 const GctConfig& cfg, const GctParams<T>& p, const ForwardContext& ctx = {},
                                 AttentionRecord* record = nullptr) {
  if (tokens.empty()) throw ParameterError("decoder: empty token sequence");
  const TokenId start = branch == Branch::kNormal ? kStart : kReverseStart;
  if (tokens.front() != start) {
    throw ParameterError("decoder: " + to_string(branch) + " branch must begin with token " + std::to_string(start));
  }
  if (tokens.size() > p.dec_pos.rows()) {
    throw DimensionError("decoder: " + std::to_string(tokens.size()) + " tokens exceed max length " +
                         std::to_string(p.dec_pos.rows()));
  }
  std::vector<std::size_t> ids(tokens.size()), pos(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= p.tok_emb.rows()) {
      throw ParameterError("decoder: unknown token id " + std::to_string(tokens[i]));
    }
    ids[i] = static_cast<std::size_t>(tokens[i]);
    pos[i] = i;
  }
  Tensor<T> x = add(gather_rows(p.tok_emb, std::span<const std::size_t>(ids)),
                    gather_rows(p.dec_pos, std::span<const std::size_t>(pos)));
  x = dropout(x, cfg.dropout, ctx.training, ctx.rng);
  if (record) {
    record->self_attn.clear();
    record->cross_attn.clear();
  }
  for (const auto& b : p.dec) {
    std::vector<AttentionMap>* self_rec = nullptr;
    std::vector<AttentionMap>* cross_rec = nullptr;
    if (record) {
      self_rec = &record->self_attn.emplace_back();
      cross_rec = &record->cross_attn.emplace_back();
    }
    x = add_norm(x, multi_head_attention(x, x, b.self_attn, cfg.n_heads, true, self_rec), b.ln1, cfg, ctx);
    x = add_norm(x, multi_head_attention(x, enc_out, b.cross_attn, cfg.n_heads, false, cross_rec), b.ln2, cfg, ctx);
    x = add_norm(x, feed_forward(x, b.ff), b.ln3, cfg, ctx);
  }
  return x;
}

struct GcmlpTrace {
  std::vector<double> gate;  // lambda, row-major L x V
};

// Softmax((1 - lambda) * F2 + lambda * F1) with F1 = fc1(x),
// F2 = ReLU(fc2(F1)), lambda = sigmoid(fc3(F1)).
template <class T>
Tensor<T> gcmlp_forward(const Tensor<T>& x, const Linear<T>& fc1, const Linear<T>& fc2, const Linear<T>& fc3,
                        GcmlpTrace* trace = nullptr) {
  const Tensor<T> f1 = fc1(x);
  const Tensor<T> f2 = relu(fc2(f1));
  const Tensor<T> gate = sigmoid(fc3(f1));
  if (trace) trace->gate.assign(gate.data().begin(), gate.data().end());
  const Tensor<T> ones(gate.shape(), T(1));
  const Tensor<T> mixed = add(mul(sub(ones, gate), f2), mul(gate, f1));
  return softmax(mixed, 1);
}

// Decoder output rows -> class probability rows.
template <class T>
Tensor<T> output_head(const Tensor<T>& dec_out, const GctConfig& cfg, const GctParams<T>& p,
                      GcmlpTrace* trace = nullptr) {
  const Tensor<T> x = p.head.proj(dec_out);
  if (!cfg.gcmlp) return softmax(x, 1);
  return gcmlp_forward(x, *p.head.fc1, *p.head.fc2, *p.head.fc3, trace);
}

template <class T>
struct GctOutput {
  Tensor<T> p;      // normal branch, L x V
  Tensor<T> p_rev;  // reverse branch, L x V (undefined when skipped)
  AttentionRecord attn_normal;
  AttentionRecord attn_reverse;
};

// One encoder pass shared by both branches. An empty reverse_in skips the
// reverse branch (plain transformer objective).
template <class T>
GctOutput<T> gct_forward(const Tensor<T>& features, std::span<const TokenId> normal_in,
                         std::span<const TokenId> reverse_in, const GctConfig& cfg, const GctParams<T>& p,
                         const ForwardContext& ctx = {}, bool record_attention = false) {
  const Tensor<T> enc = encode(features, cfg, p, ctx);
  GctOutput<T> out;
  out.p = output_head(decoder_branch_forward(enc, normal_in, Branch::kNormal, cfg, p, ctx,
                                             record_attention ? &out.attn_normal : nullptr),
                      cfg, p);
  if (!reverse_in.empty()) {
    out.p_rev = output_head(decoder_branch_forward(enc, reverse_in, Branch::kReverse, cfg, p, ctx,
                                                   record_attention ? &out.attn_reverse : nullptr),
                            cfg, p);
  }
  return out;
}

}  // namespace gct
