#pragma once

// Greedy single-branch decoding and forward-backward inference (FBI).

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gct/data.hpp"
#include "gct/log_mel.hpp"
#include "gct/model.hpp"

namespace gct {

struct DecodeResult {
  std::vector<TokenId> tokens;       // events only
  std::vector<TokenId> step_tokens;  // argmax of every step, including a final <E>
  bool truncated = false;            // hit L_max without <E>
  double alpha = 1.0;
  std::vector<std::vector<double>> fused;      // p_ci per step
  std::vector<std::vector<double>> p_normal;   // per step, empty if branch unused
  std::vector<std::vector<double>> p_reverse;  // per step, empty if branch unused
  AttentionRecord attn_normal;   // last decoder pass: rows = steps
  AttentionRecord attn_reverse;  // against the time-reversed encoder output
  std::vector<double> encoder_times;  // frame index of each encoder position (of X)

  std::size_t steps() const { return step_tokens.size(); }
};

// Argmax over <E> and event tokens; ties go to the lowest id.
inline TokenId argmax_token(const std::vector<double>& probs) {
  TokenId best = kEnd;
  for (std::size_t i = static_cast<std::size_t>(kEnd) + 1; i < probs.size(); ++i) {
    if (probs[i] > probs[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(i);
  }
  return best;
}

namespace detail {

template <class T>
std::vector<double> last_row_probs(const Tensor<T>& dec_out, const GctConfig& cfg, const GctParams<T>& p) {
  const std::size_t last = dec_out.rows() - 1;
  const std::size_t idx[1] = {last};
  const Tensor<T> row = gather_rows(dec_out, std::span<const std::size_t>(idx));
  const Tensor<T> probs = output_head(row, cfg, p);
  return {probs.data().begin(), probs.data().end()};
}

// weight_normal == 1 runs only the normal branch, 0 only the reverse one.
template <class T>
DecodeResult decode_impl(const Spectrogram& features, const GctConfig& cfg, const GctParams<T>& params,
                         double weight_normal, bool use_normal, bool use_reverse, std::size_t max_len) {
  if (max_len < 2) throw ParameterError("decode: L_max must be >= 2");
  NoGradGuard no_grad;
  DecodeResult r;
  r.alpha = weight_normal;
  r.encoder_times = encoder_position_times(features, cfg);
  Tensor<T> enc, enc_rev;
  if (use_normal) enc = encode(model_input<T>(features, cfg), cfg, params);
  if (use_reverse) enc_rev = encode(model_input<T>(reverse_time(features), cfg), cfg, params);
  std::vector<TokenId> hist{kStart}, hist_rev{kReverseStart};
  bool ended = false;
  for (std::size_t k = 0; k + 1 < max_len; ++k) {
    std::vector<double> p, pr, fused;
    if (use_normal) {
      p = last_row_probs(decoder_branch_forward(enc, std::span<const TokenId>(hist), Branch::kNormal, cfg, params, {},
                                                &r.attn_normal),
                         cfg, params);
      r.p_normal.push_back(p);
    }
    if (use_reverse) {
      pr = last_row_probs(decoder_branch_forward(enc_rev, std::span<const TokenId>(hist_rev), Branch::kReverse, cfg,
                                                 params, {}, &r.attn_reverse),
                          cfg, params);
      r.p_reverse.push_back(pr);
    }
    if (use_normal && use_reverse) {
      fused.resize(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) fused[i] = weight_normal * p[i] + (1.0 - weight_normal) * pr[i];
    } else {
      fused = use_normal ? p : pr;
    }
    const TokenId tok = argmax_token(fused);
    r.fused.push_back(std::move(fused));
    r.step_tokens.push_back(tok);
    if (tok == kEnd) {
      ended = true;
      break;
    }
    r.tokens.push_back(tok);
    // The fused token extends both histories.
    hist.push_back(tok);
    hist_rev.push_back(tok);
  }
  r.truncated = !ended;
  return r;
}

}  // namespace detail

// Normal: features with <S>. Reverse: time-reversed features with <S'>.
template <class T>
DecodeResult greedy_decode(const Spectrogram& features, const GctConfig& cfg, const GctParams<T>& params, Branch branch,
                           std::size_t max_len) {
  const bool normal = branch == Branch::kNormal;
  return detail::decode_impl(features, cfg, params, normal ? 1.0 : 0.0, normal, !normal, max_len);
}

// p_ci = alpha * p + (1 - alpha) * p', alpha weighting the forward direction.
template <class T>
DecodeResult fbi_decode(const Spectrogram& features, const GctConfig& cfg, const GctParams<T>& params, double alpha,
                        std::size_t max_len) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("fbi: alpha must lie in [0,1], got " + std::to_string(alpha));
  return detail::decode_impl(features, cfg, params, alpha, true, true, max_len);
}

enum class DecodeMode { kFbi, kNormal, kReverse };

inline DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "fbi") return DecodeMode::kFbi;
  if (s == "normal") return DecodeMode::kNormal;
  if (s == "reverse") return DecodeMode::kReverse;
  throw ConfigError("mode", "expected fbi, normal or reverse, got '" + s + "'");
}

inline std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::kFbi: return "fbi";
    case DecodeMode::kNormal: return "normal";
    case DecodeMode::kReverse: return "reverse";
  }
  return "?";
}

template <class T>
DecodeResult decode(const Spectrogram& features, const GctConfig& cfg, const GctParams<T>& params, DecodeMode mode,
                    double alpha, std::size_t max_len) {
  switch (mode) {
    case DecodeMode::kFbi: return fbi_decode(features, cfg, params, alpha, max_len);
    case DecodeMode::kNormal: return greedy_decode(features, cfg, params, Branch::kNormal, max_len);
    case DecodeMode::kReverse: return greedy_decode(features, cfg, params, Branch::kReverse, max_len);
  }
  throw ParameterError("decode: bad mode");
}

// {clip, tokens, truncated, alpha, per_step_top5}
inline nlohmann::json decode_json(const std::string& clip, const DecodeResult& r, const Vocab& vocab) {
  nlohmann::json tokens = nlohmann::json::array();
  for (TokenId t : r.tokens) tokens.push_back(vocab.name(t));
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& probs : r.fused) {
    std::vector<std::size_t> order(probs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t k = std::min<std::size_t>(5, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
    nlohmann::json top = nlohmann::json::array();
    for (std::size_t i = 0; i < k; ++i) top.push_back({vocab.name(static_cast<TokenId>(order[i])), probs[order[i]]});
    steps.push_back(top);
  }
  return {{"clip", clip}, {"tokens", tokens}, {"truncated", r.truncated}, {"alpha", r.alpha}, {"per_step_top5", steps}};
}

// Mean encoder time of one step's cross-attention, averaged over blocks and
// heads. Positions are in the coordinates of the input that branch saw.
inline double mean_attention_time(const AttentionRecord& rec, std::size_t step, const std::vector<double>& times) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& block : rec.cross_attn) {
    for (const auto& head : block) {
      if (step >= head.rows || head.cols != times.size()) throw DimensionError("attention: step/position mismatch");
      double m = 0.0;
      for (std::size_t j = 0; j < head.cols; ++j) m += head.at(step, j) * times[j];
      acc += m;
      ++n;
    }
  }
  if (n == 0) throw ParameterError("attention: empty record");
  return acc / static_cast<double>(n);
}

// One CSV per (branch, kind, block, head). Row = decode step labelled by the
// token predicted at that step; columns = encoder positions. Returns the
// written paths.
inline std::vector<std::filesystem::path> dump_attention(const DecodeResult& r, const Vocab& vocab,
                                                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto dump = [&](const std::string& branch, const std::string& kind,
                  const std::vector<std::vector<AttentionMap>>& maps) {
    for (std::size_t b = 0; b < maps.size(); ++b) {
      for (std::size_t h = 0; h < maps[b].size(); ++h) {
        const auto& m = maps[b][h];
        const auto path = dir / (branch + "_" + kind + "_block" + std::to_string(b) + "_head" + std::to_string(h) + ".csv");
        std::ofstream out(path);
        if (!out) throw FormatError("attention: cannot write " + path.string());
        out.precision(10);
        out << "token";
        for (std::size_t j = 0; j < m.cols; ++j) out << ',' << j;
        out << '\n';
        for (std::size_t i = 0; i < m.rows; ++i) {
          out << (i < r.step_tokens.size() ? vocab.name(r.step_tokens[i]) : std::string("?"));
          for (std::size_t j = 0; j < m.cols; ++j) out << ',' << m.at(i, j);
          out << '\n';
        }
        written.push_back(path);
      }
    }
  };
  if (!r.attn_normal.cross_attn.empty()) {
    dump("normal", "cross", r.attn_normal.cross_attn);
    dump("normal", "self", r.attn_normal.self_attn);
  }
  if (!r.attn_reverse.cross_attn.empty()) {
    dump("reverse", "cross", r.attn_reverse.cross_attn);
    dump("reverse", "self", r.attn_reverse.self_attn);
  }
  if (written.empty()) throw ParameterError("attention: decode result carries no attention records");
  return written;
}

}  // namespace gct
