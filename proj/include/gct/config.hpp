#pragma once

#include <cstddef>
#include <string>

#include "json.hpp"

#include "gct/error.hpp"
#include "gct/log_mel.hpp"

namespace gct {

enum class InputMode { kPatches, kClip };

inline std::string to_string(InputMode m) { return m == InputMode::kPatches ? "patches" : "clip"; }

inline InputMode input_mode_from_string(const std::string& s) {
  if (s == "patches") return InputMode::kPatches;
  if (s == "clip") return InputMode::kClip;
  throw ConfigError("model.input_mode", "expected 'patches' or 'clip', got '" + s + "'");
}

struct GctConfig {
  InputMode input_mode = InputMode::kPatches;
  int enc_blocks = 7;  // N
  int dec_blocks = 7;  // M, per branch (blocks are shared between branches)
  int d_model = 512;
  int n_heads = 8;
  int d_ff = 2048;
  double dropout = 0.1;
  int vocab_size = 0;
  int max_target_len = 12;
  int patch_time = 16;
  int patch_freq = 16;
  int n_mels = static_cast<int>(kMelBins);
  int max_patches = 512;  // rows of the encoder positional table
  bool pos_emb = true;    // patches mode only; clip mode never has one
  bool gcmlp = true;      // false: linear + softmax head
  bool input_norm = true;  // standardize each clip to zero mean, unit variance
  double ln_eps = 1e-5;

  std::size_t input_dim() const {
    return input_mode == InputMode::kPatches ? static_cast<std::size_t>(patch_time * patch_freq)
                                             : static_cast<std::size_t>(n_mels);
  }
  bool has_encoder_pos() const { return input_mode == InputMode::kPatches && pos_emb; }

  void validate() const {
    auto need = [](bool ok, const char* key, const std::string& what) {
      if (!ok) throw ConfigError(key, what);
    };
    need(enc_blocks >= 1, "model.enc_blocks", "must be >= 1");
    need(dec_blocks >= 1, "model.dec_blocks", "must be >= 1");
    need(d_model >= 1, "model.d_model", "must be >= 1");
    need(n_heads >= 1 && d_model % n_heads == 0, "model.n_heads", "must divide d_model");
    need(d_ff >= 1, "model.d_ff", "must be >= 1");
    need(dropout >= 0.0 && dropout < 1.0, "model.dropout", "must lie in [0,1)");
    need(vocab_size > 4, "model.vocab_size", "must exceed the 4 control tokens");
    need(max_target_len >= 2, "model.max_target_len", "must be >= 2");
    need(patch_time >= 1 && patch_freq >= 1, "model.patch_time", "patch dims must be >= 1");
    need(n_mels >= 1, "model.n_mels", "must be >= 1");
    need(max_patches >= 1, "model.max_patches", "must be >= 1");
    need(ln_eps > 0.0, "model.ln_eps", "must be positive");
  }

  bool operator==(const GctConfig&) const = default;
};

// d_model 64, 4 heads, N=M=2.
inline GctConfig toy_config(InputMode mode = InputMode::kClip) {
  GctConfig c;
  c.input_mode = mode;
  c.enc_blocks = 2;
  c.dec_blocks = 2;
  c.d_model = 64;
  c.n_heads = 4;
  c.d_ff = 128;
  c.dropout = 0.0;
  return c;
}

// {N, M} = {7, 7} for patches, {4, 4} for clips.
inline GctConfig full_config(InputMode mode) {
  GctConfig c;
  c.input_mode = mode;
  c.enc_blocks = c.dec_blocks = mode == InputMode::kPatches ? 7 : 4;
  return c;
}

inline GctConfig preset_config(const std::string& name) {
  if (name == "toy") return toy_config(InputMode::kClip);
  if (name == "toy-patches") return toy_config(InputMode::kPatches);
  if (name == "paper-patches") return full_config(InputMode::kPatches);
  if (name == "paper-clip") return full_config(InputMode::kClip);
  throw ConfigError("preset", "unknown preset '" + name + "'");
}

inline void to_json(nlohmann::json& j, const GctConfig& c) {
  j = nlohmann::json{{"input_mode", to_string(c.input_mode)},
                     {"enc_blocks", c.enc_blocks},
                     {"dec_blocks", c.dec_blocks},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},
                     {"dropout", c.dropout},
                     {"vocab_size", c.vocab_size},
                     {"max_target_len", c.max_target_len},
                     {"patch_time", c.patch_time},
                     {"patch_freq", c.patch_freq},
                     {"n_mels", c.n_mels},
                     {"max_patches", c.max_patches},
                     {"pos_emb", c.pos_emb},
                     {"gcmlp", c.gcmlp},
                     {"input_norm", c.input_norm},
                     {"ln_eps", c.ln_eps}};
}

// Missing keys keep their current value; unknown keys are a config error.
inline void update_from_json(GctConfig& c, const nlohmann::json& j, const std::string& prefix = "model") {
  if (!j.is_object()) throw ConfigError(prefix, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix + "." + it.key();
    try {
      const auto& v = it.value();
      if (it.key() == "input_mode") c.input_mode = input_mode_from_string(v.get<std::string>());
      else if (it.key() == "enc_blocks") c.enc_blocks = v.get<int>();
      else if (it.key() == "dec_blocks") c.dec_blocks = v.get<int>();
      else if (it.key() == "d_model") c.d_model = v.get<int>();
      else if (it.key() == "n_heads") c.n_heads = v.get<int>();
      else if (it.key() == "d_ff") c.d_ff = v.get<int>();
      else if (it.key() == "dropout") c.dropout = v.get<double>();
      else if (it.key() == "vocab_size") c.vocab_size = v.get<int>();
      else if (it.key() == "max_target_len") c.max_target_len = v.get<int>();
      else if (it.key() == "patch_time") c.patch_time = v.get<int>();
      else if (it.key() == "patch_freq") c.patch_freq = v.get<int>();
      else if (it.key() == "n_mels") c.n_mels = v.get<int>();
      else if (it.key() == "max_patches") c.max_patches = v.get<int>();
      else if (it.key() == "pos_emb") c.pos_emb = v.get<bool>();
      else if (it.key() == "gcmlp") c.gcmlp = v.get<bool>();
      else if (it.key() == "input_norm") c.input_norm = v.get<bool>();
      else if (it.key() == "ln_eps") c.ln_eps = v.get<double>();
      else throw ConfigError(key, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key, e.what());
    }
  }
}

inline void from_json(const nlohmann::json& j, GctConfig& c) { update_from_json(c, j); }

}  // namespace gct
