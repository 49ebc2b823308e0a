// gct_cli: synth | train | eval | infer | gradcheck | attention

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gct/gct.hpp"

#ifndef GCT_VERSION
#define GCT_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Settings shared by the model-building subcommands. Precedence: preset,
// then --config file, then dedicated flags, then --set overrides.
struct Common {
  std::string preset = "toy";
  std::string config_file;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string out = "runs";
};

struct Resolved {
  gct::GctConfig model;
  gct::TrainHyperParams train;
  std::uint64_t seed = 0;
  json doc;  // effective configuration as written to the run directory
};

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

void set_dotted(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw gct::ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  json* node = &root;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (parts[i].empty()) throw gct::ConfigError(key, "empty key component");
    json& child = (*node)[parts[i]];
    if (child.is_null()) child = json::object();
    if (!child.is_object()) throw gct::ConfigError(key, "'" + parts[i] + "' is not a section");
    node = &child;
  }
  (*node)[parts.back()] = parse_value(assignment.substr(eq + 1));
}

Resolved resolve(const Common& c, const json& flag_overrides, bool have_seed_flag) {
  json doc = json::object();
  std::string preset = c.preset;
  if (!c.config_file.empty()) {
    std::ifstream in(c.config_file);
    if (!in) throw gct::ConfigError("config", "cannot open " + c.config_file);
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw gct::ConfigError("config", std::string("not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw gct::ConfigError("config", "top level must be an object");
    if (doc.contains("preset")) preset = doc["preset"].get<std::string>();
  }
  doc.merge_patch(flag_overrides);
  for (const auto& o : c.overrides) set_dotted(doc, o);

  Resolved r;
  r.model = gct::preset_config(preset);
  r.seed = c.seed;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (it.key() == "model") gct::update_from_json(r.model, it.value(), "model");
    else if (it.key() == "train") gct::update_from_json(r.train, it.value(), "train");
    else if (it.key() == "seed") {
      if (!it.value().is_number_unsigned()) throw gct::ConfigError("seed", "must be a non-negative integer");
      if (!have_seed_flag) r.seed = it.value().get<std::uint64_t>();
    } else if (it.key() != "preset") {
      throw gct::ConfigError(it.key(), "unknown key");
    }
  }
  r.doc = {{"preset", preset}, {"model", r.model}, {"train", r.train}, {"seed", r.seed}};
  return r;
}

fs::path make_run_dir(const std::string& root, const std::string& cmd) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << cmd << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
  fs::path dir = fs::path(root) / stamp.str();
  for (int n = 1; fs::exists(dir); ++n) dir = fs::path(root) / (stamp.str() + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw gct::FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_run_info(const fs::path& dir, const std::string& cmd, std::uint64_t seed, const json& config,
                    const std::vector<std::string>& argv) {
  write_json(dir / "config.json", config);
  write_json(dir / "run.json", {{"tool", "gct_cli"}, {"version", GCT_VERSION}, {"command", cmd}, {"seed", seed},
                                {"argv", argv}});
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const gct::ConfigError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

// Decodes every clip on up to `jobs` threads; results keep dataset order.
std::vector<gct::DecodeResult> decode_all(const gct::Dataset& data, const gct::LoadedModel<float>& m,
                                          gct::DecodeMode mode, double alpha, std::size_t max_len, unsigned jobs) {
  std::vector<gct::DecodeResult> out(data.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < data.size();) {
      try {
        out[i] = gct::decode(data[i].features, m.config, m.params, mode, alpha, max_len);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(data.size())));
  std::vector<std::thread> pool;
  for (unsigned j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::size_t resolve_max_len(int flag, const gct::GctConfig& cfg) {
  if (flag < 0) return static_cast<std::size_t>(cfg.max_target_len);
  if (flag < 2) throw gct::ConfigError("max-len", "must be >= 2");
  return static_cast<std::size_t>(flag);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Sequential audio tagging with a bidirectional gated contextual transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", GCT_VERSION);

  Common common;
  auto add_common = [&](CLI::App* sub, bool model_flags) {
    if (model_flags) {
      sub->add_option("--preset", common.preset, "toy | toy-patches | paper-patches | paper-clip")->capture_default_str();
      sub->add_option("--config", common.config_file, "JSON file with model/train sections and seed");
      sub->add_option("--set", common.overrides, "Dotted override, e.g. model.d_model=32 (repeatable)");
    }
    sub->add_option("--out", common.out, "Root directory for run directories")->capture_default_str();
  };
  std::uint64_t seed_flag = 0;
  auto add_seed = [&](CLI::App* sub) { return sub->add_option("--seed", seed_flag, "Random seed"); };

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic sequential-event dataset");
  std::size_t s_clips = 50, s_classes = 6, s_max_events = 4;
  gct::DatasetOptions s_opt;
  std::string s_out = "synth";
  synth->add_option("--clips", s_clips, "Number of clips")->capture_default_str();
  synth->add_option("--classes", s_classes, "Number of event classes (<= 30)")->capture_default_str();
  synth->add_option("--max-events", s_max_events, "Maximum events per clip")->capture_default_str();
  synth->add_option("--min-events", s_opt.min_events, "Minimum events per clip")->capture_default_str();
  synth->add_option("--frames", s_opt.clip.total_frames, "Frames per clip")->capture_default_str();
  synth->add_option("--duration", s_opt.duration, "Event duration in frames")->capture_default_str();
  synth->add_option("--noise-db", s_opt.clip.noise_db, "Noise floor relative to event energy")->capture_default_str();
  synth->add_flag("--wav", s_opt.wav, "Write 16 kHz WAV clips instead of spectrogram CSVs");
  synth->add_option("--out", s_out, "Output directory")->capture_default_str();
  add_seed(synth);

  // train
  auto* train = app.add_subcommand("train", "Train a model on a manifest");
  add_common(train, true);
  auto* t_seed = add_seed(train);
  std::string t_manifest, t_input_mode;
  bool t_no_pos = false, t_no_gcmlp = false, t_baseline = false;
  int t_epochs = -1;
  std::size_t t_batch = 0;
  double t_lr = -1.0;
  train->add_option("--manifest", t_manifest, "Training manifest (TSV)")->required();
  train->add_option("--input-mode", t_input_mode, "patches | clip");
  train->add_flag("--no-pos-emb", t_no_pos, "Drop the encoder positional table");
  train->add_flag("--no-gcmlp", t_no_gcmlp, "Replace the gated head by linear + softmax");
  train->add_flag("--transformer-baseline", t_baseline, "Train the normal branch only");
  train->add_option("--epochs", t_epochs, "Epochs");
  train->add_option("--batch-size", t_batch, "Batch size");
  train->add_option("--lr", t_lr, "Learning rate");

  // eval
  auto* eval = app.add_subcommand("eval", "Decode a manifest and score it");
  add_common(eval, false);
  std::string e_ckpt, e_manifest, e_mode = "fbi";
  double e_alpha = 0.5;
  unsigned e_jobs = 1;
  int e_max_len = -1;
  eval->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
  eval->add_option("--manifest", e_manifest, "Manifest to evaluate")->required();
  eval->add_option("--mode", e_mode, "fbi | normal | reverse")->capture_default_str();
  eval->add_option("--alpha", e_alpha, "Forward weight for FBI")->capture_default_str();
  eval->add_option("--jobs", e_jobs, "Parallel decode workers")->capture_default_str();
  eval->add_option("--max-len", e_max_len, "Decode length bound (default: training max length)");

  // infer
  auto* infer = app.add_subcommand("infer", "Decode individual clips");
  add_common(infer, false);
  std::string i_ckpt, i_mode = "fbi";
  std::vector<std::string> i_inputs;
  double i_alpha = 0.5;
  int i_max_len = -1;
  infer->add_option("--checkpoint", i_ckpt, "Checkpoint file")->required();
  infer->add_option("inputs", i_inputs, "WAV or spectrogram CSV files")->required();
  infer->add_option("--mode", i_mode, "fbi | normal | reverse")->capture_default_str();
  infer->add_option("--alpha", i_alpha, "Forward weight for FBI")->capture_default_str();
  infer->add_option("--max-len", i_max_len, "Decode length bound");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
  add_common(gradcheck, true);
  auto* g_seed = add_seed(gradcheck);
  std::size_t g_coords = 2000, g_frames = 0;
  int g_vocab = 6;
  bool g_baseline = false;
  gradcheck->add_option("--coords", g_coords, "Coordinates sampled (0 = all)")->capture_default_str();
  gradcheck->add_option("--frames", g_frames, "Input frames (default: one patch row or 16 frames)");
  gradcheck->add_option("--vocab", g_vocab, "Vocabulary size including the 4 control tokens")->capture_default_str();
  gradcheck->add_flag("--transformer-baseline", g_baseline, "Check the normal-branch objective only");

  // attention
  auto* attention = app.add_subcommand("attention", "Dump decoder attention maps for one clip");
  add_common(attention, false);
  std::string a_ckpt, a_input;
  double a_alpha = 0.5;
  int a_max_len = -1;
  attention->add_option("--checkpoint", a_ckpt, "Checkpoint file")->required();
  attention->add_option("--input", a_input, "WAV or spectrogram CSV file")->required();
  attention->add_option("--alpha", a_alpha, "Forward weight for FBI")->capture_default_str();
  attention->add_option("--max-len", a_max_len, "Decode length bound");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  if (synth->parsed()) {
    return guarded([&] {
      const auto manifest = gct::generate_dataset(s_clips, s_classes, s_max_events, seed_flag, s_out, s_opt);
      write_json(fs::path(s_out) / "synth.json",
                 {{"version", GCT_VERSION}, {"seed", seed_flag}, {"clips", s_clips}, {"classes", s_classes},
                  {"max_events", s_max_events}, {"min_events", s_opt.min_events},
                  {"frames", s_opt.clip.total_frames}, {"duration", s_opt.duration},
                  {"noise_db", s_opt.clip.noise_db}, {"wav", s_opt.wav}});
      std::cout << manifest.string() << '\n';
      return 0;
    });
  }

  if (train->parsed()) {
    return guarded([&] {
      common.seed = seed_flag;
      json flags = json::object();
      if (!t_input_mode.empty()) flags["model"]["input_mode"] = t_input_mode;
      if (t_no_pos) flags["model"]["pos_emb"] = false;
      if (t_no_gcmlp) flags["model"]["gcmlp"] = false;
      if (t_baseline) flags["train"]["transformer_baseline"] = true;
      if (t_epochs >= 0) flags["train"]["epochs"] = t_epochs;
      if (t_batch > 0) flags["train"]["batch_size"] = t_batch;
      if (t_lr > 0) flags["train"]["learning_rate"] = t_lr;
      Resolved r = resolve(common, flags, t_seed->count() > 0);
      const gct::Manifest manifest = gct::load_manifest(t_manifest);
      const gct::Vocab vocab = manifest.build_vocab();
      if (vocab.num_events() == 0) throw gct::ParameterError("train: manifest has no events");
      r.model.vocab_size = static_cast<int>(vocab.size());
      r.model.validate();
      r.doc["model"] = r.model;
      r.doc["manifest"] = fs::absolute(t_manifest).string();
      const gct::Dataset data = gct::load_dataset(manifest, vocab);

      const fs::path dir = make_run_dir(common.out, "train");
      write_run_info(dir, "train", r.seed, r.doc, args);
      std::cout << "run dir: " << dir.string() << "\nparameters: " << gct::count_parameters(r.model) << '\n';
      gct::TrainOptions opt;
      opt.out_dir = dir;
      opt.checkpoint_extra = {{"version", GCT_VERSION}};
      opt.on_epoch = [](const gct::EpochLog& l) {
        std::cout << "epoch " << l.epoch << " train " << l.train.total;
        if (l.has_val) std::cout << " val " << l.val.total;
        std::cout << std::endl;
      };
      const gct::TrainReport report = gct::train<float>(data, vocab, r.model, r.train, r.seed, opt);
      report.write_loss_csv((dir / "loss.csv").string());
      json rj = report.to_json();
      rj["parameters"] = gct::count_parameters(r.model);
      write_json(dir / "report.json", rj);
      std::cout << "best epoch " << report.best_epoch << ", checkpoint " << report.best_checkpoint << '\n';
      return 0;
    });
  }

  if (eval->parsed()) {
    return guarded([&] {
      const auto mode = gct::decode_mode_from_string(e_mode);
      const auto model = gct::load_checkpoint<float>(e_ckpt);
      const std::size_t max_len = resolve_max_len(e_max_len, model.config);
      if (mode == gct::DecodeMode::kFbi && !(e_alpha >= 0.0 && e_alpha <= 1.0)) {
        throw gct::ConfigError("alpha", "must lie in [0,1]");
      }
      const gct::Manifest manifest = gct::load_manifest(e_manifest);
      const gct::Dataset data = gct::load_dataset(manifest, model.vocab);
      if (data.empty()) throw gct::ParameterError("eval: manifest is empty");
      const fs::path dir = make_run_dir(common.out, "eval");
      const std::uint64_t seed = model.header.value("seed", std::uint64_t{0});
      write_run_info(dir, "eval", seed,
                     {{"checkpoint", fs::absolute(e_ckpt).string()}, {"manifest", fs::absolute(e_manifest).string()},
                      {"mode", e_mode}, {"alpha", e_alpha}, {"max_len", max_len}, {"model", model.config}},
                     args);
      const auto results = decode_all(data, model, mode, e_alpha, max_len, e_jobs);
      std::ofstream jsonl(dir / "decode.jsonl");
      std::vector<gct::ClipEval> evals;
      for (std::size_t i = 0; i < data.size(); ++i) {
        jsonl << gct::decode_json(data[i].id, results[i], model.vocab).dump() << '\n';
        evals.push_back(gct::make_clip_eval(results[i], data[i].label, model.vocab.num_events()));
      }
      const gct::MetricsBundle metrics = gct::compute_metrics(evals);
      json mj = metrics.to_json();
      mj["mode"] = e_mode;
      mj["alpha"] = e_alpha;
      write_json(dir / "metrics.json", mj);
      std::cout << "run dir: " << dir.string() << '\n' << mj.dump(2) << '\n';
      return 0;
    });
  }

  if (infer->parsed()) {
    return guarded([&] {
      const auto mode = gct::decode_mode_from_string(i_mode);
      const auto model = gct::load_checkpoint<float>(i_ckpt);
      const std::size_t max_len = resolve_max_len(i_max_len, model.config);
      const fs::path dir = make_run_dir(common.out, "infer");
      write_run_info(dir, "infer", model.header.value("seed", std::uint64_t{0}),
                     {{"checkpoint", fs::absolute(i_ckpt).string()}, {"mode", i_mode}, {"alpha", i_alpha},
                      {"max_len", max_len}, {"model", model.config}},
                     args);
      std::ofstream jsonl(dir / "decode.jsonl");
      for (const auto& path : i_inputs) {
        const auto r = gct::decode(gct::load_features(path), model.config, model.params, mode, i_alpha, max_len);
        const std::string line = gct::decode_json(path, r, model.vocab).dump();
        jsonl << line << '\n';
        std::cout << line << '\n';
      }
      return 0;
    });
  }

  if (gradcheck->parsed()) {
    return guarded([&] {
      common.seed = seed_flag;
      json flags = json::object();
      flags["model"]["vocab_size"] = g_vocab;
      Resolved r = resolve(common, flags, g_seed->count() > 0);
      r.model.validate();
      const std::size_t frames =
          g_frames > 0 ? g_frames
                       : (r.model.input_mode == gct::InputMode::kPatches ? static_cast<std::size_t>(r.model.patch_time)
                                                                         : std::size_t{16});
      // Random features and a label that uses every event slot.
      gct::Rng rng = gct::derive_rng(r.seed, 7);
      std::normal_distribution<double> n(0.0, 1.0);
      gct::Spectrogram x(frames, static_cast<std::size_t>(r.model.n_mels));
      for (auto& v : x.values) v = n(rng);
      gct::SequentialLabel label;
      const int events = r.model.vocab_size - gct::kFirstEvent;
      for (int i = 0; i + 1 < r.model.max_target_len && i < std::max(events, 1); ++i) {
        label.push_back(static_cast<gct::TokenId>(gct::kFirstEvent + (i % events)));
      }
      gct::GradCheckOptions opt;
      opt.max_coords = g_coords;
      opt.seed = r.seed;
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = gct::model_gradcheck<double>(r.model, x, label, r.seed, opt, g_baseline);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const fs::path dir = make_run_dir(common.out, "gradcheck");
      write_run_info(dir, "gradcheck", r.seed, r.doc, args);
      const json out{{"max_rel_error", res.max_rel_error}, {"worst_param", res.worst_param},
                     {"worst_index", res.worst_index},     {"analytic", res.analytic},
                     {"numeric", res.numeric},             {"checked", res.checked},
                     {"seconds", secs},                    {"threshold", 1e-4},
                     {"pass", res.max_rel_error < 1e-4}};
      write_json(dir / "gradcheck.json", out);
      std::cout << out.dump(2) << '\n';
      return res.max_rel_error < 1e-4 ? 0 : 1;
    });
  }

  if (attention->parsed()) {
    return guarded([&] {
      if (!(a_alpha >= 0.0 && a_alpha <= 1.0)) throw gct::ConfigError("alpha", "must lie in [0,1]");
      const auto model = gct::load_checkpoint<float>(a_ckpt);
      const std::size_t max_len = resolve_max_len(a_max_len, model.config);
      const fs::path dir = make_run_dir(common.out, "attention");
      write_run_info(dir, "attention", model.header.value("seed", std::uint64_t{0}),
                     {{"checkpoint", fs::absolute(a_ckpt).string()}, {"input", a_input}, {"alpha", a_alpha},
                      {"max_len", max_len}, {"model", model.config}},
                     args);
      const auto r = gct::fbi_decode(gct::load_features(a_input), model.config, model.params, a_alpha, max_len);
      write_json(dir / "decode.json", gct::decode_json(a_input, r, model.vocab));
      const auto files = gct::dump_attention(r, model.vocab, dir / "attention");
      std::cout << "run dir: " << dir.string() << "\nwrote " << files.size() << " attention maps\n";
      return 0;
    });
  }
  return kExitConfig;
}
