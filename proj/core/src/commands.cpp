#include "cliporder/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "cliporder/errors.hpp"
#include "cliporder/gradcheck.hpp"
#include "cliporder/heads.hpp"
#include "cliporder/motion.hpp"
#include "cliporder/serialize.hpp"
#include "cliporder/version.hpp"

namespace fs = std::filesystem;

namespace cliporder {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << body;
  out.flush();
  if (!out) throw DataError("failed while writing '" + path + "'");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

nlohmann::json synth_to_json(const SynthParams& p) {
  return nlohmann::json{{"clips_per_sequence", p.clips_per_sequence},
                        {"frames", p.frames},
                        {"height", p.height},
                        {"width", p.width},
                        {"channels", p.channels},
                        {"clip_seconds", p.clip_seconds},
                        {"amplitude_start", p.amplitude_start},
                        {"amplitude_end", p.amplitude_end},
                        {"rate_start", p.rate_start},
                        {"rate_end", p.rate_end},
                        {"noise_std", p.noise_std},
                        {"drift_px", p.drift_px},
                        {"gain_jitter", p.gain_jitter}};
}

SynthParams synth_from_json(const nlohmann::json& j) {
  SynthParams p;
  for (const auto& [key, value] : j.items()) {
    if (key == "clips_per_sequence")
      p.clips_per_sequence = value.get<std::int64_t>();
    else if (key == "frames")
      p.frames = value.get<std::int64_t>();
    else if (key == "height")
      p.height = value.get<std::int64_t>();
    else if (key == "width")
      p.width = value.get<std::int64_t>();
    else if (key == "channels")
      p.channels = value.get<std::int64_t>();
    else if (key == "clip_seconds")
      p.clip_seconds = value.get<double>();
    else if (key == "amplitude_start")
      p.amplitude_start = value.get<double>();
    else if (key == "amplitude_end")
      p.amplitude_end = value.get<double>();
    else if (key == "rate_start")
      p.rate_start = value.get<double>();
    else if (key == "rate_end")
      p.rate_end = value.get<double>();
    else if (key == "noise_std")
      p.noise_std = value.get<double>();
    else if (key == "drift_px")
      p.drift_px = value.get<double>();
    else if (key == "gain_jitter")
      p.gain_jitter = value.get<double>();
    else
      throw ConfigError("unknown synth config key '" + key + "'");
  }
  return p;
}

// One root seed rules every command: derived configs inherit it here so the
// serialized config shows exactly what ran.
RunConfig resolved(RunConfig run) {
  run.train.seed = run.seed;
  run.synth.seed = run.seed;
  return run;
}

void write_resolved_config(const RunConfig& run, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_file(out_dir + "/run_config.json", run_config_to_json(run) + "\n");
}

// Frame `frame` of a clip as a binary PGM (1 channel) or PPM (3 channels).
void write_frame_pnm(const Clip& clip, std::int64_t frame, const std::string& path) {
  if (clip.c != 1 && clip.c != 3)
    throw DataError("preview supports 1 or 3 channels, clip has " + std::to_string(clip.c));
  std::string body = clip.c == 1 ? "P5\n" : "P6\n";
  body += std::to_string(clip.w) + " " + std::to_string(clip.h) + "\n255\n";
  const std::size_t pixels = static_cast<std::size_t>(clip.h * clip.w * clip.c);
  const std::size_t base = static_cast<std::size_t>(frame) * pixels;
  for (std::size_t i = 0; i < pixels; ++i) {
    const double v = std::clamp(static_cast<double>(clip.pixels[base + i]), 0.0, 1.0);
    body += static_cast<char>(std::lround(v * 255.0));
  }
  write_file(path, body);
}

struct EvalFlow {
  TrainedModel model;
  EvalReport report;
  SeparationCurve curve;
};

EvalFlow run_eval_flow(const RunConfig& run) {
  if (run.checkpoint.empty())
    throw ConfigError("this command needs --checkpoint (a model.bock from `train`)");
  if (run.data.empty()) throw ConfigError("this command needs --data (a dataset directory)");
  if (run.out.empty()) throw ConfigError("this command needs --out (an output directory)");
  set_num_threads(run.threads);

  EvalFlow flow{load_model(run.checkpoint), {}, {}};
  DatasetIndex index = load_manifest(run.data);
  // The same split the model was trained with: its config carries the seed.
  DatasetSplit split = split_dataset(index, flow.model.config.seed);
  std::vector<EvalPair> pairs = draw_eval_pairs(index, split.test, run.eval_min_sep,
                                                run.eval_max_sep, run.eval_pairs_per_video,
                                                run.seed);
  std::vector<PairOutcome> outcomes = run_predictor(pairs, model_predictor(flow.model, index));
  flow.report = evaluate_outcomes(method_name(flow.model.config.method), outcomes);
  flow.report.posenc = posenc_mode_name(flow.model.config.encoder.posenc);
  flow.report.mgm = flow.model.config.encoder.mgm;
  flow.curve = curve_from_outcomes(outcomes);

  render_reports({flow.report}, flow.curve, run.out, run_config_to_json(run), run.seed);
  write_resolved_config(run, run.out);
  return flow;
}

}  // namespace

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (sequences < 1) throw ConfigError("sequences must be >= 1");
  if (eval_min_sep < 1) throw ConfigError("eval_min_sep must be >= 1");
  if (eval_max_sep < eval_min_sep) throw ConfigError("eval_max_sep must be >= eval_min_sep");
  if (eval_pairs_per_video < -1 || eval_pairs_per_video == 0)
    throw ConfigError("eval_pairs_per_video must be -1 (all) or positive");
  train.validate();
  synth.validate();
}

std::string run_config_to_json(const RunConfig& run) {
  nlohmann::json j{{"seed", run.seed},
                   {"threads", run.threads},
                   {"out", run.out},
                   {"data", run.data},
                   {"checkpoint", run.checkpoint},
                   {"sequences", run.sequences},
                   {"eval_min_sep", run.eval_min_sep},
                   {"eval_max_sep", run.eval_max_sep},
                   {"eval_pairs_per_video", run.eval_pairs_per_video},
                   {"train", nlohmann::json::parse(train_config_to_json(run.train))},
                   {"synth", synth_to_json(run.synth)}};
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig run;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed")
      run.seed = value.get<std::uint64_t>();
    else if (key == "threads")
      run.threads = value.get<int>();
    else if (key == "out")
      run.out = value.get<std::string>();
    else if (key == "data")
      run.data = value.get<std::string>();
    else if (key == "checkpoint")
      run.checkpoint = value.get<std::string>();
    else if (key == "sequences")
      run.sequences = value.get<std::int64_t>();
    else if (key == "eval_min_sep")
      run.eval_min_sep = value.get<std::int64_t>();
    else if (key == "eval_max_sep")
      run.eval_max_sep = value.get<std::int64_t>();
    else if (key == "eval_pairs_per_video")
      run.eval_pairs_per_video = value.get<std::int64_t>();
    else if (key == "train")
      run.train = train_config_from_json(value.dump());
    else if (key == "synth")
      run.synth = synth_from_json(value);
    else
      throw ConfigError("unknown run config key '" + key + "'");
  }
  return run;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(read_file(path));
}

void cmd_synth(const RunConfig& run0, std::ostream& log) {
  RunConfig run = resolved(run0);
  run.validate();
  if (run.out.empty()) throw ConfigError("synth needs --out (the dataset directory to create)");
  if (run.synth.clips_per_sequence < 3)
    throw ConfigError("thirds labeling needs at least 3 clips per sequence");
  set_num_threads(run.threads);

  DatasetIndex index =
      synth_dataset(run.out, static_cast<int>(run.sequences), run.synth, run.seed);
  write_resolved_config(run, run.out);

  std::size_t clips = 0;
  for (const SequenceRef& seq : index.sequences) clips += seq.clips.size();
  log << "wrote " << index.sequences.size() << " sequences (" << clips << " clips) to "
      << run.out << "\n";
}

void cmd_mask(const RunConfig& run0, std::ostream& log) {
  RunConfig run = resolved(run0);
  run.validate();
  if (run.data.empty()) throw ConfigError("mask needs --data (the dataset to mask)");
  if (run.out.empty()) throw ConfigError("mask needs --out (where masked clips go)");
  set_num_threads(run.threads);

  DatasetIndex index = load_manifest(run.data);
  ensure_dir(run.out + "/clips");
  ensure_dir(run.out + "/previews");

  const std::int64_t tile = run.train.encoder.patch;
  const int radius = run.train.encoder.flow_radius;
  const double keep = run.train.encoder.keep_ratio;

  std::size_t count = 0;
  for (const SequenceRef& seq : index.sequences) {
    for (const ClipRef& ref : seq.clips) {
      Clip clip = load_clip(index, ref);
      Clip masked = motion_guided_mask(clip, tile, radius, keep);
      write_clip(masked, run.out + "/" + ref.path);
      const std::string stem = fs::path(ref.path).stem().string();
      write_frame_pnm(masked, 0,
                      run.out + "/previews/" + stem + (masked.c == 1 ? ".pgm" : ".ppm"));
      ++count;
    }
  }

  DatasetIndex out_index = index;
  out_index.root = run.out;
  save_manifest(out_index);
  write_resolved_config(run, run.out);
  log << "masked " << count << " clips (tile " << tile << ", keep_ratio " << keep << ") into "
      << run.out << "\n";
}

TrainedModel cmd_train(const RunConfig& run0, std::ostream& log) {
  RunConfig run = resolved(run0);
  run.validate();
  if (run.data.empty()) throw ConfigError("train needs --data (a dataset directory)");
  if (run.out.empty()) throw ConfigError("train needs --out (an output directory)");
  set_num_threads(run.threads);

  DatasetIndex index = load_manifest(run.data);
  DatasetSplit split = split_dataset(index, run.seed);
  ensure_dir(run.out);
  write_resolved_config(run, run.out);

  TrainResult result = train_model(index, split, run.train, run.out);
  save_checkpoint(run.out + "/model.bock", result.model.params);
  write_file(run.out + "/model.json", train_config_to_json(result.model.config) + "\n");

  for (const EpochRecord& e : result.log.epochs) {
    log << "epoch " << e.epoch << ": train_loss " << e.train_loss;
    if (std::isfinite(e.val_loss)) log << ", val_loss " << e.val_loss;
    if (std::isfinite(e.val_accuracy)) log << ", val_accuracy " << e.val_accuracy;
    log << "\n";
  }
  log << "saved " << run.out << "/model.bock (" << result.model.params.size()
      << " parameter tensors)\n";
  return std::move(result.model);
}

EvalReport cmd_eval(const RunConfig& run0, std::ostream& log) {
  RunConfig run = resolved(run0);
  run.validate();
  EvalFlow flow = run_eval_flow(run);
  log << "method " << flow.report.method << " posenc " << flow.report.posenc << " mgm "
      << (flow.report.mgm ? "on" : "off") << ": " << flow.report.n_pairs << " pairs, accuracy "
      << flow.report.accuracy << ", f1 " << flow.report.f1 << "\n";
  log << "wrote results.csv, curve.csv, curve.svg, run_meta.json to " << run.out << "\n";
  return flow.report;
}

SeparationCurve cmd_curve(const RunConfig& run0, std::ostream& log) {
  RunConfig run = resolved(run0);
  run.validate();
  EvalFlow flow = run_eval_flow(run);
  for (const DeltaAccuracy& p : flow.curve.points) {
    log << "delta " << p.delta << ": n " << p.n << ", accuracy " << p.accuracy
        << (p.low_confidence ? " (low confidence)" : "") << "\n";
  }
  log << "wrote curve.csv and curve.svg to " << run.out << "\n";
  return flow.curve;
}

void cmd_gradcheck(std::uint64_t seed, std::ostream& log) {
  const std::vector<GradCheckRow> rows = gradient_check_suite(seed);
  int failures = 0;
  char buf[160];
  for (const GradCheckRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-28s %12.3e  (tol %.0e)  %s", r.name.c_str(),
                  r.max_rel_err, r.tolerance, r.pass ? "pass" : "FAIL");
    log << buf << "\n";
    if (!r.pass) ++failures;
  }
  log << rows.size() << " checks, " << failures << " failures\n";
  if (failures > 0)
    throw NumericError(std::to_string(failures) + " gradient checks exceeded tolerance");
}

void cmd_inspect(const std::string& path, std::ostream& log) {
  if (!fs::exists(path)) throw DataError("'" + path + "' does not exist");

  const auto print_manifest = [&](const std::string& dir) {
    DatasetIndex index = load_manifest(dir);
    std::size_t clips = 0;
    std::size_t sob = 0, nosob = 0, excluded = 0;
    for (const SequenceRef& seq : index.sequences) {
      clips += seq.clips.size();
      for (const ClipRef& ref : seq.clips) {
        if (ref.label == WeakLabel::kSob)
          ++sob;
        else if (ref.label == WeakLabel::kNoSob)
          ++nosob;
        else
          ++excluded;
      }
    }
    log << "dataset " << dir << ": " << index.sequences.size() << " sequences, " << clips
        << " clips (fps " << index.fps << ", clip_seconds " << index.clip_seconds << ")\n";
    log << "labels: " << sob << " sob, " << nosob << " no_sob, " << excluded << " excluded\n";
  };

  if (fs::is_directory(path)) {
    print_manifest(path);
    return;
  }
  if (fs::path(path).filename() == "manifest.json") {
    print_manifest(fs::path(path).parent_path().string());
    return;
  }

  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in) throw FormatError("'" + path + "' is too short to identify");

  if (std::string(magic, 4) == "VCLP") {
    Clip clip = read_clip(path);
    float lo = 0.0f, hi = 0.0f;
    if (!clip.pixels.empty()) {
      lo = *std::min_element(clip.pixels.begin(), clip.pixels.end());
      hi = *std::max_element(clip.pixels.begin(), clip.pixels.end());
    }
    log << "clip " << clip.video_id << "#" << clip.clip_index << ": " << clip.t << "x" << clip.h
        << "x" << clip.w << "x" << clip.c << " @ " << clip.fps << " fps, pixel range [" << lo
        << ", " << hi << "]\n";
    return;
  }
  if (std::string(magic, 4) == "BOCK") {
    ParamMap params = load_checkpoint(path);
    std::int64_t total = 0;
    for (const auto& [name, tensor] : params) {
      log << name << "  " << shape_str(tensor.shape()) << "\n";
      total += tensor.size();
    }
    log << params.size() << " tensors, " << total << " parameters\n";
    return;
  }
  throw FormatError("'" + path + "' is neither a VCLP clip, a BOCK checkpoint, nor a dataset");
}

TrainedModel load_model(const std::string& checkpoint_path) {
  if (!fs::exists(checkpoint_path))
    throw DataError("checkpoint '" + checkpoint_path + "' not found");
  const std::string config_path =
      (fs::path(checkpoint_path).parent_path() / "model.json").string();
  if (!fs::exists(config_path))
    throw DataError("model config '" + config_path + "' not found next to the checkpoint");
  TrainedModel model;
  model.config = train_config_from_json(read_file(config_path));
  model.params = load_checkpoint(checkpoint_path);
  return model;
}

const char* version_string() { return CLIPORDER_VERSION; }

}  // namespace cliporder
