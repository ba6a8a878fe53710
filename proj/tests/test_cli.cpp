// Command layer, both in-process (cmd_* functions) and through the real
// binary (exit codes, flag layering, artifact round trips).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cliporder/clip.hpp"
#include "cliporder/commands.hpp"
#include "cliporder/errors.hpp"
#include "cliporder/heads.hpp"
#include "cliporder/serialize.hpp"
#include "doctest.h"
#include "temp_dir.hpp"

using namespace cliporder;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CLIPORDER_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CliResult r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

RunConfig smoke_run(const TempDir& dir, const std::string& sub) {
  RunConfig run;
  run.seed = 7;
  run.sequences = 3;
  run.synth.clips_per_sequence = 6;
  run.out = dir.file(sub);
  return run;
}

// Synth a tiny dataset once per test that needs one.
DatasetIndex make_dataset(const TempDir& dir, RunConfig& run) {
  std::ostringstream log;
  run.out = dir.file("data");
  cmd_synth(run, log);
  run.data = run.out;
  return load_manifest(run.data);
}

}  // namespace

TEST_CASE("run config json round trips and rejects unknown keys") {
  RunConfig run;
  run.seed = 42;
  run.threads = 3;
  run.out = "/tmp/x";
  run.data = "/tmp/d";
  run.checkpoint = "/tmp/m.bock";
  run.sequences = 9;
  run.eval_min_sep = 2;
  run.eval_max_sep = 7;
  run.eval_pairs_per_video = 12;
  run.train.method = Method::kTtCls;
  run.train.epochs = 2;
  run.train.lr = 1e-3;
  run.train.encoder.embed_dim = 32;
  run.train.encoder.heads = 2;
  run.synth.clips_per_sequence = 8;
  run.synth.noise_std = 0.01;

  const RunConfig back = run_config_from_json(run_config_to_json(run));
  CHECK(back.seed == run.seed);
  CHECK(back.threads == run.threads);
  CHECK(back.out == run.out);
  CHECK(back.data == run.data);
  CHECK(back.checkpoint == run.checkpoint);
  CHECK(back.sequences == run.sequences);
  CHECK(back.eval_min_sep == run.eval_min_sep);
  CHECK(back.eval_max_sep == run.eval_max_sep);
  CHECK(back.eval_pairs_per_video == run.eval_pairs_per_video);
  CHECK(back.train.method == Method::kTtCls);
  CHECK(back.train.epochs == 2);
  CHECK(back.train.lr == 1e-3);
  CHECK(back.train.encoder.embed_dim == 32);
  CHECK(back.train.encoder.heads == 2);
  CHECK(back.synth.clips_per_sequence == 8);
  CHECK(back.synth.noise_std == 0.01);

  CHECK_THROWS_AS((void)run_config_from_json(R"({"sede": 1})"), ConfigError);
  CHECK_THROWS_AS((void)run_config_from_json(R"({"synth": {"nois_std": 0.1}})"), ConfigError);
  CHECK_THROWS_AS((void)run_config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS((void)run_config_from_json("[1,2]"), ConfigError);
  CHECK_THROWS_AS((void)load_run_config("/nonexistent/run.json"), DataError);
}

TEST_CASE("run config validation rejects out-of-range fields") {
  const RunConfig good;
  CHECK_NOTHROW(good.validate());

  RunConfig run;
  run.threads = 0;
  CHECK_THROWS_AS(run.validate(), ConfigError);
  run = RunConfig{};
  run.sequences = 0;
  CHECK_THROWS_AS(run.validate(), ConfigError);
  run = RunConfig{};
  run.eval_min_sep = 0;
  CHECK_THROWS_AS(run.validate(), ConfigError);
  run = RunConfig{};
  run.eval_max_sep = 0;
  CHECK_THROWS_AS(run.validate(), ConfigError);
  run = RunConfig{};
  run.eval_pairs_per_video = 0;
  CHECK_THROWS_AS(run.validate(), ConfigError);
  run = RunConfig{};
  run.eval_pairs_per_video = -2;
  CHECK_THROWS_AS(run.validate(), ConfigError);
  run = RunConfig{};
  run.train.epochs = 6;  // nested configs are validated too
  CHECK_THROWS_AS(run.validate(), ConfigError);
}

TEST_CASE("cmd_synth writes a loadable dataset and its resolved config") {
  TempDir dir("cmd_synth");
  RunConfig run = smoke_run(dir, "data");
  std::ostringstream log;
  cmd_synth(run, log);

  const DatasetIndex index = load_manifest(run.out);
  CHECK(index.sequences.size() == 3);
  CHECK(log.str().find("3 sequences") != std::string::npos);

  // The serialized config reloads and reproduces the run identically.
  const RunConfig echoed = load_run_config(run.out + "/run_config.json");
  CHECK(echoed.seed == 7);
  CHECK(echoed.train.seed == 7);  // resolved: root seed propagated
  CHECK(echoed.synth.clips_per_sequence == 6);

  RunConfig bad = smoke_run(dir, "bad");
  bad.synth.clips_per_sequence = 2;
  CHECK_THROWS_AS(cmd_synth(bad, log), ConfigError);
  RunConfig noout = smoke_run(dir, "x");
  noout.out.clear();
  CHECK_THROWS_AS(cmd_synth(noout, log), ConfigError);
}

TEST_CASE("cmd_mask keep_ratio 1 is the identity and 0.25 keeps 4 of 16 tiles") {
  TempDir dir("cmd_mask");
  RunConfig run = smoke_run(dir, "data");
  const DatasetIndex index = make_dataset(dir, run);
  std::ostringstream log;

  run.out = dir.file("keep_all");
  run.train.encoder.keep_ratio = 1.0;
  cmd_mask(run, log);
  const DatasetIndex all = load_manifest(run.out);
  const Clip orig = load_clip(index, index.sequences[0].clips[0]);
  const Clip kept = load_clip(all, all.sequences[0].clips[0]);
  CHECK(kept.pixels == orig.pixels);

  run.out = dir.file("keep_q");
  run.train.encoder.keep_ratio = 0.25;  // 32x32 at tile 8 -> 16 tiles, keep 4
  cmd_mask(run, log);
  const DatasetIndex quarter = load_manifest(run.out);
  const Clip masked = load_clip(quarter, quarter.sequences[0].clips[0]);
  for (std::uint32_t t = 0; t < masked.t; ++t) {
    int live = 0;
    for (int ty = 0; ty < 4; ++ty)
      for (int tx = 0; tx < 4; ++tx) {
        bool any = false;
        for (int y = 0; y < 8 && !any; ++y)
          for (int x = 0; x < 8 && !any; ++x)
            any = masked.at(t, ty * 8 + y, tx * 8 + x, 0) != 0.0f;
        live += any;
      }
    CHECK(live == 4);
  }
  CHECK(fs::exists(run.out + "/previews"));
  CHECK(std::distance(fs::directory_iterator(run.out + "/previews"),
                      fs::directory_iterator{}) == 18);
}

TEST_CASE("cmd_train saves a reloadable model next to its config") {
  TempDir dir("cmd_train");
  RunConfig run = smoke_run(dir, "data");
  make_dataset(dir, run);
  run.out = dir.file("run");
  run.train.epochs = 1;
  run.train.batch_size = 4;
  run.train.encoder.embed_dim = 16;
  run.train.encoder.heads = 2;
  run.train.encoder.spatial_layers = 1;
  run.train.encoder.temporal_layers = 1;
  run.train.encoder.rot_block = 4;

  std::ostringstream log;
  const TrainedModel model = cmd_train(run, log);
  CHECK(log.str().find("epoch 1") != std::string::npos);
  for (const char* name : {"model.bock", "model.json", "run_config.json", "train_log.csv",
                           "epochs.csv", "epoch_1.bock"})
    CHECK(fs::exists(run.out + "/" + std::string(name)));

  const TrainedModel back = load_model(run.out + "/model.bock");
  CHECK(back.config.encoder.embed_dim == 16);
  CHECK(back.config.seed == 7);
  REQUIRE(back.params.size() == model.params.size());
  for (const auto& [name, tensor] : model.params)
    CHECK(back.params.at(name).data() == tensor.data());

  CHECK_THROWS_AS((void)load_model(dir.file("missing.bock")), DataError);
  // A checkpoint without its sibling model.json is unusable for eval.
  fs::copy_file(run.out + "/model.bock", dir.file("orphan.bock"));
  CHECK_THROWS_AS((void)load_model(dir.file("orphan.bock")), DataError);

  RunConfig nodata = run;
  nodata.data.clear();
  CHECK_THROWS_AS((void)cmd_train(nodata, log), ConfigError);
}

TEST_CASE("cmd_eval and cmd_curve share artifacts and reuse the training split") {
  TempDir dir("cmd_eval");
  RunConfig run = smoke_run(dir, "data");
  make_dataset(dir, run);
  run.out = dir.file("run");
  run.train.epochs = 1;
  run.train.batch_size = 4;
  run.train.encoder.embed_dim = 16;
  run.train.encoder.heads = 2;
  run.train.encoder.spatial_layers = 1;
  run.train.encoder.temporal_layers = 1;
  run.train.encoder.rot_block = 4;
  std::ostringstream log;
  cmd_train(run, log);

  RunConfig ev = run;
  ev.checkpoint = run.out + "/model.bock";
  ev.out = dir.file("eval");
  const EvalReport report = cmd_eval(ev, log);
  CHECK(report.method == "embedding");
  CHECK(report.n_pairs > 0);
  CHECK(report.tp + report.fp + report.tn + report.fn == report.n_pairs);
  for (const char* name : {"results.csv", "curve.csv", "curve.svg", "run_meta.json",
                           "run_config.json"})
    CHECK(fs::exists(ev.out + "/" + std::string(name)));
  const std::string results = slurp(ev.out + "/results.csv");
  CHECK(results.find("method,posenc,mgm,accuracy,f1") == 0);
  CHECK(results.find("embedding,ape,off,") != std::string::npos);

  RunConfig cv = ev;
  cv.out = dir.file("curve");
  const SeparationCurve curve = cmd_curve(cv, log);
  CHECK(!curve.points.empty());
  std::int64_t total = 0;
  for (const DeltaAccuracy& p : curve.points) total += p.n;
  CHECK(total == report.n_pairs);
  // Same pairs, same model -> same curve bytes.
  CHECK(slurp(cv.out + "/curve.csv") == slurp(ev.out + "/curve.csv"));
  CHECK(slurp(cv.out + "/curve.svg") == slurp(ev.out + "/curve.svg"));

  RunConfig nock = ev;
  nock.checkpoint.clear();
  CHECK_THROWS_AS((void)cmd_eval(nock, log), ConfigError);
  RunConfig gone = ev;
  gone.checkpoint = dir.file("gone.bock");
  CHECK_THROWS_AS((void)cmd_eval(gone, log), DataError);
}

TEST_CASE("cmd_inspect dispatches on dataset, clip and checkpoint") {
  TempDir dir("cmd_inspect");
  RunConfig run = smoke_run(dir, "data");
  const DatasetIndex index = make_dataset(dir, run);
  std::ostringstream log;

  cmd_inspect(run.data, log);
  CHECK(log.str().find("3 sequences") != std::string::npos);
  CHECK(log.str().find("sob") != std::string::npos);

  log.str("");
  cmd_inspect(run.data + "/" + index.sequences[0].clips[0].path, log);
  CHECK(log.str().find("8x32x32x1") != std::string::npos);

  ParamMap params;
  params.emplace("w", Tensor::zeros({2, 3}));
  save_checkpoint(dir.file("t.bock"), params);
  log.str("");
  cmd_inspect(dir.file("t.bock"), log);
  CHECK(log.str().find("[2, 3]") != std::string::npos);
  CHECK(log.str().find("1 tensors, 6 parameters") != std::string::npos);

  CHECK_THROWS_AS(cmd_inspect(dir.file("absent"), log), DataError);
  std::ofstream(dir.file("junk.bin"), std::ios::binary) << "JUNKJUNKJUNK";
  CHECK_THROWS_AS(cmd_inspect(dir.file("junk.bin"), log), FormatError);
}

TEST_CASE("binary: version, exit codes and flag validation") {
  CHECK(run_cli("--version").output.find("cliporder v") == 0);
  CHECK(run_cli("--version").exit_code == 0);

  TempDir dir("cli_codes");
  CHECK(run_cli("synth --out " + dir.file("d") + " --clips 2").exit_code == 1);
  CHECK(run_cli("synth").exit_code == 1);  // no --out
  CHECK(run_cli("train --data " + dir.file("nowhere") + " --out " + dir.file("o")).exit_code ==
        2);
  CHECK(run_cli("mask --data " + dir.file("nowhere") + " --out " + dir.file("o")).exit_code == 2);
  CHECK(run_cli("eval --data " + dir.file("nowhere") + " --checkpoint " + dir.file("m.bock") +
                " --out " + dir.file("o"))
            .exit_code == 2);
  CHECK(run_cli("inspect " + dir.file("absent")).exit_code == 2);

  const CliResult bad_method = run_cli("train --data x --out y --method nope");
  CHECK(bad_method.exit_code == 1);
  CHECK(bad_method.output.find("unknown method") != std::string::npos);
  CHECK(run_cli("train --data x --out y --posenc rope").exit_code == 1);
  CHECK(run_cli("train --data x --out y --mgm maybe").exit_code == 1);
  CHECK(run_cli("train --data x --out y --preset huge").exit_code == 1);
  CHECK(run_cli("synth --out " + dir.file("d") + " --threads 0").exit_code == 1);

  // Unknown flags and missing subcommands are parser errors, not crashes.
  CHECK(run_cli("").exit_code != 0);
  CHECK(run_cli("synth --frobnicate").exit_code != 0);
}

TEST_CASE("binary: synth is deterministic and feeds train/eval end to end") {
  TempDir dir("cli_e2e");
  const std::string args = " --sequences 3 --clips 6 --seed 7";
  REQUIRE(run_cli("synth --out " + dir.file("a") + args).exit_code == 0);
  REQUIRE(run_cli("synth --out " + dir.file("b") + args).exit_code == 0);

  // Identical clip bytes and manifest; only the echoed out path may differ.
  const DatasetIndex a = load_manifest(dir.file("a"));
  for (const SequenceRef& seq : a.sequences)
    for (const ClipRef& ref : seq.clips)
      CHECK(slurp(dir.file("a") + "/" + ref.path) == slurp(dir.file("b") + "/" + ref.path));
  CHECK(slurp(dir.file("a") + "/manifest.json") == slurp(dir.file("b") + "/manifest.json"));

  const std::string enc =
      " --epochs 1 --batch 4 --seed 11"
      " --method embedding --posenc liere --mgm on --keep-ratio 0.5";
  // The toy preset is the default; shrink nothing and train one epoch.
  const CliResult tr =
      run_cli("train --data " + dir.file("a") + " --out " + dir.file("run") + enc);
  REQUIRE(tr.exit_code == 0);
  CHECK(tr.output.find("epoch 1") != std::string::npos);

  const CliResult ev = run_cli("eval --data " + dir.file("a") + " --checkpoint " +
                               dir.file("run") + "/model.bock --out " + dir.file("eval") +
                               " --seed 11");
  REQUIRE(ev.exit_code == 0);
  const std::string results = slurp(dir.file("eval") + "/results.csv");
  CHECK(results.find("tt") == std::string::npos);
  CHECK(results.find("embedding,liere,on,") != std::string::npos);

  const CliResult ins = run_cli("inspect " + dir.file("run") + "/model.bock");
  CHECK(ins.exit_code == 0);
  CHECK(ins.output.find("liere.ux") != std::string::npos);  // rotation generators saved
}
