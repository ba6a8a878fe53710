// cliporder: synthesize recovery datasets, train ordering models, and
// evaluate pairwise clip ordering. Exit codes: 0 ok, 1 bad config, 2 missing
// or malformed data, 3 numeric failure, 4 internal error.

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cliporder/commands.hpp"
#include "cliporder/encoder.hpp"
#include "cliporder/errors.hpp"
#include "cliporder/heads.hpp"

namespace co = cliporder;

namespace {

// Every flag a subcommand may bind. Which ones were actually given is read
// back through CLI11's count(), so config-file values survive unless the
// user overrides them explicitly (the vendored CLI11 has no std::optional
// bindings).
struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out, data, checkpoint;
  std::string method, posenc, mgm, preset;
  double keep_ratio = 0.2;
  std::int64_t sequences = 20;
  std::int64_t clips = 12;
  int epochs = 3;
  int batch = 16;
  double lr = 3e-4;
  std::int64_t pairs = -1;
  std::int64_t min_sep = 1;
  std::int64_t max_sep = 11;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "run config JSON; flags below override it");
  sub->add_option("--seed", f.seed, "root seed for every random draw");
  sub->add_option("--threads", f.threads, "worker threads (results are thread-count invariant)");
  sub->add_option("--out", f.out, "output directory");
}

void add_model_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--method", f.method, "embedding, tt_full or tt_cls");
  sub->add_option("--posenc", f.posenc, "ape or liere");
  sub->add_option("--mgm", f.mgm, "motion-guided masking: on or off");
  sub->add_option("--keep-ratio", f.keep_ratio, "fraction of tiles kept when masking");
  sub->add_option("--preset", f.preset, "encoder preset (toy or paper), applied before other flags");
}

// True when the flag exists on this subcommand and the user passed it.
bool given(const CLI::App& sub, const std::string& name) {
  const CLI::Option* opt = sub.get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

// Layering: config file -> preset -> individual flags.
co::RunConfig make_run(const CLI::App& sub, const Flags& f) {
  co::RunConfig run;
  if (given(sub, "--config")) run = co::load_run_config(f.config);
  if (given(sub, "--preset")) run.train.encoder = co::EncoderConfig::preset(f.preset);
  if (given(sub, "--seed")) run.seed = f.seed;
  if (given(sub, "--threads")) run.threads = f.threads;
  if (given(sub, "--out")) run.out = f.out;
  if (given(sub, "--data")) run.data = f.data;
  if (given(sub, "--checkpoint")) run.checkpoint = f.checkpoint;
  if (given(sub, "--method")) run.train.method = co::method_from_name(f.method);
  if (given(sub, "--posenc")) run.train.encoder.posenc = co::posenc_mode_from_name(f.posenc);
  if (given(sub, "--mgm")) {
    if (f.mgm == "on")
      run.train.encoder.mgm = true;
    else if (f.mgm == "off")
      run.train.encoder.mgm = false;
    else
      throw co::ConfigError("--mgm takes on or off, got '" + f.mgm + "'");
  }
  if (given(sub, "--keep-ratio")) run.train.encoder.keep_ratio = f.keep_ratio;
  if (given(sub, "--sequences")) run.sequences = f.sequences;
  if (given(sub, "--clips")) run.synth.clips_per_sequence = f.clips;
  if (given(sub, "--epochs")) run.train.epochs = f.epochs;
  if (given(sub, "--batch")) run.train.batch_size = f.batch;
  if (given(sub, "--lr")) run.train.lr = f.lr;
  if (given(sub, "--pairs")) run.eval_pairs_per_video = f.pairs;
  if (given(sub, "--min-sep")) run.eval_min_sep = f.min_sep;
  if (given(sub, "--max-sep")) run.eval_max_sep = f.max_sep;
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clip-ordering workbench: synthetic data, training, evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("cliporder ") + co::version_string());

  Flags f;
  std::string inspect_path;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic recovery dataset");
  add_common(synth, f);
  synth->add_option("--sequences", f.sequences, "videos to generate");
  synth->add_option("--clips", f.clips, "clips per video (>= 3 for thirds labels)");
  synth->callback([&] { co::cmd_synth(make_run(*synth, f), std::cout); });

  CLI::App* mask = app.add_subcommand("mask", "apply motion-guided masking to a dataset");
  add_common(mask, f);
  add_model_flags(mask, f);
  mask->add_option("--data", f.data, "dataset directory to mask");
  mask->callback([&] { co::cmd_mask(make_run(*mask, f), std::cout); });

  CLI::App* train = app.add_subcommand("train", "train an ordering model");
  add_common(train, f);
  add_model_flags(train, f);
  train->add_option("--data", f.data, "dataset directory");
  train->add_option("--epochs", f.epochs, "training epochs (max 5)");
  train->add_option("--batch", f.batch, "batch size");
  train->add_option("--lr", f.lr, "Adam learning rate");
  train->callback([&] { co::cmd_train(make_run(*train, f), std::cout); });

  const auto add_eval_flags = [&](CLI::App* sub) {
    add_common(sub, f);
    sub->add_option("--data", f.data, "dataset directory");
    sub->add_option("--checkpoint", f.checkpoint, "model.bock written by train");
    sub->add_option("--pairs", f.pairs, "eval pairs per video (-1 = all admissible)");
    sub->add_option("--min-sep", f.min_sep, "smallest clip separation evaluated");
    sub->add_option("--max-sep", f.max_sep, "largest clip separation evaluated");
  };

  CLI::App* eval = app.add_subcommand("eval", "score pairwise ordering on the test split");
  add_eval_flags(eval);
  eval->callback([&] { co::cmd_eval(make_run(*eval, f), std::cout); });

  CLI::App* curve = app.add_subcommand("curve", "accuracy vs clip separation on the test split");
  add_eval_flags(curve);
  curve->callback([&] { co::cmd_curve(make_run(*curve, f), std::cout); });

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", f.seed, "seed for the probe tensors");
  gradcheck->callback([&] { co::cmd_gradcheck(f.seed, std::cout); });

  CLI::App* inspect = app.add_subcommand("inspect", "describe a dataset, clip or checkpoint");
  inspect->add_option("path", inspect_path, "dataset dir, manifest.json, .vclp or .bock file")
      ->required();
  inspect->callback([&] { co::cmd_inspect(inspect_path, std::cout); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const co::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const co::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const co::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
