#include "cliporder/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <unordered_map>
#include <utility>

#include <nlohmann/json.hpp>

#include "cliporder/errors.hpp"
#include "cliporder/pairs.hpp"
#include "cliporder/rng.hpp"
#include "cliporder/tensor.hpp"

namespace cliporder {
namespace {

using nlohmann::json;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_ms(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1 || epochs > 5)
    throw ConfigError("epochs must be in [1, 5], got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(beta1 > 0.0) || beta1 >= 1.0 || !(beta2 > 0.0) || beta2 >= 1.0)
    throw ConfigError("adam betas must lie in (0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (repulsion < 0.0) throw ConfigError("repulsion must be >= 0");
  if (min_sep < 1 || max_sep < min_sep)
    throw ConfigError("need 1 <= min_sep <= max_sep");
  if (pairs_per_video < 1) throw ConfigError("pairs_per_video must be >= 1");
  if (val_pairs_per_video < 1) throw ConfigError("val_pairs_per_video must be >= 1");
  encoder.validate();
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["method"] = method_name(cfg.method);
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["repulsion"] = cfg.repulsion;
  j["seed"] = cfg.seed;
  j["min_sep"] = cfg.min_sep;
  j["max_sep"] = cfg.max_sep;
  j["pairs_per_video"] = cfg.pairs_per_video;
  j["val_pairs_per_video"] = cfg.val_pairs_per_video;
  j["encoder"] = json::parse(encoder_config_to_json(cfg.encoder));
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad train config json: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a json object");

  TrainConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "method") cfg.method = method_from_name(value.get<std::string>());
      else if (key == "epochs") cfg.epochs = value.get<int>();
      else if (key == "batch_size") cfg.batch_size = value.get<int>();
      else if (key == "lr") cfg.lr = value.get<double>();
      else if (key == "beta1") cfg.beta1 = value.get<double>();
      else if (key == "beta2") cfg.beta2 = value.get<double>();
      else if (key == "adam_eps") cfg.adam_eps = value.get<double>();
      else if (key == "repulsion") cfg.repulsion = value.get<double>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "min_sep") cfg.min_sep = value.get<int>();
      else if (key == "max_sep") cfg.max_sep = value.get<int>();
      else if (key == "pairs_per_video") cfg.pairs_per_video = value.get<int>();
      else if (key == "val_pairs_per_video") cfg.val_pairs_per_video = value.get<int>();
      else if (key == "encoder") cfg.encoder = encoder_config_from_json(value.dump());
      else throw ConfigError("unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad train config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_train_log_csv(const TrainLog& log, const std::string& path) {
  std::string text = "step,epoch,loss,lr,wall_ms\n";
  for (const auto& s : log.steps) {
    text += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + fmt_double(s.loss) +
            "," + fmt_double(s.lr) + "," + fmt_ms(s.wall_ms) + "\n";
  }
  write_text(path, text);
}

void save_epochs_csv(const TrainLog& log, const std::string& path) {
  std::string text = "epoch,train_loss,val_loss,val_accuracy\n";
  for (const auto& e : log.epochs) {
    text += std::to_string(e.epoch) + "," + fmt_double(e.train_loss) + "," +
            fmt_double(e.val_loss) + "," + fmt_double(e.val_accuracy) + "\n";
  }
  write_text(path, text);
}

void adam_step(ParamMap& params, const GradMap& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));

  for (auto& [name, param] : params) {
    auto& values = param.mutable_values();
    const std::size_t n = values.size();

    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    if (m.size() != n || v.size() != n)
      throw ContractError("optimizer state shape mismatch for parameter '" + name + "'");

    auto git = grads.find(name);
    const std::vector<double>* g = git == grads.end() ? nullptr : &git->second;
    if (g != nullptr) {
      if (g->size() != n)
        throw ContractError("gradient shape mismatch for parameter '" + name + "'");
      for (double x : *g)
        if (!std::isfinite(x))
          throw NumericError("non-finite gradient for parameter '" + name + "'");
    }

    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g != nullptr ? (*g)[i] : 0.0;
      m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
      v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

namespace {

// All clips of the listed videos, loaded once and indexed by clip position.
struct ClipStore {
  std::unordered_map<std::string, std::vector<Clip>> by_video;
  std::unordered_map<std::string, std::vector<WeakLabel>> labels;

  const std::vector<Clip>& clips(const std::string& video_id) const {
    auto it = by_video.find(video_id);
    if (it == by_video.end()) throw ContractError("video not loaded: " + video_id);
    return it->second;
  }
};

ClipStore load_videos(const DatasetIndex& data, const std::vector<std::string>& ids) {
  ClipStore store;
  for (const auto& id : ids) {
    const SequenceRef* seq = data.find(id);
    if (seq == nullptr) throw DataError("split references unknown video " + id);
    std::vector<Clip> clips(seq->clips.size());
    std::vector<WeakLabel> labels(seq->clips.size(), WeakLabel::kExcluded);
    for (const auto& ref : seq->clips) {
      if (ref.clip_index >= clips.size())
        throw DataError("clip index " + std::to_string(ref.clip_index) +
                        " out of range in video " + id);
      clips[ref.clip_index] = load_clip(data, ref);
      labels[ref.clip_index] = ref.label;
    }
    store.by_video.emplace(id, std::move(clips));
    store.labels.emplace(id, std::move(labels));
  }
  return store;
}

void check_split_isolation(const DatasetIndex& data, const DatasetSplit& split) {
  auto check_pair = [&](const std::vector<std::string>& a, const std::vector<std::string>& b,
                        const char* what) {
    std::set<std::string> va(a.begin(), a.end());
    std::set<std::string> pa;
    for (const auto& id : a) {
      const SequenceRef* seq = data.find(id);
      if (seq == nullptr) throw DataError("split references unknown video " + id);
      pa.insert(seq->participant);
    }
    for (const auto& id : b) {
      if (va.count(id))
        throw ContractError(std::string("video ") + id + " appears in both " + what);
      const SequenceRef* seq = data.find(id);
      if (seq == nullptr) throw DataError("split references unknown video " + id);
      if (pa.count(seq->participant))
        throw ContractError("participant " + seq->participant + " straddles " + what);
    }
  };
  check_pair(split.train, split.val, "train and val splits");
  check_pair(split.train, split.test, "train and test splits");
  check_pair(split.val, split.test, "val and test splits");
}

GradMap collect_grads(Tape& tape, const ParamMap& params) {
  GradMap grads;
  for (const auto& [name, param] : params) {
    const std::vector<double>* g = tape.find_grad(param);
    if (g != nullptr) grads.emplace(name, *g);
  }
  return grads;
}

void renormalize_prototype(ParamMap& params, const std::string& name) {
  auto& values = params.at(name).mutable_values();
  double norm = 0.0;
  for (double v : values) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm))
    throw NumericError("prototype '" + name + "' collapsed to zero norm");
  for (auto& v : values) v /= norm;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

ParamMap init_all_params(const TrainConfig& cfg) {
  Rng rng(child_seed(cfg.seed, "init"));
  ParamMap params = init_encoder_params(cfg.encoder, rng);
  ParamMap head = init_head_params(cfg.encoder, cfg.method, rng);
  params.insert(head.begin(), head.end());
  return params;
}

void write_epoch_checkpoint(const std::string& out_dir, int epoch, const ParamMap& params) {
  if (out_dir.empty()) return;
  std::filesystem::create_directories(out_dir);
  save_checkpoint(out_dir + "/epoch_" + std::to_string(epoch) + ".bock", params);
}

void write_logs(const std::string& out_dir, const TrainLog& log) {
  if (out_dir.empty()) return;
  std::filesystem::create_directories(out_dir);
  save_train_log_csv(log, out_dir + "/train_log.csv");
  save_epochs_csv(log, out_dir + "/epochs.csv");
}

}  // namespace

TrainResult train_embedding(const DatasetIndex& data, const DatasetSplit& split,
                            const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (cfg.method != Method::kEmbedding)
    throw ContractError("train_embedding called with method " + std::string(method_name(cfg.method)));
  check_split_isolation(data, split);

  ClipStore train_store = load_videos(data, split.train);
  ClipStore val_store = load_videos(data, split.val);

  struct Item {
    const Clip* clip;
    WeakLabel label;
  };
  auto collect_items = [](const ClipStore& store, const std::vector<std::string>& ids) {
    std::vector<Item> items;
    for (const auto& id : ids) {
      const auto& clips = store.clips(id);
      const auto& labels = store.labels.at(id);
      for (std::size_t i = 0; i < clips.size(); ++i)
        if (labels[i] != WeakLabel::kExcluded) items.push_back({&clips[i], labels[i]});
    }
    return items;
  };
  std::vector<Item> items = collect_items(train_store, split.train);
  std::vector<Item> val_items = collect_items(val_store, split.val);

  std::size_t n_sob = 0, n_nosob = 0;
  for (const auto& item : items) (item.label == WeakLabel::kSob ? n_sob : n_nosob) += 1;
  if (n_sob == 0) throw DataError("training split has no SOB-labeled clips");
  if (n_nosob == 0) throw DataError("training split has no NoSOB-labeled clips");

  ParamMap params = init_all_params(cfg);
  AdamState state;
  TrainLog log;
  log.config_json = train_config_to_json(cfg);
  std::int64_t global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(child_seed(cfg.seed, "shuffle", "", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);

      Tape tape;
      double loss_value;
      {
        Tape::Scope scope(tape);
        ModelContext ctx = make_context(cfg.encoder, params);
        Tensor total;
        for (std::size_t k = start; k < stop; ++k) {
          const Item& item = items[order[k]];
          if (item.label == WeakLabel::kExcluded)
            throw ContractError("excluded clip reached batch assembly");
          Tensor e = encode_clip(*item.clip, ctx);
          Tensor li = prototype_loss(e, item.label, params.at("proto.sob"),
                                     params.at("proto.nosob"), cfg.repulsion);
          total = total.defined() ? add(total, li) : li;
        }
        Tensor mean_loss = scale(total, 1.0 / static_cast<double>(stop - start));
        assert_finite(mean_loss, "training loss");
        loss_value = mean_loss.value();
        tape.backward(mean_loss);
      }
      GradMap grads = collect_grads(tape, params);
      adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
      renormalize_prototype(params, "proto.sob");
      renormalize_prototype(params, "proto.nosob");

      global_step += 1;
      log.steps.push_back({global_step, epoch, loss_value, cfg.lr, elapsed_ms(t0)});
      epoch_loss += loss_value;
      epoch_steps += 1;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = epoch_steps > 0 ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
    er.val_loss = std::numeric_limits<double>::quiet_NaN();
    er.val_accuracy = std::numeric_limits<double>::quiet_NaN();
    if (!val_items.empty()) {
      Tape::NoGrad guard;
      ModelContext ctx = make_context(cfg.encoder, params);
      // One embedding per val clip, reused for both the loss and the pairs.
      std::unordered_map<const Clip*, Tensor> cache;
      double vloss = 0.0;
      for (const auto& item : val_items) {
        Tensor e = encode_clip(*item.clip, ctx);
        cache.emplace(item.clip, e);
        vloss += prototype_loss(e, item.label, params.at("proto.sob"), params.at("proto.nosob"),
                                cfg.repulsion)
                     .value();
      }
      er.val_loss = vloss / static_cast<double>(val_items.size());

      std::size_t correct = 0, total_pairs = 0;
      for (const auto& id : split.val) {
        const auto& clips = val_store.clips(id);
        Rng pair_rng(child_seed(cfg.seed, "valpairs", id));
        auto pairs = make_pairs(static_cast<std::int64_t>(clips.size()), cfg.min_sep,
                                cfg.max_sep, pair_rng, cfg.val_pairs_per_video);
        for (const auto& pair : pairs) {
          const Clip* a = &clips[static_cast<std::size_t>(pair.first_index)];
          const Clip* b = &clips[static_cast<std::size_t>(pair.second_index)];
          auto ea = cache.find(a);
          if (ea == cache.end()) ea = cache.emplace(a, encode_clip(*a, ctx)).first;
          auto eb = cache.find(b);
          if (eb == cache.end()) eb = cache.emplace(b, encode_clip(*b, ctx)).first;
          PairPrediction pred = order_pair_embedding(ea->second, eb->second,
                                                     params.at("proto.sob"),
                                                     params.at("proto.nosob"));
          correct += pred.first_earlier == pair.first_earlier() ? 1 : 0;
          total_pairs += 1;
        }
      }
      if (total_pairs > 0)
        er.val_accuracy = static_cast<double>(correct) / static_cast<double>(total_pairs);
    }
    log.epochs.push_back(er);
    write_epoch_checkpoint(out_dir, epoch, params);
  }

  write_logs(out_dir, log);
  TrainResult result;
  result.model.config = cfg;
  result.model.params = std::move(params);
  result.log = std::move(log);
  return result;
}

TrainResult train_two_tower(const DatasetIndex& data, const DatasetSplit& split,
                            const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (cfg.method == Method::kEmbedding)
    throw ContractError("train_two_tower called with the embedding method");
  check_split_isolation(data, split);

  ClipStore train_store = load_videos(data, split.train);
  ClipStore val_store = load_videos(data, split.val);

  struct PairItem {
    const std::vector<Clip>* clips;
    PairSample pair;
  };
  auto collect_pairs = [&](const ClipStore& store, const std::vector<std::string>& ids,
                           const char* tag, int cap) {
    std::vector<PairItem> out;
    std::size_t first_earlier = 0;
    for (const auto& id : ids) {
      const auto& clips = store.clips(id);
      Rng pair_rng(child_seed(cfg.seed, tag, id));
      auto pairs = make_pairs(static_cast<std::int64_t>(clips.size()), cfg.min_sep, cfg.max_sep,
                              pair_rng, cap);
      for (const auto& pair : pairs) {
        if (pair.first_index >= static_cast<std::int64_t>(clips.size()) ||
            pair.second_index >= static_cast<std::int64_t>(clips.size()))
          throw DataError("pair index out of range in video " + id);
        first_earlier += pair.first_earlier() ? 1 : 0;
        out.push_back({&clips, pair});
      }
    }
    if (!out.empty() && first_earlier * 2 != out.size())
      throw DataError("pair set is unbalanced: " + std::to_string(first_earlier) + " of " +
                      std::to_string(out.size()) + " samples present the earlier clip first");
    return out;
  };
  std::vector<PairItem> items = collect_pairs(train_store, split.train, "pairs",
                                              cfg.pairs_per_video);
  std::vector<PairItem> val_items = collect_pairs(val_store, split.val, "valpairs",
                                                  cfg.val_pairs_per_video);
  if (items.empty()) throw DataError("no training pairs (sequences shorter than min_sep + 1?)");

  ParamMap params = init_all_params(cfg);
  AdamState state;
  TrainLog log;
  log.config_json = train_config_to_json(cfg);
  std::int64_t global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(child_seed(cfg.seed, "shuffle", "", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);

      Tape tape;
      double loss_value;
      {
        Tape::Scope scope(tape);
        ModelContext ctx = make_context(cfg.encoder, params);
        Tensor total;
        for (std::size_t k = start; k < stop; ++k) {
          const PairItem& item = items[order[k]];
          const Clip& first = (*item.clips)[static_cast<std::size_t>(item.pair.first_index)];
          const Clip& second = (*item.clips)[static_cast<std::size_t>(item.pair.second_index)];
          Tensor logit = two_tower_logit(first, second, cfg.method, ctx);
          Tensor li = bce_with_logit(logit, item.pair.first_earlier() ? 1.0 : 0.0);
          total = total.defined() ? add(total, li) : li;
        }
        Tensor mean_loss = scale(total, 1.0 / static_cast<double>(stop - start));
        assert_finite(mean_loss, "training loss");
        loss_value = mean_loss.value();
        tape.backward(mean_loss);
      }
      GradMap grads = collect_grads(tape, params);
      adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

      global_step += 1;
      log.steps.push_back({global_step, epoch, loss_value, cfg.lr, elapsed_ms(t0)});
      epoch_loss += loss_value;
      epoch_steps += 1;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = epoch_steps > 0 ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
    er.val_loss = std::numeric_limits<double>::quiet_NaN();
    er.val_accuracy = std::numeric_limits<double>::quiet_NaN();
    if (!val_items.empty()) {
      Tape::NoGrad guard;
      ModelContext ctx = make_context(cfg.encoder, params);
      double vloss = 0.0;
      std::size_t correct = 0;
      for (const auto& item : val_items) {
        const Clip& first = (*item.clips)[static_cast<std::size_t>(item.pair.first_index)];
        const Clip& second = (*item.clips)[static_cast<std::size_t>(item.pair.second_index)];
        const double logit = two_tower_logit(first, second, cfg.method, ctx).value();
        vloss += bce_with_logit(Tensor::scalar(logit), item.pair.first_earlier() ? 1.0 : 0.0)
                     .value();
        correct += (logit >= 0.0) == item.pair.first_earlier() ? 1 : 0;
      }
      er.val_loss = vloss / static_cast<double>(val_items.size());
      er.val_accuracy = static_cast<double>(correct) / static_cast<double>(val_items.size());
    }
    log.epochs.push_back(er);
    write_epoch_checkpoint(out_dir, epoch, params);
  }

  write_logs(out_dir, log);
  TrainResult result;
  result.model.config = cfg;
  result.model.params = std::move(params);
  result.log = std::move(log);
  return result;
}

TrainResult train_model(const DatasetIndex& data, const DatasetSplit& split,
                        const TrainConfig& cfg, const std::string& out_dir) {
  return cfg.method == Method::kEmbedding ? train_embedding(data, split, cfg, out_dir)
                                          : train_two_tower(data, split, cfg, out_dir);
}

}  // namespace cliporder
