#include "scc/harness.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace scc {

// ---------------------------------------------------------------------------
// Config

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"preset", c.preset},
                     {"controller", to_string(c.controller)},
                     {"use_ar_features", c.use_ar_features},
                     {"train_mode", to_string(c.train_mode)},
                     {"test_mode", to_string(c.test_mode)},
                     {"mu", c.mu},
                     {"sigma2", c.sigma2},
                     {"lambda", c.lambda},
                     {"seeds", c.seeds},
                     {"epochs", c.epochs},
                     {"validation_period", c.validation_period},
                     {"beam_width", c.beam_width},
                     {"lr", c.lr},
                     {"lr_decay", c.lr_decay},
                     {"clip_norm", c.clip_norm},
                     {"ar_lr", c.ar_lr},
                     {"ar_epochs", c.ar_epochs},
                     {"controller_lr", c.controller_lr},
                     {"p_random", c.p_random},
                     {"dataset", c.dataset},
                     {"data", c.data},
                     {"ar_checkpoint", c.ar_checkpoint},
                     {"out_dir", c.out_dir},
                     {"master_seed", c.master_seed}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  const nlohmann::json defaults = ExperimentConfig{};
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("config: unknown field '" + key + "'");
  }
  const ExperimentConfig d;
  try {
    c.preset = j.value("preset", d.preset);
    c.controller = j.contains("controller") ? controller_kind_from_string(j.at("controller").get<std::string>())
                                            : d.controller;
    c.use_ar_features = j.value("use_ar_features", d.use_ar_features);
    c.train_mode = j.contains("train_mode") ? exec_mode_from_string(j.at("train_mode").get<std::string>())
                                            : d.train_mode;
    c.test_mode =
        j.contains("test_mode") ? exec_mode_from_string(j.at("test_mode").get<std::string>()) : d.test_mode;
    c.mu = j.value("mu", d.mu);
    c.sigma2 = j.value("sigma2", d.sigma2);
    c.lambda = j.value("lambda", d.lambda);
    c.seeds = j.value("seeds", d.seeds);
    c.epochs = j.value("epochs", d.epochs);
    c.validation_period = j.value("validation_period", d.validation_period);
    c.beam_width = j.value("beam_width", d.beam_width);
    c.lr = j.value("lr", d.lr);
    c.lr_decay = j.value("lr_decay", d.lr_decay);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.ar_lr = j.value("ar_lr", d.ar_lr);
    c.ar_epochs = j.value("ar_epochs", d.ar_epochs);
    c.controller_lr = j.value("controller_lr", d.controller_lr);
    c.p_random = j.value("p_random", d.p_random);
    c.dataset = j.value("dataset", d.dataset);
    c.data = j.contains("data") ? j.at("data").get<GenParams>() : d.data;
    c.ar_checkpoint = j.value("ar_checkpoint", d.ar_checkpoint);
    c.out_dir = j.value("out_dir", d.out_dir);
    c.master_seed = j.value("master_seed", d.master_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw ConfigError("config field '" + field + "': " + msg);
  };
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), c.preset) == names.end()) fail("preset", "unknown preset " + c.preset);
  if (c.controller != ControllerKind::surprisal && c.controller != ControllerKind::random &&
      c.controller != ControllerKind::learned) {
    fail("controller", "must be surprisal, random or learned");
  }
  if (!(c.mu > 0.0 && c.mu < 1.0)) fail("mu", "must be in (0, 1)");
  if (!(c.sigma2 >= 0.0)) fail("sigma2", "must be non-negative");
  if (!(c.lambda >= 0.0)) fail("lambda", "must be non-negative");
  if (c.seeds < 1) fail("seeds", "must be at least 1");
  if (c.epochs < 0) fail("epochs", "must be non-negative");
  if (c.validation_period < 1) fail("validation_period", "must be at least 1");
  if (c.beam_width < 1) fail("beam_width", "must be at least 1");
  if (!(c.lr > 0.0)) fail("lr", "must be positive");
  if (!(c.lr_decay > 0.0 && c.lr_decay <= 1.0)) fail("lr_decay", "must be in (0, 1]");
  if (!(c.clip_norm >= 0.0)) fail("clip_norm", "must be non-negative");
  if (!(c.ar_lr > 0.0)) fail("ar_lr", "must be positive");
  if (c.ar_epochs < 0) fail("ar_epochs", "must be non-negative");
  if (!(c.controller_lr >= 0.0)) fail("controller_lr", "must be non-negative");
  if (!(c.p_random >= 0.0 && c.p_random <= 1.0)) fail("p_random", "must be in [0, 1]");
  try {
    validate(c.data);
  } catch (const ParameterError& e) {
    fail("data", e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[8] = {'S', 'C', 'C', 'C', 'K', 'P', 'T', '1'};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["kind"] = ckpt.kind;
  header["config"] = ckpt.config;
  header["controller"] = to_string(ckpt.controller);
  header["surprisal"] = {{"w", ckpt.surprisal.w}, {"b", ckpt.surprisal.b}};
  header["p_random"] = ckpt.p_random;
  header["epoch"] = ckpt.epoch;
  header["validation_per"] = ckpt.validation_per ? nlohmann::json(*ckpt.validation_per) : nlohmann::json(nullptr);
  nlohmann::json arrays = nlohmann::json::array();
  for (const NamedArray& a : ckpt.arrays) {
    arrays.push_back({{"name", a.name}, {"rows", a.value.rows()}, {"cols", a.value.cols()}});
  }
  header["arrays"] = std::move(arrays);
  const std::string text = header.dump();

  io::ByteWriter out;
  out.put_bytes(kCkptMagic, sizeof kCkptMagic);
  out.put<std::uint32_t>(kCheckpointFormatVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  out.put_string(text);
  for (const NamedArray& a : ckpt.arrays) {
    for (Index r = 0; r < a.value.rows(); ++r) {
      for (Index c = 0; c < a.value.cols(); ++c) out.put<double>(a.value(r, c));
    }
  }
  return std::move(out.bytes());
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader in(bytes.data(), bytes.size(), "checkpoint");
  if (in.get_string(sizeof kCkptMagic, "magic") != std::string(kCkptMagic, sizeof kCkptMagic)) in.fail("bad magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointFormatVersion) {
    in.fail("format version " + std::to_string(version) + " is not supported (expected " +
            std::to_string(kCheckpointFormatVersion) + ")");
  }
  const auto len = in.get<std::uint32_t>("header length");
  const std::string text = in.get_string(len, "header");
  Checkpoint ckpt;
  try {
    const nlohmann::json h = nlohmann::json::parse(text);
    ckpt.kind = h.at("kind").get<std::string>();
    ckpt.config = h.at("config");
    ckpt.controller = controller_kind_from_string(h.at("controller").get<std::string>());
    ckpt.surprisal.w = h.at("surprisal").at("w").get<double>();
    ckpt.surprisal.b = h.at("surprisal").at("b").get<double>();
    ckpt.p_random = h.at("p_random").get<double>();
    ckpt.epoch = h.at("epoch").get<int>();
    if (!h.at("validation_per").is_null()) ckpt.validation_per = h.at("validation_per").get<double>();
    for (const auto& a : h.at("arrays")) {
      NamedArray na;
      na.name = a.at("name").get<std::string>();
      na.value.resize(a.at("rows").get<Index>(), a.at("cols").get<Index>());
      ckpt.arrays.push_back(std::move(na));
    }
  } catch (const nlohmann::json::exception& e) {
    in.fail(std::string("bad header: ") + e.what());
  } catch (const ParameterError& e) {
    in.fail(std::string("bad header: ") + e.what());
  }
  for (NamedArray& a : ckpt.arrays) {
    if (static_cast<std::size_t>(a.value.size()) * sizeof(double) > in.remaining()) {
      in.fail("truncated data for array '" + a.name + "'");
    }
    for (Index r = 0; r < a.value.rows(); ++r) {
      for (Index c = 0; c < a.value.cols(); ++c) a.value(r, c) = in.get<double>("array data");
    }
  }
  if (in.remaining() != 0) in.fail("trailing bytes after the last array");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(io::read_file(path)); }

Checkpoint make_checkpoint(const ConditionalModel& model, const ExperimentConfig& config, int epoch,
                           std::optional<double> validation_per) {
  Checkpoint c;
  c.kind = "conditional";
  c.config = config;
  c.controller = model.controller();
  c.surprisal = model.surprisal_controller();
  c.p_random = model.random_p();
  c.epoch = epoch;
  c.validation_per = validation_per;
  for (const Tensor& t : model.all_parameters()) c.arrays.push_back({t.name(), t.value()});
  return c;
}

namespace {

void copy_arrays(const std::vector<NamedArray>& arrays, std::vector<Tensor> params, const std::string& what) {
  std::map<std::string, const NamedArray*> by_name;
  for (const NamedArray& a : arrays) by_name[a.name] = &a;
  for (Tensor& p : params) {
    const auto it = by_name.find(p.name());
    if (it == by_name.end()) throw DimensionError(what + ": checkpoint has no parameter '" + p.name() + "'");
    const Matrix& v = it->second->value;
    if (v.rows() != p.rows() || v.cols() != p.cols()) {
      throw DimensionError(what + ": parameter '" + p.name() + "' has shape " + shape_string(p) +
                           " but the checkpoint stores [" + std::to_string(v.rows()) + " x " +
                           std::to_string(v.cols()) + "]");
    }
  }
  if (arrays.size() != params.size()) {
    std::set<std::string> known;
    for (const Tensor& p : params) known.insert(p.name());
    for (const NamedArray& a : arrays) {
      if (!known.count(a.name)) throw DimensionError(what + ": unexpected parameter '" + a.name + "' in checkpoint");
    }
    throw DimensionError(what + ": duplicate parameter names in checkpoint");
  }
  for (Tensor& p : params) p.value_mut() = by_name.at(p.name())->value;
}

}  // namespace

void apply_checkpoint(const Checkpoint& ckpt, ConditionalModel& model) {
  if (ckpt.kind != "conditional") throw ConfigError("checkpoint holds a '" + ckpt.kind + "' model");
  const bool has_gate = std::any_of(ckpt.arrays.begin(), ckpt.arrays.end(),
                                    [](const NamedArray& a) { return a.name.rfind("gate.", 0) == 0; });
  const ControllerKind before = model.controller();
  if (has_gate && !model.learned_gate()) {
    Rng scratch(0);
    model.use_learned(scratch);
    model.set_controller_kind(before);
  }
  copy_arrays(ckpt.arrays, model.all_parameters(), "load checkpoint");
  model.surprisal_controller() = ckpt.surprisal;
  model.use_random(ckpt.p_random);
  if (ckpt.controller != ControllerKind::random) model.set_controller_kind(ckpt.controller);
}

Checkpoint make_ar_checkpoint(const ARModel& ar, const ExperimentConfig& config) {
  Checkpoint c;
  c.kind = "ar";
  c.config = config;
  c.controller = ControllerKind::fixed_small;
  for (const Tensor& t : ar.parameters()) c.arrays.push_back({t.name(), t.value()});
  return c;
}

void apply_ar_checkpoint(const Checkpoint& ckpt, ARModel& ar) {
  if (ckpt.kind != "ar") throw ConfigError("checkpoint holds a '" + ckpt.kind + "' model, expected an AR model");
  copy_arrays(ckpt.arrays, ar.parameters(), "load AR checkpoint");
}

// ---------------------------------------------------------------------------
// Workspace and runs

std::string TrainSpec::key() const {
  std::string k = "train/" + to_string(controller) + "/ar" + (use_ar_features ? "1" : "0") + "/" + to_string(mode);
  if (controller == ControllerKind::learned) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "/lambda%.17g", lambda);
    k += buf;
  }
  return k;
}

std::string EvalSpec::key() const {
  std::string k = "eval/" + to_string(controller) + "/" + to_string(mode);
  if (controller == ControllerKind::surprisal && (bias || bias_offset != 0.0)) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "/bias%.17g/offset%.17g", bias ? *bias : 0.0, bias_offset);
    k += buf;
  }
  return k;
}

Dataset load_or_generate(const ExperimentConfig& config) {
  if (!config.dataset.empty()) {
    if (!std::filesystem::exists(config.dataset)) {
      throw ConfigError("dataset file '" + config.dataset + "' does not exist");
    }
    return load_dataset(config.dataset);
  }
  return generate_dataset(config.data);
}

std::shared_ptr<ARModel> load_or_train_ar(const ExperimentConfig& config, const Dataset& data,
                                          std::vector<double>* history) {
  const ArchitectureSpec spec = preset(config.preset);
  Rng rng = make_rng(config.master_seed, {tag("ar")});
  auto ar = std::make_shared<ARModel>(spec, rng);
  if (!config.ar_checkpoint.empty()) {
    if (!std::filesystem::exists(config.ar_checkpoint)) {
      throw ConfigError("AR checkpoint '" + config.ar_checkpoint + "' does not exist");
    }
    apply_ar_checkpoint(load_checkpoint(config.ar_checkpoint), *ar);
  } else {
    std::vector<Matrix> corpus;
    corpus.reserve(data.unlabeled.size());
    for (const SequenceExample& e : data.unlabeled) corpus.push_back(e.observations);
    const ARTrainOptions opts{config.ar_epochs, config.ar_lr, config.clip_norm};
    std::vector<double> h = train_ar(*ar, corpus, opts, rng);
    if (history) *history = std::move(h);
  }
  ar->freeze();
  return ar;
}

Workspace::Workspace(ExperimentConfig config) : config_(std::move(config)) {
  validate(config_);
  data_ = load_or_generate(config_);
  const ArchitectureSpec spec = preset(config_.preset);
  if (spec.obs_dim != data_.params.obs_dim) {
    throw ConfigError("preset '" + config_.preset + "' reads " + std::to_string(spec.obs_dim) +
                      "-dimensional observations but the dataset has " + std::to_string(data_.params.obs_dim));
  }
  if (spec.label_count != data_.params.alphabet + 1) {
    throw ConfigError("preset '" + config_.preset + "' emits " + std::to_string(spec.label_count) +
                      " outputs but the dataset alphabet needs " + std::to_string(data_.params.alphabet + 1));
  }
  ar_ = load_or_train_ar(config_, data_, &ar_history_);

  const std::pair<const char*, const std::vector<SequenceExample>*> splits[] = {
      {"train", &data_.train}, {"validation", &data_.validation}, {"test", &data_.test}};
  for (const auto& [name, examples] : splits) {
    LabeledSet with_ar, raw;
    for (const SequenceExample& e : *examples) {
      auto [features, trace] = ar_->features_and_surprisal(e.observations);
      if (std::string(name) == "train") train_surprisal_.push_back(trace);
      with_ar.inputs.push_back({std::move(features), trace});
      raw.inputs.push_back({e.observations, std::move(trace)});
      with_ar.labels.push_back(e.labels);
      raw.labels.push_back(e.labels);
    }
    splits_[std::string(name) + "/ar1"] = std::move(with_ar);
    splits_[std::string(name) + "/ar0"] = std::move(raw);
  }
}

const LabeledSet& Workspace::split(const std::string& name, bool ar_features) const {
  const auto it = splits_.find(name + (ar_features ? "/ar1" : "/ar0"));
  if (it == splits_.end()) throw ContractError("workspace: no split named '" + name + "'");
  return it->second;
}

ExperimentConfig Workspace::with_spec(const TrainSpec& spec) const {
  ExperimentConfig c = config_;
  c.controller = spec.controller;
  c.use_ar_features = spec.use_ar_features;
  c.train_mode = spec.mode;
  c.lambda = spec.lambda;
  return c;
}

std::size_t Workspace::trainings() const {
  std::lock_guard lock(mutex_);
  return trainings_;
}

std::shared_ptr<const TrainedRun> Workspace::trained(const TrainSpec& spec, int seed) {
  const auto key = std::make_pair(spec.key(), seed);
  {
    std::lock_guard lock(mutex_);
    const auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
  }
  auto run = train_new(spec, seed);
  std::lock_guard lock(mutex_);
  const auto [it, inserted] = cache_.emplace(key, run);
  if (inserted) ++trainings_;
  return it->second;
}

std::shared_ptr<const TrainedRun> Workspace::train_new(const TrainSpec& spec, int seed) const {
  const ExperimentConfig cfg = with_spec(spec);
  const std::uint64_t master = config_.master_seed;
  const std::uint64_t key_tag = tag(spec.key().c_str());
  const auto seed_key = static_cast<std::uint64_t>(seed);

  auto run = std::make_shared<TrainedRun>();
  run->spec = spec;
  run->seed = seed;

  Rng init_rng = make_rng(master, {tag("run"), key_tag, seed_key, tag("init")});
  run->model = std::make_shared<ConditionalModel>(preset(config_.preset), ar_, spec.use_ar_features, init_rng);
  ConditionalModel& model = *run->model;

  // The calibrated controller depends only on the seed, so every run of a
  // seed shares it whatever controller it trains with.
  Rng cal_rng = make_rng(master, {tag("calibrate"), seed_key});
  run->calibration = calibrate(train_surprisal_, {config_.mu, config_.sigma2}, {config_.controller_lr}, cal_rng);
  model.surprisal_controller() = run->calibration.controller;
  model.use_random(config_.p_random);
  switch (spec.controller) {
    case ControllerKind::surprisal: model.use_surprisal(run->calibration.controller); break;
    case ControllerKind::random: break;
    case ControllerKind::learned: model.use_learned(init_rng); break;
    case ControllerKind::fixed_small: model.use_fixed(Branch::small); break;
    case ControllerKind::fixed_big: model.use_fixed(Branch::big); break;
  }

  std::optional<std::vector<Matrix>> best;
  std::optional<double> best_per;
  TrainOptions opts;
  opts.epochs = config_.epochs;
  opts.lr = config_.lr;
  opts.lr_decay = config_.lr_decay;
  opts.clip_norm = config_.clip_norm;
  opts.mode = spec.mode;
  opts.lambda = spec.lambda;
  opts.validation_period = config_.validation_period;
  opts.beam_width = config_.beam_width;
  opts.on_validation = [&](int epoch, double per) {
    if (!best_per || per < *best_per) {
      best_per = per;
      best = model.snapshot();
      run->best_epoch = epoch;
    }
  };
  Rng train_rng = make_rng(master, {tag("run"), key_tag, seed_key, tag("train")});
  run->history = train(model, split("train", spec.use_ar_features), &split("validation", spec.use_ar_features), opts,
                       train_rng);
  if (best) {
    model.restore(*best);
    run->best_validation_per = *best_per;
  } else {
    run->best_epoch = config_.epochs;
  }
  run->checkpoint = make_checkpoint(model, cfg, run->best_epoch, best_per);
  return run;
}

RunMetrics Workspace::evaluate_run(const TrainedRun& run, const EvalSpec& eval, bool with_train_loss) const {
  ConditionalModel model = *run.model;  // controller state is copied, parameters are shared
  switch (eval.controller) {
    case ControllerKind::surprisal: {
      SurprisalController c = run.calibration.controller;
      if (eval.bias) c.b = *eval.bias;
      c.b += eval.bias_offset;
      model.use_surprisal(c);
      break;
    }
    case ControllerKind::random: model.use_random(config_.p_random); break;
    case ControllerKind::learned: model.set_controller_kind(ControllerKind::learned); break;
    case ControllerKind::fixed_small: model.use_fixed(Branch::small); break;
    case ControllerKind::fixed_big: model.use_fixed(Branch::big); break;
  }
  const std::uint64_t run_tag = tag(run.spec.key().c_str());
  const std::uint64_t eval_tag = tag(eval.key().c_str());
  const auto seed_key = static_cast<std::uint64_t>(run.seed);
  RunMetrics m;
  Rng test_rng = make_rng(config_.master_seed, {tag("eval"), run_tag, seed_key, eval_tag, tag("test")});
  const EvalResult test = evaluate(model, split("test", run.spec.use_ar_features), eval.mode, config_.beam_width,
                                   test_rng);
  m.test_per = test.per;
  m.test_loss = test.loss;
  m.avg_flops = test.avg_flops;
  m.mean_p_big = test.mean_p_big;
  if (with_train_loss) {
    Rng train_rng = make_rng(config_.master_seed, {tag("eval"), run_tag, seed_key, eval_tag, tag("train")});
    m.train_loss = evaluate(model, split("train", run.spec.use_ar_features), eval.mode, 0, train_rng).loss;
  }
  return m;
}

SingleResult run_single(Workspace& ws, const ExperimentConfig& config, int seed) {
  const TrainSpec spec{config.controller, config.use_ar_features, config.train_mode, config.lambda};
  SingleResult r;
  r.run = ws.trained(spec, seed);
  r.metrics = ws.evaluate_run(*r.run, EvalSpec{config.controller, config.test_mode});
  return r;
}

// ---------------------------------------------------------------------------
// Drivers

void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : threads) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

struct CellPlan {
  std::string name;
  TrainSpec train;
  EvalSpec eval;
  std::optional<double> x;
  bool with_train_loss = false;
};

std::string controller_label(ControllerKind k) {
  switch (k) {
    case ControllerKind::fixed_small: return "small_only";
    case ControllerKind::fixed_big: return "big_only";
    default: return to_string(k);
  }
}

/// Trains every distinct (spec, seed) pair, evaluates every cell for every
/// seed, and aggregates. Results land in fixed slots, so scheduling never
/// changes the output.
RunReport execute(Workspace& ws, const std::string& title, const std::vector<CellPlan>& plan,
                  const DriverOptions& options, const std::function<void(std::vector<CellPlan>&)>& late = {}) {
  const int seeds = ws.config().seeds;
  std::vector<std::pair<TrainSpec, int>> trainings;
  std::set<std::pair<std::string, int>> seen;
  auto collect = [&](const std::vector<CellPlan>& cells) {
    for (const CellPlan& c : cells) {
      for (int s = 0; s < seeds; ++s) {
        if (seen.emplace(c.train.key(), s).second) trainings.emplace_back(c.train, s);
      }
    }
  };
  collect(plan);
  std::vector<CellPlan> cells = plan;
  const std::size_t before = trainings.size();
  parallel_for(trainings.size(), options.jobs, [&](std::size_t i) { ws.trained(trainings[i].first, trainings[i].second); });
  if (late) {
    late(cells);
    collect(cells);
    parallel_for(trainings.size() - before, options.jobs, [&](std::size_t i) {
      ws.trained(trainings[before + i].first, trainings[before + i].second);
    });
  }

  std::vector<RunMetrics> results(cells.size() * static_cast<std::size_t>(seeds));
  parallel_for(results.size(), options.jobs, [&](std::size_t i) {
    const CellPlan& c = cells[i / static_cast<std::size_t>(seeds)];
    const int s = static_cast<int>(i % static_cast<std::size_t>(seeds));
    results[i] = ws.evaluate_run(*ws.trained(c.train, s), c.eval, c.with_train_loss);
  });

  RunReport report;
  report.title = title;
  report.trainings = trainings.size();
  report.evaluations = results.size();
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const CellPlan& c = cells[ci];
    ReportCell cell;
    cell.name = c.name;
    cell.use_ar_features = c.train.use_ar_features;
    cell.train_controller = controller_label(c.train.controller);
    cell.test_controller = controller_label(c.eval.controller);
    cell.train_mode = to_string(c.train.mode);
    cell.test_mode = to_string(c.eval.mode);
    cell.x = c.x;
    std::vector<double> pers;
    double flops = 0.0, tr = 0.0, te = 0.0, pb = 0.0;
    for (int s = 0; s < seeds; ++s) {
      const RunMetrics& m = results[ci * static_cast<std::size_t>(seeds) + static_cast<std::size_t>(s)];
      pers.push_back(m.test_per);
      flops += m.avg_flops;
      tr += m.train_loss;
      te += m.test_loss;
      pb += m.mean_p_big;
      cell.seeds.push_back(s);
    }
    const double n = static_cast<double>(seeds);
    cell.per_mean = std::accumulate(pers.begin(), pers.end(), 0.0) / n;
    if (seeds >= 2) {
      double ss = 0.0;
      for (double p : pers) ss += (p - cell.per_mean) * (p - cell.per_mean);
      cell.per_std = std::sqrt(ss / (n - 1.0));
    }
    cell.flops = flops / n;
    if (c.with_train_loss) cell.train_loss = tr / n;
    cell.test_loss = te / n;
    cell.mean_p_big = pb / n;
    nlohmann::json prov;
    prov["config"] = ws.with_spec(c.train);
    prov["test_controller"] = to_string(c.eval.controller);
    prov["test_mode"] = to_string(c.eval.mode);
    if (c.eval.bias) prov["bias"] = *c.eval.bias;
    if (c.eval.bias_offset != 0.0) prov["bias_offset"] = c.eval.bias_offset;
    cell.config = prov.dump();
    report.cells.push_back(std::move(cell));
  }
  return report;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

const ReportCell& RunReport::cell(const std::string& name) const {
  for (const ReportCell& c : cells) {
    if (c.name == name) return c;
  }
  throw ContractError("report has no cell named '" + name + "'");
}

std::vector<bool> pareto_flags(std::span<const std::pair<double, double>> pts) {
  std::vector<bool> out(pts.size(), true);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (i == j) continue;
      const bool le = pts[j].first <= pts[i].first && pts[j].second <= pts[i].second;
      const bool lt = pts[j].first < pts[i].first || pts[j].second < pts[i].second;
      if (le && lt) {
        out[i] = false;
        break;
      }
    }
  }
  return out;
}

void mark_pareto(std::vector<ReportCell>& cells) {
  std::vector<std::pair<double, double>> pts;
  for (const ReportCell& c : cells) pts.emplace_back(c.per_mean, c.flops);
  const std::vector<bool> flags = pareto_flags(pts);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i].pareto = flags[i];
}

RunReport run_ablation(Workspace& ws, const DriverOptions& options) {
  const ExperimentConfig& cfg = ws.config();
  std::vector<CellPlan> plan;
  for (bool ar : {false, true}) {
    for (bool s_train : {false, true}) {
      for (bool s_test : {false, true}) {
        CellPlan c;
        c.name = std::string("ar") + (ar ? "1" : "0") + "_train_" + (s_train ? "surprisal" : "random") + "_test_" +
                 (s_test ? "surprisal" : "random");
        c.train = {s_train ? ControllerKind::surprisal : ControllerKind::random, ar, cfg.train_mode, cfg.lambda};
        c.eval = {s_test ? ControllerKind::surprisal : ControllerKind::random, cfg.test_mode};
        plan.push_back(c);
      }
    }
  }
  for (ControllerKind k : {ControllerKind::fixed_small, ControllerKind::fixed_big}) {
    CellPlan c;
    c.name = controller_label(k);
    c.train = {k, true, cfg.train_mode, cfg.lambda};
    c.eval = {k, cfg.test_mode};
    plan.push_back(c);
  }
  RunReport r = execute(ws, "ablation", plan, options);
  mark_pareto(r.cells);
  return r;
}

RunReport sweep_bias(Workspace& ws, int steps, const DriverOptions& options) {
  if (steps < 1) throw ParameterError("sweep_bias: steps must be at least 1");
  const ExperimentConfig& cfg = ws.config();
  const TrainSpec surprisal_run{ControllerKind::surprisal, true, cfg.train_mode, cfg.lambda};
  std::vector<CellPlan> plan;
  CellPlan big;
  big.name = "big_only";
  big.train = {ControllerKind::fixed_big, true, cfg.train_mode, cfg.lambda};
  big.eval = {ControllerKind::fixed_big, cfg.test_mode};
  plan.push_back(big);
  CellPlan anchor;  // forces the surprisal runs to exist before the grid is built
  anchor.name = "calibrated";
  anchor.train = surprisal_run;
  anchor.eval = {ControllerKind::surprisal, cfg.test_mode};
  plan.push_back(anchor);

  auto late = [&](std::vector<CellPlan>& cells) {
    double mean_b = 0.0;
    for (int s = 0; s < cfg.seeds; ++s) mean_b += ws.trained(surprisal_run, s)->calibration.controller.b;
    mean_b /= static_cast<double>(cfg.seeds);
    for (int k = 0; k < steps; ++k) {
      const double offset = steps == 1 ? 0.0 : 4.0 * static_cast<double>(k) / static_cast<double>(steps - 1);
      CellPlan c;
      c.name = "bias" + fmt("%+.4f", offset);
      c.train = surprisal_run;
      c.eval = {ControllerKind::surprisal, cfg.test_mode, offset, mean_b};
      c.x = offset;
      cells.push_back(c);
    }
    CellPlan sat;
    sat.name = "saturation";
    sat.train = surprisal_run;
    sat.eval = {ControllerKind::surprisal, cfg.test_mode, 100.0, mean_b};
    cells.push_back(sat);
  };
  return execute(ws, "bias_sweep", plan, options, late);
}

std::vector<double> lambda_grid() { return {0.1, 0.01, 0.001, 0.0001, 0.00001}; }

RunReport sweep_lambda(Workspace& ws, bool include_zero, const DriverOptions& options) {
  const ExperimentConfig& cfg = ws.config();
  std::vector<double> grid = lambda_grid();
  if (include_zero) grid.push_back(0.0);
  std::vector<CellPlan> plan;
  for (double lambda : grid) {
    CellPlan c;
    c.name = "lambda" + fmt("%g", lambda);
    c.train = {ControllerKind::learned, true, cfg.train_mode, lambda};
    c.eval = {ControllerKind::learned, cfg.test_mode};
    c.x = lambda;
    plan.push_back(c);
  }
  // Same runs and evaluation keys as the matching ablation cells.
  CellPlan random;
  random.name = "ar1_train_random_test_random";
  random.train = {ControllerKind::random, true, cfg.train_mode, cfg.lambda};
  random.eval = {ControllerKind::random, cfg.test_mode};
  plan.push_back(random);
  CellPlan surprisal;
  surprisal.name = "ar1_train_surprisal_test_surprisal";
  surprisal.train = {ControllerKind::surprisal, true, cfg.train_mode, cfg.lambda};
  surprisal.eval = {ControllerKind::surprisal, cfg.test_mode};
  plan.push_back(surprisal);
  return execute(ws, "lambda_sweep", plan, options);
}

RunReport compare_determinism(Workspace& ws, const DriverOptions& options) {
  const ExperimentConfig& cfg = ws.config();
  std::vector<CellPlan> plan;
  for (ExecMode train_mode : {ExecMode::stochastic, ExecMode::deterministic}) {
    for (ExecMode test_mode : {ExecMode::stochastic, ExecMode::deterministic}) {
      CellPlan c;
      c.name = "train_" + to_string(train_mode) + "_test_" + to_string(test_mode);
      c.train = {ControllerKind::surprisal, cfg.use_ar_features, train_mode, cfg.lambda};
      c.eval = {ControllerKind::surprisal, test_mode};
      c.with_train_loss = true;
      plan.push_back(c);
    }
  }
  return execute(ws, "determinism", plan, options);
}

// ---------------------------------------------------------------------------
// Report files

namespace {

const char* kCsvHeader =
    "name,use_ar_features,train_controller,test_controller,train_mode,test_mode,x,per_mean,per_std,flops,"
    "train_loss,test_loss,mean_p_big,pareto,seeds,config";

std::string num(double v) { return fmt("%.17g", v); }

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) throw ParseError("report CSV line " + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

double parse_num(const std::string& s, std::size_t line_no, const char* field) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("report CSV line " + std::to_string(line_no) + ": bad number '" + s + "' in field " + field);
  }
}

}  // namespace

std::string report_csv(const RunReport& r) {
  std::ostringstream out;
  out << "# title: " << r.title << "\n";
  out << "# trainings: " << r.trainings << "\n";
  out << "# evaluations: " << r.evaluations << "\n";
  out << kCsvHeader << "\n";
  for (const ReportCell& c : r.cells) {
    std::string seeds;
    for (std::size_t i = 0; i < c.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(c.seeds[i]);
    out << csv_quote(c.name) << ',' << (c.use_ar_features ? 1 : 0) << ',' << c.train_controller << ','
        << c.test_controller << ',' << c.train_mode << ',' << c.test_mode << ',' << (c.x ? num(*c.x) : "") << ','
        << num(c.per_mean) << ',' << (c.per_std ? num(*c.per_std) : "") << ',' << num(c.flops) << ','
        << (c.train_loss ? num(*c.train_loss) : "") << ',' << num(c.test_loss) << ',' << num(c.mean_p_big) << ',' << (c.pareto ? 1 : 0)
        << ',' << seeds << ',' << csv_quote(c.config) << "\n";
  }
  return out.str();
}

RunReport parse_report_csv(const std::string& text) {
  RunReport r;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto colon = line.find(": ");
      if (colon == std::string::npos) continue;
      const std::string key = line.substr(2, colon - 2), value = line.substr(colon + 2);
      if (key == "title") r.title = value;
      if (key == "trainings") r.trainings = std::stoull(value);
      if (key == "evaluations") r.evaluations = std::stoull(value);
      continue;
    }
    if (!header_seen) {
      if (line != kCsvHeader) throw ParseError("report CSV line " + std::to_string(line_no) + ": unexpected header");
      header_seen = true;
      continue;
    }
    const auto f = csv_split(line, line_no);
    if (f.size() != 16) {
      throw ParseError("report CSV line " + std::to_string(line_no) + ": expected 16 fields, got " +
                       std::to_string(f.size()));
    }
    ReportCell c;
    c.name = f[0];
    c.use_ar_features = f[1] == "1";
    c.train_controller = f[2];
    c.test_controller = f[3];
    c.train_mode = f[4];
    c.test_mode = f[5];
    if (!f[6].empty()) c.x = parse_num(f[6], line_no, "x");
    c.per_mean = parse_num(f[7], line_no, "per_mean");
    if (!f[8].empty()) c.per_std = parse_num(f[8], line_no, "per_std");
    c.flops = parse_num(f[9], line_no, "flops");
    if (!f[10].empty()) c.train_loss = parse_num(f[10], line_no, "train_loss");
    c.test_loss = parse_num(f[11], line_no, "test_loss");
    c.mean_p_big = parse_num(f[12], line_no, "mean_p_big");
    c.pareto = f[13] == "1";
    std::istringstream ss(f[14]);
    for (std::string tok; std::getline(ss, tok, ';');) c.seeds.push_back(std::stoi(tok));
    c.config = f[15];
    r.cells.push_back(std::move(c));
  }
  if (!header_seen) throw ParseError("report CSV: missing header line");
  return r;
}

namespace {

std::string flops_text(double f) {
  if (f >= 1e6) return fmt("%.2fM", f / 1e6);
  if (f >= 1e3) return fmt("%.2fK", f / 1e3);
  return fmt("%.0f", f);
}

}  // namespace

std::string report_markdown(const RunReport& r) {
  std::ostringstream out;
  out << "| Cell | AR features | Train controller | Test controller | Train mode | Test mode | x | PER | "
         "Avg. FLOPs per input | Train loss | Test loss | Mean p_big | Pareto |\n";
  out << "|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const ReportCell& c : r.cells) {
    std::string per = fmt("%.2f%%", c.per_mean);
    if (c.per_std) per += fmt(" ± %.2f%%", *c.per_std);
    out << "| " << c.name << " | " << (c.use_ar_features ? "yes" : "no") << " | " << c.train_controller << " | "
        << c.test_controller << " | " << c.train_mode << " | " << c.test_mode << " | "
        << (c.x ? fmt("%g", *c.x) : "") << " | " << per << " | " << flops_text(c.flops) << " | "
        << (c.train_loss ? fmt("%.4f", *c.train_loss) : "") << " | " << fmt("%.4f", c.test_loss) << " | " << fmt("%.3f", c.mean_p_big)
        << " | " << (c.pareto ? "**yes**" : "") << " |\n";
  }
  return out.str();
}

std::vector<std::filesystem::path> emit_report(const RunReport& r, const std::filesystem::path& out_dir,
                                               const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create report directory '" + out_dir.string() + "': " + ec.message());
  std::vector<std::filesystem::path> written;
  auto write = [&](const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
    f << text;
    if (!f) throw std::runtime_error("failed writing '" + p.string() + "'");
    written.push_back(p);
  };
  write(out_dir / (stem + ".csv"), report_csv(r));
  write(out_dir / (stem + ".md"), report_markdown(r));

  std::vector<const ReportCell*> sweep, refs;
  for (const ReportCell& c : r.cells) (c.x ? sweep : refs).push_back(&c);
  if (sweep.empty()) return written;
  auto series = [&](const std::string& name, auto y, auto err) {
    std::string text = "x y err\n";
    for (const ReportCell* c : sweep) text += num(*c->x) + " " + num(y(*c)) + " " + num(err(*c)) + "\n";
    write(out_dir / (stem + "_" + name + ".dat"), text);
  };
  auto std_or_zero = [](const ReportCell& c) { return c.per_std.value_or(0.0); };
  auto zero = [](const ReportCell&) { return 0.0; };
  series("per", [](const ReportCell& c) { return c.per_mean; }, std_or_zero);
  series("flops", [](const ReportCell& c) { return c.flops; }, zero);
  series("p_big", [](const ReportCell& c) { return c.mean_p_big; }, zero);
  for (const ReportCell* ref : refs) {
    std::string text = "x y err\n";
    for (const ReportCell* c : sweep) text += num(*c->x) + " " + num(ref->per_mean) + " " + num(std_or_zero(*ref)) + "\n";
    write(out_dir / (stem + "_ref_" + ref->name + ".dat"), text);
  }
  return written;
}

}  // namespace scc
