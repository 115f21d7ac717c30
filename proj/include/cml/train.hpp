// Training harness: run configuration, the training loop, per-epoch metrics,
// on-disk run artifacts and cross-run comparison tables.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cml/data.hpp"
#include "cml/model.hpp"
#include "json.hpp"

namespace cml {

using nlohmann::json;

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& msg, json diag) : std::runtime_error(msg), diagnostic(std::move(diag)) {}
  json diagnostic;
};

enum class Precision { F32, F64 };

struct RunConfig {
  Variant arch = Variant::Cml;
  std::string dataset = "synth";  // synth | cifar10
  std::string data_dir;
  data::SynthSpec synth;
  std::size_t cifar_train_per_class = 200;
  std::size_t cifar_test_per_class = 100;
  std::size_t timesteps = 4;
  std::size_t epochs = 5;
  std::size_t batch = 16;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;
  std::size_t width1 = 8;
  std::size_t width2 = 16;
  LifParams lif;
  double surrogate_alpha = 4.0;
  bool eval_train = true;
  std::string out;

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.arch == b.arch && a.dataset == b.dataset && a.data_dir == b.data_dir && a.synth == b.synth &&
           a.cifar_train_per_class == b.cifar_train_per_class && a.cifar_test_per_class == b.cifar_test_per_class &&
           a.timesteps == b.timesteps && a.epochs == b.epochs && a.batch == b.batch && a.lr == b.lr &&
           a.optimizer == b.optimizer && a.seed == b.seed && a.precision == b.precision && a.width1 == b.width1 &&
           a.width2 == b.width2 && a.lif.tau == b.lif.tau && a.lif.v_threshold == b.lif.v_threshold &&
           a.lif.v_reset == b.lif.v_reset && a.surrogate_alpha == b.surrogate_alpha && a.eval_train == b.eval_train &&
           a.out == b.out;
  }
};

namespace data {
inline void to_json(json& j, const SynthSpec& s) {
  j = {{"n_classes", s.n_classes}, {"channels", s.channels}, {"image_size", s.image_size},
       {"samples_per_class", s.samples_per_class}, {"test_per_class", s.test_per_class},
       {"noise", s.noise}, {"seed", s.seed}};
}
inline void from_json(const json& j, SynthSpec& s) {
  j.at("n_classes").get_to(s.n_classes);
  j.at("channels").get_to(s.channels);
  j.at("image_size").get_to(s.image_size);
  j.at("samples_per_class").get_to(s.samples_per_class);
  j.at("test_per_class").get_to(s.test_per_class);
  j.at("noise").get_to(s.noise);
  j.at("seed").get_to(s.seed);
}
}  // namespace data

inline void to_json(json& j, const RunConfig& c) {
  j = {{"arch", variant_name(c.arch)},
       {"dataset", c.dataset},
       {"data_dir", c.data_dir},
       {"synth", c.synth},
       {"cifar_train_per_class", c.cifar_train_per_class},
       {"cifar_test_per_class", c.cifar_test_per_class},
       {"timesteps", c.timesteps},
       {"epochs", c.epochs},
       {"batch", c.batch},
       {"lr", c.lr},
       {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
       {"seed", c.seed},
       {"precision", c.precision == Precision::F32 ? "f32" : "f64"},
       {"width1", c.width1},
       {"width2", c.width2},
       {"tau", c.lif.tau},
       {"v_threshold", c.lif.v_threshold},
       {"v_reset", c.lif.v_reset},
       {"surrogate_alpha", c.surrogate_alpha},
       {"eval_train", c.eval_train},
       {"out", c.out}};
}

inline void from_json(const json& j, RunConfig& c) {
  const auto arch = parse_variant(j.at("arch").get<std::string>());
  if (!arch) throw ConfigError("run config: unknown arch " + j.at("arch").dump());
  c.arch = *arch;
  j.at("dataset").get_to(c.dataset);
  j.at("data_dir").get_to(c.data_dir);
  j.at("synth").get_to(c.synth);
  j.at("cifar_train_per_class").get_to(c.cifar_train_per_class);
  j.at("cifar_test_per_class").get_to(c.cifar_test_per_class);
  j.at("timesteps").get_to(c.timesteps);
  j.at("epochs").get_to(c.epochs);
  j.at("batch").get_to(c.batch);
  j.at("lr").get_to(c.lr);
  const auto opt = j.at("optimizer").get<std::string>();
  if (opt != "adam" && opt != "sgd") throw ConfigError("run config: unknown optimizer " + opt);
  c.optimizer = opt == "adam" ? OptimizerKind::Adam : OptimizerKind::SgdMomentum;
  j.at("seed").get_to(c.seed);
  const auto prec = j.at("precision").get<std::string>();
  if (prec != "f32" && prec != "f64") throw ConfigError("run config: unknown precision " + prec);
  c.precision = prec == "f32" ? Precision::F32 : Precision::F64;
  j.at("width1").get_to(c.width1);
  j.at("width2").get_to(c.width2);
  j.at("tau").get_to(c.lif.tau);
  j.at("v_threshold").get_to(c.lif.v_threshold);
  j.at("v_reset").get_to(c.lif.v_reset);
  j.at("surrogate_alpha").get_to(c.surrogate_alpha);
  j.at("eval_train").get_to(c.eval_train);
  j.at("out").get_to(c.out);
}

/// Identifies the data a run saw; runs are only comparable when these match.
inline json dataset_descriptor(const RunConfig& c) {
  if (c.dataset == "synth") return {{"dataset", "synth"}, {"synth", c.synth}};
  return {{"dataset", c.dataset},
          {"train_per_class", c.cifar_train_per_class},
          {"test_per_class", c.cifar_test_per_class}};
}

/// Epoch 0 describes the untrained model. Losses and accuracies are measured
/// in eval mode after the epoch; batch_loss is the mean training minibatch loss.
struct MetricsRecord {
  std::size_t epoch = 0;
  double batch_loss = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double test_loss = 0;
  double test_accuracy = 0;
  double wall_time_s = 0;
  std::uint64_t lif_updates_per_sample = 0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline void to_json(json& j, const MetricsRecord& r) {
  j = {{"epoch", r.epoch},         {"batch_loss", r.batch_loss},        {"train_loss", r.train_loss},
       {"train_accuracy", r.train_accuracy}, {"test_loss", r.test_loss}, {"test_accuracy", r.test_accuracy},
       {"wall_time_s", r.wall_time_s}, {"lif_updates_per_sample", r.lif_updates_per_sample}};
}
inline void from_json(const json& j, MetricsRecord& r) {
  j.at("epoch").get_to(r.epoch);
  j.at("batch_loss").get_to(r.batch_loss);
  j.at("train_loss").get_to(r.train_loss);
  j.at("train_accuracy").get_to(r.train_accuracy);
  j.at("test_loss").get_to(r.test_loss);
  j.at("test_accuracy").get_to(r.test_accuracy);
  j.at("wall_time_s").get_to(r.wall_time_s);
  j.at("lif_updates_per_sample").get_to(r.lif_updates_per_sample);
}

inline data::Split load_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "synth") return data::gen_synthetic(cfg.synth).split;
  if (cfg.dataset == "cifar10") {
    std::string dir = cfg.data_dir;
    if (dir.empty()) {
      if (const char* env = std::getenv("CML_DATA_DIR")) dir = env;
    }
    if (dir.empty()) throw data::DataError("cifar10: no --data-dir given and CML_DATA_DIR is unset");
    return data::load_cifar10(dir, cfg.cifar_train_per_class, cfg.cifar_test_per_class);
  }
  throw ConfigError("unknown dataset '" + cfg.dataset + "'");
}

inline ModelConfig model_config(const RunConfig& cfg, const data::Dataset& d) {
  ModelConfig m;
  m.variant = cfg.arch;
  m.in_channels = d.channels;
  m.width1 = cfg.width1;
  m.width2 = cfg.width2;
  m.n_classes = d.n_classes;
  m.timesteps = cfg.timesteps;
  m.lif = cfg.lif;
  m.surrogate.alpha = cfg.surrogate_alpha;
  return m;
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

template <typename S>
EvalResult evaluate(Classifier<S>& model, const data::Dataset& d, std::size_t batch) {
  EvalResult r;
  if (d.size() == 0) return r;
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < d.size(); start += batch) {
    const std::span<const std::size_t> bi(idx.data() + start, std::min(batch, d.size() - start));
    Tape<S> tape;
    Binding<S> bind(tape);
    Var x = tape.constant(d.batch<S>(bi));
    const auto labels = d.batch_labels(bi);
    const auto tr = model.forward(bind, x, BnMode::Eval);
    Var l = ops::cross_entropy(tape, tr.logits, labels);
    loss += static_cast<double>(tape.value(l)[0]) * static_cast<double>(bi.size());
    const Tensor5<S>& lg = tape.value(tr.logits);
    const std::size_t K = lg.shape().c;
    for (std::size_t b = 0; b < bi.size(); ++b) {
      const S* row = lg.data() + b * K;
      const auto pred = std::max_element(row, row + K) - row;
      if (pred == labels[b]) ++correct;
    }
  }
  r.loss = loss / static_cast<double>(d.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(d.size());
  return r;
}

template <typename S>
struct TrainResult {
  std::vector<MetricsRecord> records;
  Classifier<S> model;
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

template <typename S>
TrainResult<S> train(const RunConfig& cfg, const data::Split& data, const EpochCallback& on_epoch = {}) {
  if (cfg.batch == 0) throw ConfigError("train: batch must be positive");
  if (data.train.size() == 0) throw data::DataError("train: empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  TrainResult<S> res{{}, Classifier<S>(model_config(cfg, data.train), cfg.seed)};
  Classifier<S>& model = res.model;
  const std::uint64_t lif_updates = model.lif_updates_per_sample(data.train.height, data.train.width);
  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.lr = cfg.lr;
  Optimizer<S> opt(oc);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  auto emit = [&](std::size_t epoch, double batch_loss) {
    MetricsRecord r;
    r.epoch = epoch;
    r.batch_loss = batch_loss;
    if (cfg.eval_train) {
      const auto e = evaluate(model, data.train, cfg.batch);
      r.train_loss = e.loss;
      r.train_accuracy = e.accuracy;
    }
    const auto e = evaluate(model, data.test, cfg.batch);
    r.test_loss = e.loss;
    r.test_accuracy = e.accuracy;
    r.wall_time_s = elapsed();
    r.lif_updates_per_sample = lif_updates;
    res.records.push_back(r);
    if (on_epoch) on_epoch(r);
  };

  emit(0, 0.0);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto params = model.parameters();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::span<const std::size_t> bi(order.data() + start, std::min(cfg.batch, order.size() - start));
      Tape<S> tape;
      Binding<S> bind(tape);
      Var x = tape.constant(data.train.batch<S>(bi));
      const auto labels = data.train.batch_labels(bi);
      const auto tr = model.forward(bind, x, BnMode::Train);
      Var loss = ops::cross_entropy(tape, tr.logits, labels);
      const double lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) {
        throw TrainingDiverged("training diverged: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(steps),
                               {{"error", "diverged"}, {"epoch", epoch}, {"step", steps}, {"loss", json(nullptr)},
                                {"config", cfg}});
      }
      tape.backward(loss);
      std::vector<Tensor5<S>> grads;
      grads.reserve(params.size());
      for (auto* p : params) grads.push_back(bind.grad(*p));
      opt.step(params, grads);
      loss_sum += lv;
      ++steps;
    }
    emit(epoch, loss_sum / static_cast<double>(steps));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Run artifacts: <out>/config.json, metrics.jsonl, metrics.csv, final.json

struct RunArtifacts {
  RunConfig config;
  std::vector<MetricsRecord> records;
  std::string path;
};

inline void write_metrics_csv(const std::filesystem::path& file, const std::vector<MetricsRecord>& recs) {
  std::ofstream os(file);
  os << "epoch,batch_loss,train_loss,train_accuracy,test_loss,test_accuracy,wall_time_s,lif_updates_per_sample\n";
  os.precision(10);
  for (const auto& r : recs) {
    os << r.epoch << ',' << r.batch_loss << ',' << r.train_loss << ',' << r.train_accuracy << ',' << r.test_loss << ','
       << r.test_accuracy << ',' << r.wall_time_s << ',' << r.lif_updates_per_sample << '\n';
  }
}

/// Trains according to `cfg`, writing artifacts under cfg.out if set.
inline RunArtifacts run(const RunConfig& cfg) {
  const data::Split split = load_dataset(cfg);
  std::filesystem::path out = cfg.out;
  std::ofstream jsonl;
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    std::ofstream(out / "config.json") << json(cfg).dump(2) << '\n';
    jsonl.open(out / "metrics.jsonl");
  }
  auto cb = [&](const MetricsRecord& r) {
    if (jsonl.is_open()) jsonl << json(r).dump() << std::endl;
  };
  RunArtifacts art{cfg, {}, cfg.out};
  art.records = cfg.precision == Precision::F32 ? train<float>(cfg, split, cb).records
                                                : train<double>(cfg, split, cb).records;
  if (!out.empty()) {
    write_metrics_csv(out / "metrics.csv", art.records);
    const auto& last = art.records.back();
    std::ofstream(out / "final.json") << json{{"config", cfg}, {"final", last}, {"epochs", art.records.size() - 1}}.dump(2)
                                      << '\n';
  }
  return art;
}

inline RunArtifacts load_run(const std::filesystem::path& dir) {
  std::ifstream cf(dir / "config.json");
  if (!cf) throw data::DataError("compare: " + (dir / "config.json").string() + " not found");
  RunArtifacts a;
  a.config = json::parse(cf).get<RunConfig>();
  a.path = dir.string();
  std::ifstream mf(dir / "metrics.jsonl");
  if (!mf) throw data::DataError("compare: " + (dir / "metrics.jsonl").string() + " not found");
  for (std::string line; std::getline(mf, line);)
    if (!line.empty()) a.records.push_back(json::parse(line).get<MetricsRecord>());
  if (a.records.empty()) throw data::DataError("compare: run " + dir.string() + " has no metrics");
  return a;
}

// ---------------------------------------------------------------------------
// Comparison table

/// Full-scale reference rows of the four downsampling orderings (CIFAR-10 /
/// CIFAR-100 top-1, T = 4, 400 epochs), reported next to desk-scale results.
struct ReferenceRow {
  const char* method;
  const char* backbone;
  double cifar10;
  double cifar100;
};
inline constexpr std::array<ReferenceRow, 8> kReferenceTable = {{
    {"ConvBN-LIF-MaxPool", "Spikingformer-4-384-400E", 95.81, 79.21},
    {"ConvBN-MaxPool-LIF", "Spikingformer-4-384-400E", 95.95, 80.37},
    {"ConvBN-AvgPool-LIF", "Spikingformer-4-384-400E", 95.23, 78.52},
    {"ConvBN(stride=2)-LIF", "Spikingformer-4-384-400E", 94.94, 78.65},
    {"ConvBN-LIF-MaxPool", "Spikformer-4-384-400E", 95.51, 78.21},
    {"ConvBN-MaxPool-LIF", "Spikformer-4-384-400E", 96.04, 80.02},
    {"ConvBN-AvgPool-LIF", "Spikformer-4-384-400E", 95.13, 78.53},
    {"ConvBN(stride=2)-LIF", "Spikformer-4-384-400E", 94.93, 78.02},
}};

struct ComparisonRow {
  std::string run;
  Variant arch;
  std::uint64_t seed;
  std::size_t timesteps;
  std::size_t epochs;
  double final_test_accuracy;
  double final_train_accuracy;
  std::uint64_t lif_updates_per_sample;
  double wall_time_s;
};

struct Comparison {
  json dataset;
  std::vector<ComparisonRow> rows;
  /// Per variant: seed -> (variant accuracy − baseline accuracy) over seeds run with both.
  std::map<std::string, std::map<std::uint64_t, double>> paired_deltas;
  std::map<std::string, double> mean_delta;
};

inline Comparison compare(const std::vector<RunArtifacts>& runs) {
  if (runs.size() < 2) throw std::invalid_argument("compare: need at least two runs, got " + std::to_string(runs.size()));
  Comparison cmp;
  cmp.dataset = dataset_descriptor(runs.front().config);
  for (const auto& r : runs) {
    if (dataset_descriptor(r.config) != cmp.dataset) {
      throw std::invalid_argument("compare: run " + r.path + " used dataset " + dataset_descriptor(r.config).dump() +
                                  ", expected " + cmp.dataset.dump());
    }
    const auto& last = r.records.back();
    cmp.rows.push_back({r.path, r.config.arch, r.config.seed, r.config.timesteps, last.epoch, last.test_accuracy,
                        last.train_accuracy, last.lif_updates_per_sample, last.wall_time_s});
  }
  std::map<std::uint64_t, double> baseline;
  for (const auto& row : cmp.rows)
    if (row.arch == Variant::Baseline) baseline[row.seed] = row.final_test_accuracy;
  for (const auto& row : cmp.rows) {
    if (row.arch == Variant::Baseline) continue;
    auto it = baseline.find(row.seed);
    if (it == baseline.end()) continue;
    cmp.paired_deltas[std::string(variant_name(row.arch))][row.seed] = row.final_test_accuracy - it->second;
  }
  for (const auto& [name, deltas] : cmp.paired_deltas) {
    double s = 0;
    for (const auto& [seed, d] : deltas) s += d;
    cmp.mean_delta[name] = s / static_cast<double>(deltas.size());
  }
  return cmp;
}

inline json to_json(const Comparison& c) {
  json rows = json::array();
  for (const auto& r : c.rows) {
    rows.push_back({{"run", r.run}, {"arch", variant_name(r.arch)}, {"method", variant_label(r.arch)},
                    {"seed", r.seed}, {"timesteps", r.timesteps}, {"epochs", r.epochs},
                    {"final_test_accuracy", r.final_test_accuracy}, {"final_train_accuracy", r.final_train_accuracy},
                    {"lif_updates_per_sample", r.lif_updates_per_sample}, {"wall_time_s", r.wall_time_s}});
  }
  json deltas = json::object();
  for (const auto& [name, per_seed] : c.paired_deltas) {
    json d = json::object();
    for (const auto& [seed, v] : per_seed) d[std::to_string(seed)] = v;
    deltas[name] = {{"per_seed", d}, {"mean", c.mean_delta.at(name)},
                    {"sign", c.mean_delta.at(name) > 0 ? 1 : (c.mean_delta.at(name) < 0 ? -1 : 0)}};
  }
  json ref = json::array();
  for (const auto& r : kReferenceTable)
    ref.push_back({{"method", r.method}, {"backbone", r.backbone}, {"timesteps", 4}, {"cifar10", r.cifar10},
                   {"cifar100", r.cifar100}});
  return {{"dataset", c.dataset},
          {"rows", rows},
          {"paired_deltas_vs_baseline", deltas},
          {"reference_full_scale", ref},
          {"reference_cml_deltas",
           {{"Spikformer", {{"cifar10", 0.53}, {"cifar100", 1.81}}},
            {"Spikingformer", {{"cifar10", 0.14}, {"cifar100", 1.16}}}}}};
}

inline std::string to_csv(const Comparison& c) {
  std::ostringstream os;
  os.precision(10);
  os << "run,arch,method,seed,timesteps,epochs,final_test_accuracy,final_train_accuracy,lif_updates_per_sample,"
        "wall_time_s\n";
  for (const auto& r : c.rows) {
    os << r.run << ',' << variant_name(r.arch) << ',' << variant_label(r.arch) << ',' << r.seed << ',' << r.timesteps
       << ',' << r.epochs << ',' << r.final_test_accuracy << ',' << r.final_train_accuracy << ','
       << r.lif_updates_per_sample << ',' << r.wall_time_s << '\n';
  }
  return os.str();
}

}  // namespace cml
