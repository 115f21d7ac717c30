// cml: train spiking downsampling variants, probe gradient routing, run
// finite-difference checks and compare runs.
//
// Failures exit nonzero with a single JSON object on stderr.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cml/cml.hpp"

namespace {

using nlohmann::json;

int fail(const std::string& kind, const std::string& message, int code = 1, json extra = json::object()) {
  json j{{"error", kind}, {"message", message}};
  j.update(extra);
  std::cerr << j.dump() << std::endl;
  return code;
}

/// Writes to `path`, or stdout when empty.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw cml::data::DataError("cannot open output " + path);
    }
  }
  std::ostream& os() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

struct TrainArgs {
  std::string arch = "cml";
  std::string optimizer = "adam";
  std::string precision = "f32";
  cml::RunConfig cfg;
};

int do_train(TrainArgs& a) {
  auto arch = cml::parse_variant(a.arch);
  if (!arch) return fail("config", "unknown --arch " + a.arch);
  a.cfg.arch = *arch;
  a.cfg.optimizer = a.optimizer == "sgd" ? cml::OptimizerKind::SgdMomentum : cml::OptimizerKind::Adam;
  a.cfg.precision = a.precision == "f64" ? cml::Precision::F64 : cml::Precision::F32;
  if (a.cfg.dataset == "cifar10" && a.cfg.data_dir.empty()) {
    if (const char* env = std::getenv("CML_DATA_DIR")) a.cfg.data_dir = env;
  }
  const auto art = cml::run(a.cfg);
  for (const auto& r : art.records) std::cout << json(r).dump() << '\n';
  return 0;
}

struct ProbeArgs {
  std::string mode = "routing";
  std::uint64_t seed = 0;
  std::string out;
  std::size_t windows = 10000;
  std::vector<std::size_t> strides{2, 3};
  double mean = 2.0;
  double stddev = 1.5;
};

int do_probe(const ProbeArgs& a) {
  using namespace cml;
  Sink sink(a.out);
  std::ostream& os = sink.os();
  bool ok = true;
  if (a.mode == "routing") {
    for (std::size_t s : a.strides) {
      auto e = probe::routing_ensemble(a.seed, a.windows, s, a.mean, a.stddev);
      for (const auto* rep : {&e.baseline, &e.cml}) {
        probe::write_jsonl(os, *rep);
        const auto& sm = rep->summary;
        ok = ok && sm.oracle_position_agree == sm.oracle_checked && sm.oracle_magnitude_agree == sm.oracle_checked &&
             sm.one_hot == sm.windows;
      }
    }
  } else if (a.mode == "mismatch") {
    for (std::size_t s : a.strides) {
      auto e = probe::routing_ensemble(a.seed, a.windows, s, a.mean, a.stddev);
      const auto m = probe::mismatch_rate(e.features, s);
      os << json{{"record", "mismatch"}, {"stride", s}, {"windows", m.windows}, {"baseline_rate", m.baseline_rate},
                 {"cml_rate", m.cml_rate}, {"spike_rate", m.spike_rate}}
                .dump()
         << '\n';
      ok = ok && m.cml_rate == 0.0;
    }
  } else if (a.mode == "opcount") {
    for (std::size_t s : a.strides) {
      for (std::size_t side : {32, 64, 224}) {
        if (side % s != 0) continue;
        const Shape5 in{1, 1, 1, side, side};
        const auto base = count_lif_updates(Variant::Baseline, in, 1, s);
        const auto cml = count_lif_updates(Variant::Cml, in, 1, s);
        os << json{{"record", "opcount"}, {"stride", s}, {"input", side}, {"baseline", base}, {"cml", cml},
                   {"ratio", static_cast<double>(base) / static_cast<double>(cml)}}
                  .dump()
           << '\n';
      }
    }
  } else {
    return fail("config", "unknown --mode " + a.mode);
  }
  return ok ? 0 : fail("check", "probe found routing disagreements", 3);
}

struct GradcheckArgs {
  bool soft = false;
  double eps = 1e-5;
  std::size_t seeds = 20;
  double tol = 1e-6;
  std::string arch = "all";
};

int do_gradcheck(const GradcheckArgs& a) {
  using namespace cml;
  std::vector<Variant> variants;
  if (a.arch == "all") {
    variants.assign(kAllVariants.begin(), kAllVariants.end());
  } else if (auto v = parse_variant(a.arch)) {
    variants.push_back(*v);
  } else {
    return fail("config", "unknown --arch " + a.arch);
  }
  gradcheck::NetworkCheckOptions opt;
  opt.eps = a.eps;
  opt.soft = a.soft;
  double worst = 0;
  for (Variant v : variants)
    for (std::uint64_t s = 0; s < a.seeds; ++s) {
      const auto r = gradcheck::check_network(v, s, opt);
      worst = std::max(worst, r.max_rel_error);
      json tensors = json::array();
      for (const auto& t : r.tensors) tensors.push_back({{"name", t.name}, {"entries", t.entries}, {"max_rel_error", t.max_rel_error}});
      std::cout << json{{"record", "gradcheck"}, {"arch", variant_name(v)}, {"seed", s}, {"soft", a.soft},
                        {"max_rel_error", r.max_rel_error}, {"tensors", tensors}}
                       .dump()
                << '\n';
    }
  const bool pass = worst < a.tol;
  std::cout << json{{"record", "summary"}, {"max_rel_error", worst}, {"tolerance", a.tol}, {"pass", pass}}.dump() << '\n';
  return pass ? 0 : fail("check", "gradient check exceeded tolerance", 3, {{"max_rel_error", worst}});
}

int do_compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<cml::RunArtifacts> runs;
  for (const auto& d : dirs) runs.push_back(cml::load_run(d));
  const auto cmp = cml::compare(runs);
  const json j = cml::to_json(cmp);
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    std::ofstream(std::filesystem::path(out) / "comparison.json") << j.dump(2) << '\n';
    std::ofstream(std::filesystem::path(out) / "comparison.csv") << cml::to_csv(cmp);
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking downsampling training and gradient-routing toolkit"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the two-cell classifier");
  train->add_option("--arch", ta.arch, "Downsampling variant")
      ->check(CLI::IsMember({"cml", "baseline", "avgpool", "strideconv"}));
  train->add_option("--dataset", ta.cfg.dataset, "Dataset")->check(CLI::IsMember({"synth", "cifar10"}));
  train->add_option("--data-dir", ta.cfg.data_dir, "CIFAR-10 binary directory (default $CML_DATA_DIR)");
  train->add_option("--timesteps", ta.cfg.timesteps, "Time steps T")->check(CLI::PositiveNumber);
  train->add_option("--epochs", ta.cfg.epochs, "Epochs");
  train->add_option("--batch", ta.cfg.batch, "Batch size")->check(CLI::PositiveNumber);
  train->add_option("--lr", ta.cfg.lr, "Learning rate");
  train->add_option("--optimizer", ta.optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
  train->add_option("--seed", ta.cfg.seed, "Model/shuffle seed");
  train->add_option("--precision", ta.precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
  train->add_option("--out", ta.cfg.out, "Run output directory");
  train->add_option("--width1", ta.cfg.width1, "Channels of the first cell");
  train->add_option("--width2", ta.cfg.width2, "Channels of the second cell");
  train->add_option("--train-per-class", ta.cfg.cifar_train_per_class, "CIFAR-10 training images per class (0 = all)");
  train->add_option("--test-per-class", ta.cfg.cifar_test_per_class, "CIFAR-10 test images per class (0 = all)");
  train->add_option("--synth-classes", ta.cfg.synth.n_classes, "Synthetic classes");
  train->add_option("--synth-size", ta.cfg.synth.image_size, "Synthetic image side");
  train->add_option("--synth-samples", ta.cfg.synth.samples_per_class, "Synthetic training samples per class");
  train->add_option("--synth-noise", ta.cfg.synth.noise, "Synthetic noise level");
  train->add_option("--data-seed", ta.cfg.synth.seed, "Synthetic dataset seed");
  train->add_flag("!--no-eval-train", ta.cfg.eval_train, "Skip the per-epoch training-set evaluation");

  ProbeArgs pa;
  auto* probe = app.add_subcommand("probe", "Gradient-routing analysis");
  probe->add_option("--mode", pa.mode, "routing | mismatch | opcount")
      ->check(CLI::IsMember({"routing", "mismatch", "opcount"}));
  probe->add_option("--seed", pa.seed, "Ensemble seed");
  probe->add_option("--out", pa.out, "Output JSON-lines file (default stdout)");
  probe->add_option("--windows", pa.windows, "Windows per stride");
  probe->add_option("--stride", pa.strides, "Pooling strides")->expected(1, 8);
  probe->add_option("--mean", pa.mean, "Feature mean");
  probe->add_option("--std", pa.stddev, "Feature standard deviation");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full network");
  gc->add_flag("--soft", ga.soft, "Sigmoid spike forward with full BPTT backward");
  gc->add_option("--eps", ga.eps, "Central-difference step");
  gc->add_option("--seeds", ga.seeds, "Seeds per variant");
  gc->add_option("--tol", ga.tol, "Relative-error tolerance");
  gc->add_option("--arch", ga.arch, "Variant or 'all'");

  std::vector<std::string> runs;
  std::string cmp_out;
  auto* cmp = app.add_subcommand("compare", "Compare finished runs");
  cmp->add_option("runs", runs, "Run directories")->required();
  cmp->add_option("--out", cmp_out, "Write comparison.json and comparison.csv here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*train) return do_train(ta);
    if (*probe) return do_probe(pa);
    if (*gc) return do_gradcheck(ga);
    if (*cmp) return do_compare(runs, cmp_out);
  } catch (const cml::TrainingDiverged& e) {
    return fail("diverged", e.what(), 4, {{"diagnostic", e.diagnostic}});
  } catch (const cml::data::DataError& e) {
    return fail("data", e.what());
  } catch (const cml::ConfigError& e) {
    return fail("config", e.what());
  } catch (const cml::ShapeError& e) {
    return fail("shape", e.what());
  } catch (const std::exception& e) {
    return fail("runtime", e.what());
  }
  return 0;
}
