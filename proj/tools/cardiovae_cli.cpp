// cardiovae_cli: synthetic data, pre-training, fine-tuning, cross-validated
// evaluation and integrated-gradients attribution from one binary.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cardiovae/config.hpp"
#include "cardiovae/data.hpp"
#include "cardiovae/evaluation.hpp"
#include "cardiovae/training.hpp"

namespace fs = std::filesystem;
using namespace cardiovae;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return 2;
    case ErrorKind::config: return 3;
    case ErrorKind::io: return 4;
    case ErrorKind::numeric: return 5;
    case ErrorKind::shape:
    case ErrorKind::invalid: return 3;
  }
  return 1;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string streams, modality, arch;
  std::string out = "runs";
  std::vector<std::string> sets;
  std::string data, checkpoint, sample;
  std::optional<std::size_t> n, epochs, batch, steps, folds;
  bool grid = false;
};

Settings resolve(const Common& c, const std::string& command) {
  ConfigMap cfg;
  if (!c.config.empty()) cfg = read_config_file(c.config);
  ConfigMap flags;
  const auto flag = [&](const std::string& key, const std::string& value, const std::string& name) {
    flags[key] = {value, "--" + name};
  };
  const auto path_flag = [&](const std::string& key, const std::string& value) {
    if (!value.empty()) flag(key, fs::absolute(value).lexically_normal().string(), key);
  };
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::usage, "--set expects key=value, got '" + kv + "'");
    flags[kv.substr(0, eq)] = {kv.substr(eq + 1), "--set " + kv};
  }
  if (c.seed) flag("seed", std::to_string(*c.seed), "seed");
  if (!c.streams.empty()) flag("streams", c.streams, "streams");
  if (!c.modality.empty()) flag("modality", c.modality, "modality");
  if (!c.arch.empty()) flag("arch", c.arch, "arch");
  path_flag("data", c.data);
  path_flag("checkpoint", c.checkpoint);
  if (!c.sample.empty()) flag("sample", c.sample, "sample");
  if (c.n) flag("synth_n", std::to_string(*c.n), "n");
  const bool pre = command == "pretrain";
  if (c.epochs) flag(pre ? "pretrain_epochs" : "finetune_epochs", std::to_string(*c.epochs), "epochs");
  if (c.batch) flag(pre ? "pretrain_batch" : "finetune_batch", std::to_string(*c.batch), "batch");
  if (c.steps) flag("ig_steps", std::to_string(*c.steps), "steps");
  if (c.folds) flag("folds", std::to_string(*c.folds), "folds");
  if (c.grid) flag("grid_search", "true", "grid");
  merge_config(cfg, flags);
  return resolve_settings(cfg);
}

std::string utc_stamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// <out>/<UTC timestamp>-seed<N>, with a numeric suffix if that name is taken.
fs::path make_run_dir(const fs::path& out, std::uint64_t seed) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + out.string() + ": " + ec.message());
  const std::string base = fmt::format("{}-seed{}", utc_stamp(), seed);
  for (int k = 0;; ++k) {
    const fs::path dir = out / (k == 0 ? base : fmt::format("{}-{}", base, k));
    if (fs::create_directory(dir, ec)) return dir;
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (fs::exists(path)) throw Error(ErrorKind::io, "refusing to overwrite " + path.string());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Error(ErrorKind::io, "cannot write " + path.string());
}

fs::path start_run(const Common& c, const Settings& s, const std::string& command) {
  const auto dir = make_run_dir(c.out, s.seed);
  write_text(dir / "config.resolved", "# " + command + "\n" + render_settings(s));
  return dir;
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw Error(ErrorKind::usage, flag + " is required");
}

Model load_model(const Settings& s) {
  require(s.checkpoint, "--checkpoint");
  if (!fs::exists(s.checkpoint)) throw Error(ErrorKind::io, "checkpoint not found: " + s.checkpoint);
  const auto ck = read_checkpoint(s.checkpoint);
  return {make_layout(ck.arch), ck.params};
}

Dataset load_data(const Settings& s) {
  require(s.data, "--data");
  return read_dataset(s.data);
}

int cmd_synth(const Common& c) {
  const auto s = resolve(c, "synth-data");
  const auto dir = start_run(c, s, "synth-data");
  write_dataset(dir / "dataset", synth_generate(s.synth));
  std::cout << (dir / "dataset").string() << '\n';
  return 0;
}

/// Fréchet distance between encoder features of real samples and of their
/// joint-posterior-mean reconstructions, per feature mode.
std::string frechet_report(const Model& m, const Dataset& ds) {
  std::string out = "features,n,frechet_distance\n";
  if (ds.size() < 2) return out;
  Dataset recon;
  for (const auto& smp : ds) {
    const auto z = extract_features<float>(m, smp.image ? &*smp.image : nullptr, smp.signal ? &*smp.signal : nullptr,
                                           Modality::joint);
    PairedSample r;
    r.id = smp.id;
    r.image = decode_cxr<float>(m, z);
    r.signal = decode_ecg<float>(m, z);
    recon.push_back(std::move(r));
  }
  for (Modality mode : {Modality::cxr, Modality::ecg, Modality::joint}) {
    const auto to_double = [](const std::vector<std::vector<float>>& f) {
      std::vector<std::vector<double>> d;
      for (const auto& row : f) d.emplace_back(row.begin(), row.end());
      return d;
    };
    const auto real = gaussian_stats(to_double(extract_dataset_features(m, ds, mode)));
    const auto fake = gaussian_stats(to_double(extract_dataset_features(m, recon, mode)));
    out += fmt::format("{},{},{:.17g}\n", modality_name(mode), ds.size(), frechet_distance(real, fake));
  }
  return out;
}

int cmd_pretrain(const Common& c) {
  auto s = resolve(c, "pretrain");
  const auto ds = load_data(s);
  const auto dir = start_run(c, s, "pretrain");

  ObjectiveConfig obj = s.objective;
  RunConfig run = s.pretrain;
  if (s.grid_search) {
    std::vector<std::pair<double, double>> grid;
    for (double a : s.lambda_grid)
      for (double b : s.lambda_grid) grid.emplace_back(a, b);
    const auto g = grid_search_lambda(ds, grid, s.arch, obj, run, &std::cerr);
    std::string table = "lambda_cxr,lambda_ecg,val_neg_total\n";
    for (const auto& cell : g.table)
      table += fmt::format("{:.17g},{:.17g},{:.17g}\n", cell.lambda_cxr, cell.lambda_ecg, cell.val_neg_total);
    write_text(dir / "grid.csv", table);
    obj.lambda_cxr = g.best.lambda_cxr;
    obj.lambda_ecg = g.best.lambda_ecg;
    run.val_fraction = 0.0;
  }
  const auto r = pretrain(ds, s.arch, obj, run, &std::cerr);
  write_checkpoint(dir / "checkpoint.cvxg", r.final_checkpoint);
  write_checkpoint(dir / "best.cvxg", r.best_checkpoint);
  write_history_csv(dir / "history.csv", r.history);

  // Held-out samples when there is a validation split, otherwise everything.
  Dataset eval_set;
  if (run.val_fraction > 0.0) {
    for (auto i : pretrain_split(ds.size(), run).second) eval_set.push_back(ds[i]);
  }
  if (eval_set.size() < 2) eval_set = ds;
  const Model m{make_layout(s.arch), r.final_checkpoint.params};
  write_text(dir / "frechet.csv", frechet_report(m, eval_set));
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_finetune(const Common& c) {
  const auto s = resolve(c, "finetune");
  const auto m = load_model(s);
  const auto ds = load_data(s);
  const auto dir = start_run(c, s, "finetune");
  const auto r = finetune(m, ds, s.finetune);
  auto ck = read_checkpoint(s.checkpoint);
  ck.params = r.params;
  ck.extra["modality"] = modality_name(s.finetune.modality);
  ck.extra["finetune_epochs"] = std::to_string(s.finetune.epochs);
  write_checkpoint(dir / "finetuned.cvxg", ck);
  std::string hist = "epoch,train_bce,train_accuracy\n";
  for (const auto& row : r.history)
    hist += fmt::format("{},{:.17g},{:.17g}\n", row.epoch, row.train_bce, row.train_accuracy);
  write_text(dir / "finetune_history.csv", hist);
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_evaluate(const Common& c) {
  const auto s = resolve(c, "evaluate");
  require(s.checkpoint, "--checkpoint");
  const auto m = load_model(s);
  const auto ds = load_data(s);
  const auto dir = start_run(c, s, "evaluate");
  const auto r = cross_validate(m, ds, s.finetune, s.folds, &std::cerr);
  write_text(dir / "metrics.csv", cv_csv(r));
  const std::string summary =
      fmt::format("modality = {}\nfolds = {}\nauroc = {:.4f} +- {:.4f}\naccuracy = {:.4f} +- {:.4f}\n",
                  modality_name(s.finetune.modality), s.folds, r.auroc_mean, r.auroc_std, r.accuracy_mean,
                  r.accuracy_std);
  write_text(dir / "summary.txt", summary);
  std::cout << summary;
  return 0;
}

int cmd_attribute(const Common& c) {
  const auto s = resolve(c, "attribute");
  const auto m = load_model(s);
  const auto ds = load_data(s);
  require(s.sample, "--sample");
  const PairedSample* smp = nullptr;
  for (const auto& x : ds)
    if (x.id == s.sample) smp = &x;
  if (!smp) throw Error(ErrorKind::usage, "no sample named '" + s.sample + "'");
  const auto dir = start_run(c, s, "attribute");
  const BasicModel<double> md{m.layout, m.params.cast<double>()};
  std::optional<TensorD> img, sig;
  if (smp->image) img = smp->image->cast<double>();
  if (smp->signal) sig = smp->signal->cast<double>();
  const auto a = integrated_gradients(md, img ? &*img : nullptr, sig ? &*sig : nullptr, s.finetune.modality, s.ig_steps);
  for (const auto& p : write_attribution(dir, s.sample, a)) std::cout << p.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tri-stream multimodal VAE: synthetic data, pre-training, fine-tuning, evaluation, attribution"};
  app.require_subcommand(1);
  Common c;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "key = value config file");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--streams", c.streams, "tri | joint-only");
    sub->add_option("--modality", c.modality, "cxr | ecg | joint");
    sub->add_option("--arch", c.arch, "desk | paper");
    sub->add_option("--out", c.out, "parent directory for run directories");
    sub->add_option("--set", c.sets, "override any config key (key=value)");
  };

  auto* synth = app.add_subcommand("synth-data", "write a synthetic paired dataset");
  common(synth);
  synth->add_option("--n", c.n, "number of samples");

  auto* pre = app.add_subcommand("pretrain", "tri-stream (or joint-only) pre-training");
  common(pre);
  pre->add_option("--data", c.data, "dataset directory or manifest");
  pre->add_option("--epochs", c.epochs, "pre-training epochs");
  pre->add_option("--batch", c.batch, "pre-training batch size");
  pre->add_flag("--grid", c.grid, "grid-search the lambda weights first");

  auto* fine = app.add_subcommand("finetune", "train the classifier head on frozen encoders");
  common(fine);
  fine->add_option("--checkpoint", c.checkpoint, "pre-trained CVXG checkpoint");
  fine->add_option("--data", c.data, "labeled dataset directory or manifest");
  fine->add_option("--epochs", c.epochs, "fine-tuning epochs");
  fine->add_option("--batch", c.batch, "fine-tuning batch size");

  auto* eval = app.add_subcommand("evaluate", "stratified k-fold cross-validation of fine-tuning");
  common(eval);
  eval->add_option("--checkpoint", c.checkpoint, "pre-trained CVXG checkpoint");
  eval->add_option("--data", c.data, "labeled dataset directory or manifest");
  eval->add_option("--epochs", c.epochs, "fine-tuning epochs per fold");
  eval->add_option("--batch", c.batch, "fine-tuning batch size");
  eval->add_option("--folds", c.folds, "number of folds");

  auto* attr = app.add_subcommand("attribute", "integrated-gradients attribution for one sample");
  common(attr);
  attr->add_option("--checkpoint", c.checkpoint, "fine-tuned CVXG checkpoint");
  attr->add_option("--data", c.data, "dataset directory or manifest");
  attr->add_option("--sample", c.sample, "sample id");
  attr->add_option("--steps", c.steps, "integration steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) return cmd_synth(c);
    if (*pre) return cmd_pretrain(c);
    if (*fine) return cmd_finetune(c);
    if (*eval) return cmd_evaluate(c);
    if (*attr) return cmd_attribute(c);
  } catch (const Error& e) {
    std::cerr << "error: " << kind_name(e.kind()) << ": " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: io: " << e.what() << '\n';
    return 4;
  }
  return 2;
}
