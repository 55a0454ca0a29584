#include "cardiovae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <tuple>

#include <fmt/format.h>

#include "cardiovae/evaluation.hpp"

namespace cardiovae {

namespace {

enum SeedTag : std::uint64_t { kSplit = 1, kShuffle, kNoise, kValNoise, kHead, kDropout, kFold, kInner };

bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
}

void check_finite_grads(const ModelParams& grads, const std::string& where) {
  for (const auto& [name, t] : grads.tensors())
    for (float v : t.values())
      if (!std::isfinite(v)) throw NumericError(fmt::format("non-finite gradient in {} ({})", name, where));
}

void check_pretrain_sample(const PairedSample& s, const ArchConfig& arch) {
  if (!s.image || !s.signal) throw Error(ErrorKind::invalid, "pre-training sample '" + s.id + "' lacks a modality");
  const Dims want{arch.image_h, arch.image_w, arch.image_c};
  if (s.image->dims() != want)
    throw ShapeError("image", fmt::format("sample '{}' image dims {} do not match the architecture {}", s.id,
                                          dims_string(s.image->dims()), dims_string(want)));
  if (s.signal->size() != arch.signal_len)
    throw ShapeError("length", fmt::format("sample '{}' signal length {} does not match the architecture {}", s.id,
                                           s.signal->size(), arch.signal_len));
}

std::string num(double v) { return fmt::format("{:.17g}", v); }

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / double(v.size() - 1));
}

Checkpoint make_checkpoint(const Model& m, const ObjectiveConfig& obj, const RunConfig& run) {
  Checkpoint ck{m.params, m.arch(), run.seed, {}};
  ck.extra["streams"] = stream_mode_name(run.streams);
  ck.extra["lambda_cxr"] = num(obj.lambda_cxr);
  ck.extra["lambda_ecg"] = num(obj.lambda_ecg);
  ck.extra["max_beta"] = num(obj.beta.max_beta);
  ck.extra["anneal_steps"] = std::to_string(obj.beta.anneal_steps);
  ck.extra["epochs"] = std::to_string(run.epochs);
  ck.extra["batch_size"] = std::to_string(run.batch_size);
  ck.extra["lr"] = num(run.adam.lr);
  ck.extra["val_fraction"] = num(run.val_fraction);
  return ck;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads, OptimState& state) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw Error(ErrorKind::invalid, "adam_step: no parameter named '" + name + "'");
    if (it->second.dims() != g.dims()) throw ShapeError("size", "adam_step: gradient shape differs for '" + name + "'");
    for (float v : g.values())
      if (!std::isfinite(v)) throw NumericError("adam_step: non-finite gradient for '" + name + "'");
  }
  ++state.step;
  const auto& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(state.step));
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name);
    auto& m = state.m.try_emplace(name, g.dims()).first->second;
    auto& v = state.v.try_emplace(name, g.dims()).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps));
    }
  }
}

RunConfig RunConfig::finetune_defaults() {
  RunConfig r;
  r.batch_size = 32;
  r.epochs = 50;
  return r;
}

void RunConfig::validate() const {
  if (batch_size < 1) throw Error(ErrorKind::config, "batch_size must be >= 1");
  if (epochs < 1) throw Error(ErrorKind::config, "epochs must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error(ErrorKind::config, "val_fraction must be in [0, 1)");
  if (!(adam.lr > 0.0)) throw Error(ErrorKind::config, "lr must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw Error(ErrorKind::config, "adam betas must be in [0, 1)");
  if (!(adam.eps > 0.0)) throw Error(ErrorKind::config, "adam eps must be > 0");
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out =
      "epoch,split,beta,recon_cxr,recon_ecg,joint_recon_cxr,joint_recon_ecg,kl_cxr,kl_ecg,kl_joint,"
      "elbo_cxr,elbo_ecg,elbo_joint,total\n";
  for (const auto& r : rows) {
    const auto& l = r.loss;
    out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n",
                       r.epoch, r.split, r.beta, l.recon_cxr, l.recon_ecg, l.joint_recon_cxr, l.joint_recon_ecg,
                       l.kl_cxr, l.kl_ecg, l.kl_joint, l.elbo_cxr, l.elbo_ecg, l.elbo_joint, l.total);
  }
  return out;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::io, "cannot write " + path.string());
  f << history_csv(rows);
}

LossBreakdown evaluate_loss(const Model& m, const Dataset& ds, const std::vector<std::size_t>& indices, double beta,
                            const ObjectiveConfig& obj, StreamMode mode, std::uint64_t noise_seed) {
  if (indices.empty()) throw Error(ErrorKind::invalid, "evaluate_loss on no samples");
  std::mt19937_64 rng(noise_seed);
  const auto streams = StreamSet::for_mode(mode);
  LossBreakdown mean;
  const double w = 1.0 / double(indices.size());
  for (auto i : indices) {
    const auto noise = StreamNoise<float>::draw(rng, m.arch().latent_dim, streams);
    mean.add_scaled(total_loss<float>(m, *ds[i].image, *ds[i].signal, beta, obj, noise, mode), w);
  }
  return mean;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> pretrain_split(std::size_t n, const RunConfig& run) {
  std::vector<std::size_t> train(n), val;
  std::iota(train.begin(), train.end(), 0);
  if (run.val_fraction > 0.0) {
    if (n < 2) throw Error(ErrorKind::invalid, "a validation split needs at least 2 samples");
    std::tie(train, val) = ratio_split(n, 1.0 - run.val_fraction, derive_seed(run.seed, kSplit));
  }
  return {train, val};
}

PretrainResult pretrain(const Dataset& ds, const ArchConfig& arch, const ObjectiveConfig& obj, const RunConfig& run,
                        std::ostream* progress) {
  arch.validate();
  obj.validate();
  run.validate();
  if (ds.empty()) throw Error(ErrorKind::invalid, "pre-training dataset is empty");
  for (const auto& s : ds) check_pretrain_sample(s, arch);

  const auto [train, val] = pretrain_split(ds.size(), run);

  Model m{make_layout(arch), init_params(arch, run.seed)};
  OptimState opt{run.adam, 0, {}, {}};
  std::mt19937_64 shuffle_rng(derive_seed(run.seed, kShuffle));
  std::mt19937_64 noise_rng(derive_seed(run.seed, kNoise));
  const auto streams = StreamSet::for_mode(run.streams);
  auto grads = ModelParams::zeros(m.layout);

  PretrainResult out;
  double best_val = std::numeric_limits<double>::infinity();
  double beta = beta_at(0, obj.beta);
  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    std::vector<std::size_t> order = train;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossBreakdown epoch_mean;
    const double w = 1.0 / double(order.size());
    for (std::size_t start = 0, batch = 0; start < order.size(); start += run.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + run.batch_size);
      beta = beta_at(opt.step + 1, obj.beta);
      const double scale = obj.reduction == BatchReduction::mean ? 1.0 / double(end - start) : 1.0;
      grads.zero();
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = ds[order[k]];
        const auto noise = StreamNoise<float>::draw(noise_rng, arch.latent_dim, streams);
        const auto fail = [&](const std::string& why) {
          std::string ids;
          for (std::size_t j = start; j < end; ++j) ids += (j == start ? "" : " ") + ds[order[j]].id;
          return NumericError(fmt::format("{} at epoch {} batch {} (sample '{}'; batch ids: {})", why, epoch, batch,
                                          s.id, ids));
        };
        LossBreakdown l;
        try {
          l = total_loss<float>(m, *s.image, *s.signal, beta, obj, noise, run.streams, &grads, scale);
        } catch (const NumericError& e) {
          throw fail(e.what());
        }
        if (!std::isfinite(l.total)) throw fail("non-finite loss");
        epoch_mean.add_scaled(l, w);
      }
      check_finite_grads(grads, fmt::format("epoch {} batch {}", epoch, batch));
      std::map<std::string, Tensor> g;
      for (const auto& [name, t] : grads.tensors())
        if (!is_head(name)) g.emplace(name, t);
      adam_step(m.params.tensors(), g, opt);
    }
    out.history.push_back({epoch, "train", beta, epoch_mean});
    std::string line = fmt::format("epoch {}/{} beta {:.4g} train -total {:.6g}", epoch, run.epochs, beta, -epoch_mean.total);

    if (!val.empty()) {
      const auto vl = evaluate_loss(m, ds, val, beta, obj, run.streams, derive_seed(run.seed, kValNoise));
      out.history.push_back({epoch, "val", beta, vl});
      line += fmt::format(" val -total {:.6g}", -vl.total);
      if (-vl.total < best_val) {
        best_val = -vl.total;
        out.best_epoch = epoch;
        out.best_checkpoint = make_checkpoint(m, obj, run);
      }
    }
    if (progress) *progress << line << '\n';
  }
  out.final_checkpoint = make_checkpoint(m, obj, run);
  if (val.empty()) {
    out.best_checkpoint = out.final_checkpoint;
    out.best_epoch = run.epochs;
  }
  return out;
}

std::vector<std::vector<float>> extract_dataset_features(const Model& m, const Dataset& ds, Modality modality) {
  std::vector<std::vector<float>> out;
  out.reserve(ds.size());
  for (const auto& s : ds)
    out.push_back(extract_features<float>(m, s.image ? &*s.image : nullptr, s.signal ? &*s.signal : nullptr, modality));
  return out;
}

std::vector<double> head_logits(const Model& m, const std::vector<std::vector<float>>& features) {
  std::vector<double> out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back(classify<float>(m, f, false, nullptr));
  return out;
}

FinetuneResult finetune_features(const Model& m, const std::vector<std::vector<float>>& features,
                                 const std::vector<int>& labels, const RunConfig& run) {
  run.validate();
  if (features.size() != labels.size()) throw Error(ErrorKind::invalid, "finetune: features and labels differ in length");
  if (features.empty()) throw Error(ErrorKind::invalid, "finetune: empty dataset");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  if (positives == 0 || positives == static_cast<long>(labels.size()))
    throw Error(ErrorKind::invalid, "finetune needs both classes in the training data");

  Model work = m;
  init_head(work.params, work.layout, derive_seed(run.seed, kHead));
  OptimState opt{run.adam, 0, {}, {}};
  std::mt19937_64 shuffle_rng(derive_seed(run.seed, kShuffle));
  std::mt19937_64 dropout_rng(derive_seed(run.seed, kDropout));
  auto grads = ModelParams::zeros(work.layout);

  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), 0);
  FinetuneResult out;
  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += run.batch_size) {
      const std::size_t end = std::min(order.size(), start + run.batch_size);
      const float scale = 1.0f / float(end - start);
      grads.zero();
      for (std::size_t k = start; k < end; ++k) {
        HeadTrace<float> trace;
        const float logit = classify<float>(work, features[order[k]], true, &dropout_rng, &trace);
        head_backward<float>(work, trace, static_cast<float>(bce_grad(logit, labels[order[k]])) * scale, &grads);
      }
      std::map<std::string, Tensor> g;
      for (const auto& [name, t] : grads.tensors())
        if (is_head(name)) g.emplace(name, t);
      adam_step(work.params.tensors(), g, opt);
    }
    const auto logits = head_logits(work, features);
    double bce = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) bce += bce_loss(logits[i], labels[i]);
    if (!std::isfinite(bce)) throw NumericError(fmt::format("non-finite fine-tuning loss at epoch {}", epoch));
    out.history.push_back({epoch, bce / double(logits.size()), accuracy(logits, labels)});
  }

  for (const auto& [name, t] : m.params.tensors())
    if (!is_head(name) && !same_bits(t, work.params.at(name)))
      throw Error(ErrorKind::invalid, "frozen tensor '" + name + "' changed during fine-tuning");
  out.params = std::move(work.params);
  return out;
}

FinetuneResult finetune(const Model& m, const Dataset& labeled, const RunConfig& run) {
  return finetune_features(m, extract_dataset_features(m, labeled, run.modality), dataset_labels(labeled), run);
}

CvResult cross_validate(const Model& m, const Dataset& labeled, const RunConfig& run, std::size_t k,
                        std::ostream* progress) {
  run.validate();
  if (k < 2) throw Error(ErrorKind::invalid, "cross-validation needs k >= 2");
  const auto labels = dataset_labels(labeled);
  const auto features = extract_dataset_features(m, labeled, run.modality);
  const auto folds = stratified_kfold(labels, k, derive_seed(run.seed, kFold));

  CvResult out;
  std::vector<double> aucs, accs;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<bool> held(labeled.size(), false);
    for (auto i : folds[f]) held[i] = true;
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < labeled.size(); ++i)
      if (!held[i]) rest.push_back(i);
    std::vector<int> rest_labels;
    for (auto i : rest) rest_labels.push_back(labels[i]);
    const auto [tr, va] = stratified_ratio_split(rest_labels, 0.8, derive_seed(run.seed, kInner + f));

    std::vector<std::vector<float>> ftr, fva;
    std::vector<int> ytr, yva;
    for (auto j : tr) {
      ftr.push_back(features[rest[j]]);
      ytr.push_back(labels[rest[j]]);
    }
    for (auto j : va) {
      fva.push_back(features[rest[j]]);
      yva.push_back(labels[rest[j]]);
    }
    RunConfig fold_run = run;
    fold_run.seed = derive_seed(run.seed, 1000 + f);
    const auto ft = finetune_features(m, ftr, ytr, fold_run);
    const Model tuned{m.layout, ft.params};
    const auto logits = head_logits(tuned, fva);

    FoldResult r;
    r.fold = f;
    r.auroc = auroc(logits, yva);
    r.accuracy = accuracy(logits, yva);
    r.n_train = ftr.size();
    r.n_val = fva.size();
    for (const auto& row : ft.history) r.loss_curve.push_back(row.train_bce);
    aucs.push_back(r.auroc);
    accs.push_back(r.accuracy);
    if (progress)
      *progress << fmt::format("fold {}/{} auroc {:.4f} accuracy {:.4f}\n", f + 1, k, r.auroc, r.accuracy);
    out.folds.push_back(std::move(r));
  }
  out.auroc_mean = std::accumulate(aucs.begin(), aucs.end(), 0.0) / double(k);
  out.accuracy_mean = std::accumulate(accs.begin(), accs.end(), 0.0) / double(k);
  out.auroc_std = sample_std(aucs, out.auroc_mean);
  out.accuracy_std = sample_std(accs, out.accuracy_mean);
  return out;
}

std::string cv_csv(const CvResult& r) {
  std::string out = "fold,auroc,accuracy,n_train,n_val,final_train_bce\n";
  for (const auto& f : r.folds)
    out += fmt::format("{},{:.17g},{:.17g},{},{},{:.17g}\n", f.fold, f.auroc, f.accuracy, f.n_train, f.n_val,
                       f.loss_curve.empty() ? 0.0 : f.loss_curve.back());
  out += fmt::format("mean,{:.17g},{:.17g},,,\n", r.auroc_mean, r.accuracy_mean);
  out += fmt::format("std,{:.17g},{:.17g},,,\n", r.auroc_std, r.accuracy_std);
  return out;
}

GridCell select_grid_cell(const std::vector<GridCell>& table) {
  if (table.empty()) throw Error(ErrorKind::invalid, "empty lambda grid");
  const auto key = [](const GridCell& c) { return std::make_tuple(c.val_neg_total, c.lambda_cxr, c.lambda_ecg); };
  return *std::min_element(table.begin(), table.end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });
}

GridResult grid_search_lambda(const Dataset& ds, const std::vector<std::pair<double, double>>& grid,
                              const ArchConfig& arch, const ObjectiveConfig& obj, const RunConfig& run,
                              std::ostream* progress) {
  if (grid.empty()) throw Error(ErrorKind::invalid, "empty lambda grid");
  if (!(run.val_fraction > 0.0)) throw Error(ErrorKind::config, "grid search needs val_fraction > 0");
  GridResult out;
  for (const auto& [lc, le] : grid) {
    ObjectiveConfig cell_obj = obj;
    cell_obj.lambda_cxr = lc;
    cell_obj.lambda_ecg = le;
    const auto r = pretrain(ds, arch, cell_obj, run);
    double val = 0;
    for (const auto& row : r.history)
      if (row.split == "val") val = -row.loss.total;
    if (progress) *progress << fmt::format("lambda ({:g}, {:g}) val -total {:.6g}\n", lc, le, val);
    out.table.push_back({lc, le, val});
  }
  out.best = select_grid_cell(out.table);
  return out;
}

}  // namespace cardiovae
