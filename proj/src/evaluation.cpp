#include "cardiovae/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include "cardiovae/data.hpp"

namespace cardiovae {

namespace {

void check_binary_labels(std::span<const int> labels) {
  for (int l : labels)
    if (l != 0 && l != 1) throw Error(ErrorKind::invalid, fmt::format("label {} is not 0 or 1", l));
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

double var_of(std::span<const double> v, double mean) {
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / double(v.size() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::invalid, "auroc: scores and labels differ in length");
  check_binary_labels(labels);
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("auroc: non-finite score");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorKind::invalid, "auroc needs both classes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

  // Ranks are 1-based; ties share the average rank. Twice the rank stays integral.
  double pos_rank2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double rank2 = double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) pos_rank2 += rank2;
    i = j;
  }
  const double u2 = pos_rank2 - double(n_pos) * double(n_pos + 1);
  return u2 / (2.0 * double(n_pos) * double(n_neg));
}

double accuracy(std::span<const double> logits, std::span<const int> labels, double threshold) {
  if (logits.size() != labels.size()) throw Error(ErrorKind::invalid, "accuracy: logits and labels differ in length");
  if (logits.empty()) throw Error(ErrorKind::invalid, "accuracy of an empty set");
  check_binary_labels(labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) hits += (logits[i] > threshold ? 1 : 0) == labels[i];
  return double(hits) / double(logits.size());
}

GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) throw NumericError("gaussian_stats needs at least 2 samples");
  const std::size_t d = features.front().size();
  if (d == 0) throw Error(ErrorKind::invalid, "gaussian_stats: empty feature vectors");
  const auto n = static_cast<Eigen::Index>(features.size());
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = features[static_cast<std::size_t>(i)];
    if (row.size() != d) throw ShapeError("feature", "gaussian_stats: feature rows differ in length");
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("gaussian_stats: non-finite feature");
      x(i, static_cast<Eigen::Index>(j)) = row[j];
    }
  }
  GaussianStats s;
  s.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - s.mean.transpose();
  s.cov = (c.transpose() * c) / double(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim() || std::size_t(a.cov.rows()) != a.dim() || std::size_t(b.cov.rows()) != b.dim())
    throw ShapeError("feature", fmt::format("frechet_distance: dimension {} vs {}", a.dim(), b.dim()));
  // Tr((S_a S_b)^(1/2)) = Tr((A^(1/2) S_b A^(1/2))^(1/2)), whose argument is symmetric PSD.
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  if (!std::isfinite(d)) throw NumericError("frechet_distance is not finite");
  if (d < -1e-6) throw NumericError(fmt::format("frechet_distance is negative ({})", d));
  return std::max(d, 0.0);
}

TTestResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw NumericError("welch_t_test needs at least 2 samples per group");
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = var_of(a, ma) / double(a.size()), vb = var_of(b, mb) / double(b.size());
  if (!(va > 0) || !(vb > 0)) throw NumericError("welch_t_test: a group has zero variance");
  TTestResult r;
  const double se2 = va + vb;
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / (va * va / double(a.size() - 1) + vb * vb / double(b.size() - 1));
  const boost::math::students_t dist(r.df);
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

IgResult integrated_gradients(std::span<const double> x, std::span<const double> baseline, std::size_t steps,
                              const ScalarGradFn& f) {
  if (steps < kMinIgSteps) throw Error(ErrorKind::invalid, fmt::format("integrated gradients needs >= {} steps", kMinIgSteps));
  if (x.size() != baseline.size()) throw ShapeError("input", "baseline and input differ in size");
  const std::size_t n = x.size();
  std::vector<double> point(n), grad(n), sum(n, 0.0);
  IgResult r;
  r.f_baseline = f(baseline, grad);
  for (std::size_t k = 1; k <= steps; ++k) {
    const double alpha = double(k) / double(steps);
    for (std::size_t i = 0; i < n; ++i) point[i] = baseline[i] + alpha * (x[i] - baseline[i]);
    const double fk = f(point, grad);
    if (k == steps) r.f_input = fk;
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(grad[i])) throw NumericError(fmt::format("non-finite gradient at step {}", k));
      sum[i] += grad[i];
    }
  }
  r.attributions.resize(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.attributions[i] = (x[i] - baseline[i]) * sum[i] / double(steps);
    total += r.attributions[i];
  }
  r.residual = std::abs(total - (r.f_input - r.f_baseline));
  return r;
}

AttributionMap integrated_gradients(const BasicModel<double>& m, const TensorD* image, const TensorD* signal,
                                    Modality mode, std::size_t steps, const TensorD* baseline_image,
                                    const TensorD* baseline_signal) {
  const bool use_img = image && mode != Modality::ecg;
  const bool use_sig = signal && mode != Modality::cxr;
  if (mode == Modality::cxr && !image) throw Error(ErrorKind::invalid, "cxr mode needs an image");
  if (mode == Modality::ecg && !signal) throw Error(ErrorKind::invalid, "ecg mode needs a signal");
  if (!use_img && !use_sig) throw Error(ErrorKind::invalid, "no modality available for attribution");

  AttributionMap out;
  out.mode = mode;
  out.steps = steps;
  if (use_img) {
    out.baseline_image = baseline_image ? *baseline_image : TensorD(image->dims());
    if (out.baseline_image.dims() != image->dims()) throw ShapeError("image", "image baseline dims differ");
  }
  if (use_sig) {
    out.baseline_signal = baseline_signal ? *baseline_signal : TensorD(signal->dims());
    if (out.baseline_signal.dims() != signal->dims()) throw ShapeError("signal", "signal baseline dims differ");
  }
  const std::size_t ni = use_img ? image->size() : 0, ns = use_sig ? signal->size() : 0;

  std::vector<double> x(ni + ns), base(ni + ns);
  if (use_img) {
    std::copy(image->values().begin(), image->values().end(), x.begin());
    std::copy(out.baseline_image.values().begin(), out.baseline_image.values().end(), base.begin());
  }
  if (use_sig) {
    std::copy(signal->values().begin(), signal->values().end(), x.begin() + ni);
    std::copy(out.baseline_signal.values().begin(), out.baseline_signal.values().end(), base.begin() + ni);
  }

  TensorD img_buf = use_img ? TensorD(image->dims()) : TensorD();
  TensorD sig_buf = use_sig ? TensorD(signal->dims()) : TensorD();
  const auto f = [&](std::span<const double> p, std::span<double> grad) {
    if (use_img) std::copy(p.begin(), p.begin() + ni, img_buf.values().begin());
    if (use_sig) std::copy(p.begin() + ni, p.end(), sig_buf.values().begin());
    const auto g = logit_input_gradient<double>(m, use_img ? &img_buf : nullptr, use_sig ? &sig_buf : nullptr, mode);
    if (use_img) std::copy(g.image.values().begin(), g.image.values().end(), grad.begin());
    if (use_sig) std::copy(g.signal.values().begin(), g.signal.values().end(), grad.begin() + ni);
    return g.logit;
  };
  const auto r = integrated_gradients(x, base, steps, f);
  if (use_img) out.image = TensorD(image->dims(), {r.attributions.begin(), r.attributions.begin() + ni});
  if (use_sig) out.signal = TensorD(signal->dims(), {r.attributions.begin() + ni, r.attributions.end()});
  out.f_input = r.f_input;
  out.f_baseline = r.f_baseline;
  out.residual = r.residual;
  return out;
}

std::string attribution_pgm(const TensorD& attr) {
  const auto& d = attr.dims();
  if (d.size() != 3) throw ShapeError("image", "attribution image must be (h, w, c)");
  const std::size_t h = d[0], w = d[1], c = d[2];
  std::vector<double> mag(h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t k = 0; k < c; ++k) mag[p] += std::abs(attr[p * c + k]);
  const double peak = *std::max_element(mag.begin(), mag.end());
  std::string out = fmt::format("P5\n{} {}\n255\n", w, h);
  for (double v : mag) out.push_back(static_cast<char>(peak > 0 ? std::lround(255.0 * v / peak) : 0));
  return out;
}

std::vector<std::filesystem::path> write_attribution(const std::filesystem::path& dir, const std::string& prefix,
                                                     const AttributionMap& map) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const auto open = [&](const std::string& suffix) {
    written.push_back(dir / (prefix + suffix));
    std::ofstream f(written.back(), std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot write " + written.back().string());
    return f;
  };
  if (!map.image.empty()) {
    written.push_back(dir / (prefix + "_image.tnsr"));
    write_tensor(written.back(), map.image.cast<float>());
    open("_image.pgm") << attribution_pgm(map.image);
  }
  if (!map.signal.empty()) {
    written.push_back(dir / (prefix + "_signal.tnsr"));
    write_tensor(written.back(), map.signal.cast<float>());
    auto f = open("_signal.csv");
    f << "index,attribution\n";
    for (std::size_t i = 0; i < map.signal.size(); ++i) f << fmt::format("{},{:.17g}\n", i, map.signal[i]);
  }
  auto f = open("_summary.txt");
  f << fmt::format("mode = {}\nsteps = {}\nf_input = {:.17g}\nf_baseline = {:.17g}\nresidual = {:.17g}\n",
                   modality_name(map.mode), map.steps, map.f_input, map.f_baseline, map.residual);
  return written;
}

}  // namespace cardiovae
