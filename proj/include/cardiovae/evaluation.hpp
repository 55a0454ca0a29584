#pragma once

// Classification metrics, Fréchet distance between Gaussian feature
// statistics, Welch's t-test, and integrated-gradients attribution.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cardiovae/model.hpp"

namespace cardiovae {

/// Probability that a random positive outranks a random negative, ties 0.5.
/// Computed from average ranks (Mann-Whitney U).
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Fraction of samples with (logit > threshold) == label.
double accuracy(std::span<const double> logits, std::span<const int> labels, double threshold = 0.0);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

/// Sample mean and unbiased covariance; needs at least two rows of equal length.
GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

struct TTestResult {
  double t = 0;
  double df = 0;  // Welch-Satterthwaite
  double p = 1;   // two-sided
};

TTestResult welch_t_test(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// Integrated gradients

inline constexpr std::size_t kMinIgSteps = 8;

/// Returns F(x) and writes dF/dx into `grad`.
using ScalarGradFn = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct IgResult {
  std::vector<double> attributions;
  double f_input = 0, f_baseline = 0;
  double residual = 0;  // |sum(attributions) - (f_input - f_baseline)|
};

/// Right Riemann sum over k = 1..steps along the straight path from `baseline` to `x`.
IgResult integrated_gradients(std::span<const double> x, std::span<const double> baseline, std::size_t steps,
                              const ScalarGradFn& f);

struct AttributionMap {
  Modality mode = Modality::joint;
  TensorD image, signal;                    // attributions; empty when the modality is unused
  TensorD baseline_image, baseline_signal;  // empty when unused
  std::size_t steps = 0;
  double f_input = 0, f_baseline = 0;
  double residual = 0;
};

/// Attributions of the eval-mode classifier logit. Baselines default to zeros.
AttributionMap integrated_gradients(const BasicModel<double>& m, const TensorD* image, const TensorD* signal,
                                    Modality mode, std::size_t steps, const TensorD* baseline_image = nullptr,
                                    const TensorD* baseline_signal = nullptr);

/// Writes <prefix>_image.tnsr/.pgm, <prefix>_signal.tnsr/.csv (for the modalities
/// present) and <prefix>_summary.txt into `dir`. Returns the written paths.
std::vector<std::filesystem::path> write_attribution(const std::filesystem::path& dir, const std::string& prefix,
                                                     const AttributionMap& map);

/// P5 graymap of |attribution| summed over channels, scaled so the maximum is 255.
std::string attribution_pgm(const TensorD& image_attr);

}  // namespace cardiovae
