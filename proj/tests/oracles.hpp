#pragma once

// Independent reference computations shared by the unit and acceptance suites.
// None of these call into the library paths they are used to check.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace oracles {

inline double normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return std::exp(-0.5 * d * d / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

/// One-dimensional Gaussian experts multiplied pointwise on a grid and
/// renormalized by Riemann summation. Returns the grid density values.
inline std::vector<double> grid_product_density(const std::vector<std::pair<double, double>>& experts, double lo,
                                                double hi, double step) {
  std::vector<double> dens;
  for (double x = lo; x <= hi + 1e-12; x += step) {
    double p = 1.0;
    for (const auto& [m, v] : experts) p *= normal_pdf(x, m, v);
    dens.push_back(p);
  }
  double mass = 0;
  for (double v : dens) mass += v * step;
  for (double& v : dens) v /= mass;
  return dens;
}

/// Monte-Carlo estimate of KL(N(mean, var) || N(0, 1)) = E_q[log q - log p],
/// with its standard error.
struct McEstimate {
  double mean, stderr_;
};

inline McEstimate mc_kl_standard_normal(const std::vector<double>& mean, const std::vector<double>& var, std::size_t n,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  double sum = 0, sumsq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double logratio = 0;
    for (std::size_t d = 0; d < mean.size(); ++d) {
      const double z = mean[d] + std::sqrt(var[d]) * normal(rng);
      logratio += std::log(normal_pdf(z, mean[d], var[d])) - std::log(normal_pdf(z, 0.0, 1.0));
    }
    sum += logratio;
    sumsq += logratio * logratio;
  }
  const double m = sum / n;
  const double var_est = (sumsq - n * m * m) / (n - 1);
  return {m, std::sqrt(var_est / n)};
}

/// Pairwise AUROC: fraction of (positive, negative) pairs ranked correctly, ties count 1/2.
inline double brute_force_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double num = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1;
      if (scores[i] > scores[j]) num += 1;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return num / pairs;
}

}  // namespace oracles
