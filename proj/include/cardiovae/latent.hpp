#pragma once

// Diagonal-Gaussian algebra for the latent space: product-of-experts fusion,
// KL against N(0, I), reparameterized sampling, and their adjoints.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cardiovae/error.hpp"

namespace cardiovae {

/// exp(log_var) is floored here before any precision is formed.
inline constexpr double kVarianceFloor = 1e-8;

template <typename S>
struct BasicGaussian {
  std::vector<S> mean;
  std::vector<S> log_var;

  BasicGaussian() = default;
  BasicGaussian(std::vector<S> m, std::vector<S> lv) : mean(std::move(m)), log_var(std::move(lv)) { validate(); }

  static BasicGaussian standard(std::size_t dim) { return {std::vector<S>(dim, S(0)), std::vector<S>(dim, S(0))}; }

  std::size_t dim() const { return mean.size(); }

  S variance(std::size_t d) const { return std::max(std::exp(log_var[d]), S(kVarianceFloor)); }
  std::vector<S> variance() const {
    std::vector<S> v(dim());
    for (std::size_t d = 0; d < dim(); ++d) v[d] = variance(d);
    return v;
  }

  void validate() const {
    if (mean.size() != log_var.size())
      throw Error(ErrorKind::shape, "gaussian mean/log_var length mismatch: " + std::to_string(mean.size()) + " vs " +
                                        std::to_string(log_var.size()));
    for (std::size_t d = 0; d < mean.size(); ++d)
      if (!std::isfinite(mean[d]) || !std::isfinite(log_var[d])) throw NumericError("non-finite gaussian parameter");
  }
};

using DiagonalGaussian = BasicGaussian<double>;

/// d(loss)/d(mean), d(loss)/d(log_var) for one Gaussian.
template <typename S>
struct GaussianGrad {
  std::vector<S> mean;
  std::vector<S> log_var;

  explicit GaussianGrad(std::size_t dim = 0) : mean(dim, S(0)), log_var(dim, S(0)) {}
};

namespace detail {

template <typename S>
std::size_t common_dim(std::span<const BasicGaussian<S>> experts, bool include_prior) {
  if (experts.empty() && !include_prior) throw Error(ErrorKind::invalid, "poe_fuse: no experts and prior excluded");
  if (experts.empty()) return 0;
  const std::size_t dim = experts.front().dim();
  for (const auto& e : experts) {
    if (e.dim() != dim)
      throw Error(ErrorKind::shape, "poe_fuse: expert dimension mismatch (" + std::to_string(e.dim()) + " vs " +
                                        std::to_string(dim) + ")");
  }
  return dim;
}

template <typename S>
S dvar_dlogvar(const BasicGaussian<S>& g, std::size_t d) {
  const S v = std::exp(g.log_var[d]);
  return v > S(kVarianceFloor) ? v : S(0);
}

}  // namespace detail

/// Product of Gaussian experts: precisions add, means are precision weighted.
/// With `include_prior` the unit Gaussian joins as one more expert. A call
/// with no experts and the prior included needs `prior_dim`.
template <typename S>
BasicGaussian<S> poe_fuse(std::span<const BasicGaussian<S>> experts, bool include_prior = true,
                          std::size_t prior_dim = 0) {
  std::size_t dim = detail::common_dim(experts, include_prior);
  if (experts.empty()) dim = prior_dim;
  BasicGaussian<S> out;
  out.mean.assign(dim, S(0));
  out.log_var.assign(dim, S(0));
  for (std::size_t d = 0; d < dim; ++d) {
    S precision = include_prior ? S(1) : S(0);
    S weighted = S(0);  // prior mean is 0
    for (const auto& e : experts) {
      const S p = S(1) / e.variance(d);
      precision += p;
      weighted += e.mean[d] * p;
    }
    out.mean[d] = weighted / precision;
    out.log_var[d] = -std::log(precision);
  }
  return out;
}

template <typename S>
BasicGaussian<S> poe_fuse(std::initializer_list<BasicGaussian<S>> experts, bool include_prior = true,
                          std::size_t prior_dim = 0) {
  std::vector<BasicGaussian<S>> v(experts);
  return poe_fuse<S>(std::span<const BasicGaussian<S>>(v), include_prior, prior_dim);
}

/// Adjoint of poe_fuse: maps gradients on the fused (mean, log_var) onto each expert.
template <typename S>
std::vector<GaussianGrad<S>> poe_fuse_backward(std::span<const BasicGaussian<S>> experts, bool include_prior,
                                               const GaussianGrad<S>& grad_fused) {
  const auto fused = poe_fuse(experts, include_prior, grad_fused.mean.size());
  std::vector<GaussianGrad<S>> grads;
  grads.reserve(experts.size());
  for (const auto& e : experts) grads.emplace_back(e.dim());
  for (std::size_t d = 0; d < fused.dim(); ++d) {
    const S total_precision = std::exp(-fused.log_var[d]);
    for (std::size_t m = 0; m < experts.size(); ++m) {
      const auto& e = experts[m];
      const S var = e.variance(d);
      const S p = S(1) / var;
      grads[m].mean[d] = grad_fused.mean[d] * p / total_precision;
      // dp/dlog_var = -p on the unfloored branch, 0 on the floor.
      const S dp = detail::dvar_dlogvar(e, d) > S(0) ? -p : S(0);
      const S dloss_dp = (grad_fused.mean[d] * (e.mean[d] - fused.mean[d]) - grad_fused.log_var[d]) / total_precision;
      grads[m].log_var[d] = dloss_dp * dp;
    }
  }
  return grads;
}

/// KL(q || N(0, I)) = 0.5 sum(var + mean^2 - 1 - log var).
template <typename S>
S kl_standard_normal(const BasicGaussian<S>& q) {
  S kl = S(0);
  for (std::size_t d = 0; d < q.dim(); ++d) {
    const S var = q.variance(d);
    kl += var + q.mean[d] * q.mean[d] - S(1) - std::log(var);
  }
  return S(0.5) * kl;
}

/// Gradient of `scale * KL(q || N(0, I))`, accumulated into `grad`.
template <typename S>
void kl_standard_normal_backward(const BasicGaussian<S>& q, S scale, GaussianGrad<S>& grad) {
  for (std::size_t d = 0; d < q.dim(); ++d) {
    grad.mean[d] += scale * q.mean[d];
    const S dv = detail::dvar_dlogvar(q, d);
    grad.log_var[d] += scale * S(0.5) * (dv - (dv > S(0) ? S(1) : S(0)));
  }
}

/// z = mean + sqrt(var) * epsilon.
template <typename S>
std::vector<S> reparameterize(const BasicGaussian<S>& q, std::span<const S> epsilon) {
  if (epsilon.size() != q.dim())
    throw Error(ErrorKind::shape, "reparameterize: epsilon length " + std::to_string(epsilon.size()) +
                                      " != latent dim " + std::to_string(q.dim()));
  std::vector<S> z(q.dim());
  for (std::size_t d = 0; d < q.dim(); ++d) z[d] = q.mean[d] + std::sqrt(q.variance(d)) * epsilon[d];
  return z;
}

/// Accumulates d(loss)/d(q) given d(loss)/dz.
template <typename S>
void reparameterize_backward(const BasicGaussian<S>& q, std::span<const S> epsilon, std::span<const S> grad_z,
                             GaussianGrad<S>& grad) {
  for (std::size_t d = 0; d < q.dim(); ++d) {
    grad.mean[d] += grad_z[d];
    const S dv = detail::dvar_dlogvar(q, d);
    if (dv > S(0)) grad.log_var[d] += grad_z[d] * epsilon[d] * S(0.5) * std::sqrt(dv);
  }
}

template <typename S, typename Rng>
std::vector<S> standard_normal_draws(Rng& rng, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<S> out(n);
  for (auto& v : out) v = static_cast<S>(normal(rng));
  return out;
}

}  // namespace cardiovae
