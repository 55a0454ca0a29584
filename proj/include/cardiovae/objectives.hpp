#pragma once

// Pre-training objectives: the image-only, signal-only and joint ELBO streams,
// their sum, the likelihood families, the KL weight schedule, and the
// fine-tuning cross-entropy.
//
// Sign conventions: every stream value is an ELBO (to be maximized). Gradients
// written by the evaluators are of -total, the quantity the optimizer minimizes.

#include <cmath>
#include <numbers>
#include <random>

#include "cardiovae/model.hpp"

namespace cardiovae {

/// Linear KL-weight ramp: min(step / anneal_steps, 1) * max_beta.
struct BetaSchedule {
  std::size_t anneal_steps = 1;
  double max_beta = 1.0;
};

/// Per-sample terms are summed over dims; batches are averaged (or summed).
enum class BatchReduction { mean, sum };

struct ObjectiveConfig {
  double lambda_cxr = 1.0;
  double lambda_ecg = 1.0;
  BetaSchedule beta;
  BatchReduction reduction = BatchReduction::mean;

  void validate() const {
    if (!(lambda_cxr >= 0.0) || !(lambda_ecg >= 0.0)) throw Error(ErrorKind::config, "lambda weights must be >= 0");
    if (beta.anneal_steps < 1) throw Error(ErrorKind::config, "anneal_steps must be >= 1");
    if (!(beta.max_beta >= 0.0 && beta.max_beta <= 1.0)) throw Error(ErrorKind::config, "max_beta must be in [0, 1]");
  }
};

enum class StreamMode { tri, joint_only };

inline const char* stream_mode_name(StreamMode m) { return m == StreamMode::tri ? "tri" : "joint-only"; }

/// Which ELBO streams an evaluation runs.
struct StreamSet {
  bool cxr = false, ecg = false, joint = false;

  static StreamSet for_mode(StreamMode m) { return m == StreamMode::tri ? StreamSet{true, true, true} : StreamSet{false, false, true}; }
};

/// recon_* are unweighted log-likelihoods; elbo_* include the lambda weights.
/// joint_recon_* are the joint stream's reconstruction terms.
struct LossBreakdown {
  double recon_cxr = 0, recon_ecg = 0;
  double joint_recon_cxr = 0, joint_recon_ecg = 0;
  double kl_cxr = 0, kl_ecg = 0, kl_joint = 0;
  double elbo_cxr = 0, elbo_ecg = 0, elbo_joint = 0;
  double total = 0;

  /// total = elbo_cxr + elbo_ecg + elbo_joint, always in this order.
  void finalize() { total = (elbo_cxr + elbo_ecg) + elbo_joint; }

  /// Adds `w * other` field-wise (total is re-derived, not accumulated).
  void add_scaled(const LossBreakdown& o, double w) {
    recon_cxr += w * o.recon_cxr;
    recon_ecg += w * o.recon_ecg;
    joint_recon_cxr += w * o.joint_recon_cxr;
    joint_recon_ecg += w * o.joint_recon_ecg;
    kl_cxr += w * o.kl_cxr;
    kl_ecg += w * o.kl_ecg;
    kl_joint += w * o.kl_joint;
    elbo_cxr += w * o.elbo_cxr;
    elbo_ecg += w * o.elbo_ecg;
    elbo_joint += w * o.elbo_joint;
    finalize();
  }
};

/// Total from three stream ELBOs.
inline LossBreakdown combine_streams(double elbo_cxr, double elbo_ecg, double elbo_joint) {
  LossBreakdown b;
  b.elbo_cxr = elbo_cxr;
  b.elbo_ecg = elbo_ecg;
  b.elbo_joint = elbo_joint;
  b.finalize();
  return b;
}

inline constexpr double kBernoulliClamp = 1e-7;

/// Bernoulli log-likelihood sum(x log p + (1-x) log(1-p)), p clamped to [1e-7, 1-1e-7].
template <typename S>
S recon_loglik_cxr(const BasicTensor<S>& x, const BasicTensor<S>& x_hat) {
  if (x.size() != x_hat.size()) throw ShapeError("size", "image reconstruction size mismatch");
  S ll = S(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S p = std::clamp(x_hat[i], S(kBernoulliClamp), S(1 - kBernoulliClamp));
    ll += x[i] * std::log(p) + (S(1) - x[i]) * std::log(S(1) - p);
  }
  return ll;
}

/// d(recon_loglik_cxr)/d(x_hat); zero where the clamp is active.
template <typename S>
BasicTensor<S> recon_loglik_cxr_grad(const BasicTensor<S>& x, const BasicTensor<S>& x_hat) {
  BasicTensor<S> g(x_hat.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S p = x_hat[i];
    if (p < S(kBernoulliClamp) || p > S(1 - kBernoulliClamp)) continue;
    g[i] = x[i] / p - (S(1) - x[i]) / (S(1) - p);
  }
  return g;
}

/// Unit-variance Gaussian log-likelihood: -0.5 sum (x - x_hat)^2 - (L/2) log 2 pi.
template <typename S>
S recon_loglik_ecg(const BasicTensor<S>& x, const BasicTensor<S>& x_hat) {
  if (x.size() != x_hat.size()) throw ShapeError("length", "signal reconstruction length mismatch");
  S sq = S(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S r = x[i] - x_hat[i];
    sq += r * r;
  }
  return S(-0.5) * sq - S(0.5) * static_cast<S>(x.size()) * static_cast<S>(std::log(2.0 * std::numbers::pi));
}

template <typename S>
BasicTensor<S> recon_loglik_ecg_grad(const BasicTensor<S>& x, const BasicTensor<S>& x_hat) {
  BasicTensor<S> g(x_hat.dims());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] - x_hat[i];
  return g;
}

inline double beta_at(std::size_t step, const BetaSchedule& s) {
  if (s.anneal_steps < 1) throw Error(ErrorKind::invalid, "anneal_steps must be >= 1");
  const double frac = std::min(static_cast<double>(step) / static_cast<double>(s.anneal_steps), 1.0);
  return frac * s.max_beta;
}

/// max(l, 0) - l y + log(1 + exp(-|l|)).
inline double bce_loss(double logit, int label) {
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

/// d(bce_loss)/d(logit) = sigmoid(l) - y.
inline double bce_grad(double logit, int label) {
  const double sig = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
  return sig - label;
}

/// Reparameterization noise for each stream (entries unused by a mode may be empty).
template <typename S>
struct StreamNoise {
  std::vector<S> cxr, ecg, joint;

  /// Draws cxr, ecg, joint in that order, only for the requested streams.
  static StreamNoise draw(std::mt19937_64& rng, std::size_t dim, StreamSet streams) {
    StreamNoise n;
    if (streams.cxr) n.cxr = standard_normal_draws<S>(rng, dim);
    if (streams.ecg) n.ecg = standard_normal_draws<S>(rng, dim);
    if (streams.joint) n.joint = standard_normal_draws<S>(rng, dim);
    return n;
  }
  static StreamNoise zeros(std::size_t dim) {
    return {std::vector<S>(dim, S(0)), std::vector<S>(dim, S(0)), std::vector<S>(dim, S(0))};
  }
};

/// Runs the selected streams on one sample. When `grads` is non-null,
/// accumulates grad_scale * d(-total)/d(params) into it.
template <typename S>
LossBreakdown evaluate_streams(const BasicModel<S>& m, const BasicTensor<S>* image, const BasicTensor<S>* signal,
                               StreamSet streams, double beta, const ObjectiveConfig& cfg, const StreamNoise<S>& noise,
                               BasicModelParams<S>* grads = nullptr, double grad_scale = 1.0);

/// Image-only stream: lambda_cxr log p(x | z) - beta KL(q_cxr || p), z ~ q_cxr.
template <typename S>
LossBreakdown stream_loss_cxr(const BasicModel<S>& m, const BasicTensor<S>& image, double beta,
                              const ObjectiveConfig& cfg, std::span<const S> eps) {
  StreamNoise<S> n;
  n.cxr.assign(eps.begin(), eps.end());
  return evaluate_streams<S>(m, &image, nullptr, {true, false, false}, beta, cfg, n);
}

template <typename S>
LossBreakdown stream_loss_ecg(const BasicModel<S>& m, const BasicTensor<S>& signal, double beta,
                              const ObjectiveConfig& cfg, std::span<const S> eps) {
  StreamNoise<S> n;
  n.ecg.assign(eps.begin(), eps.end());
  return evaluate_streams<S>(m, nullptr, &signal, {false, true, false}, beta, cfg, n);
}

/// Joint stream: one z from PoE(q_cxr, q_ecg, prior) feeds both decoders.
template <typename S>
LossBreakdown stream_loss_joint(const BasicModel<S>& m, const BasicTensor<S>& image, const BasicTensor<S>& signal,
                                double beta, const ObjectiveConfig& cfg, std::span<const S> eps) {
  StreamNoise<S> n;
  n.joint.assign(eps.begin(), eps.end());
  return evaluate_streams<S>(m, &image, &signal, {false, false, true}, beta, cfg, n);
}

/// All streams of `mode` on one sample; joint-only leaves the unimodal terms at zero.
template <typename S>
LossBreakdown total_loss(const BasicModel<S>& m, const BasicTensor<S>& image, const BasicTensor<S>& signal, double beta,
                         const ObjectiveConfig& cfg, const StreamNoise<S>& noise, StreamMode mode = StreamMode::tri,
                         BasicModelParams<S>* grads = nullptr, double grad_scale = 1.0) {
  return evaluate_streams<S>(m, &image, &signal, StreamSet::for_mode(mode), beta, cfg, noise, grads, grad_scale);
}

// ---------------------------------------------------------------------------

template <typename S>
LossBreakdown evaluate_streams(const BasicModel<S>& m, const BasicTensor<S>* image, const BasicTensor<S>* signal,
                               StreamSet streams, double beta, const ObjectiveConfig& cfg, const StreamNoise<S>& noise,
                               BasicModelParams<S>* grads, double grad_scale) {
  const bool need_img = streams.cxr || streams.joint;
  const bool need_sig = streams.ecg || streams.joint;
  if (need_img && !image) throw Error(ErrorKind::invalid, "stream evaluation needs an image");
  if (need_sig && !signal) throw Error(ErrorKind::invalid, "stream evaluation needs a signal");

  const std::size_t D = m.arch().latent_dim;
  const S lc = static_cast<S>(cfg.lambda_cxr), le = static_cast<S>(cfg.lambda_ecg);
  const S b = static_cast<S>(beta);
  const S scale = static_cast<S>(grad_scale);
  LossBreakdown out;

  EncoderTrace<S> ti, ts;
  BasicGaussian<S> qc, qe;
  if (need_img) qc = encode_cxr(m, *image, &ti);
  if (need_sig) qe = encode_ecg(m, *signal, &ts);
  GaussianGrad<S> gc(D), ge(D);

  const auto signal_target = [&](const BasicTensor<S>& s) { return s.reshaped({1, m.arch().signal_len}); };

  if (streams.cxr) {
    StackTrace<S> td;
    const auto z = reparameterize<S>(qc, noise.cxr);
    const auto xh = decode_cxr<S>(m, z, &td);
    const S ll = recon_loglik_cxr(*image, xh);
    const S kl = kl_standard_normal(qc);
    out.recon_cxr = ll;
    out.kl_cxr = kl;
    out.elbo_cxr = static_cast<double>(lc * ll - b * kl);
    if (grads) {
      auto g = recon_loglik_cxr_grad(*image, xh);
      for (auto& v : g.values()) v *= -scale * lc;
      const auto gz = decoder_backward(m, m.layout.cxr, td, g, grads);
      reparameterize_backward<S>(qc, noise.cxr, gz, gc);
      kl_standard_normal_backward(qc, scale * b, gc);
    }
  }
  if (streams.ecg) {
    StackTrace<S> td;
    const auto target = signal_target(*signal);
    const auto z = reparameterize<S>(qe, noise.ecg);
    const auto xh = decode_ecg<S>(m, z, &td);
    const S ll = recon_loglik_ecg(target, xh);
    const S kl = kl_standard_normal(qe);
    out.recon_ecg = ll;
    out.kl_ecg = kl;
    out.elbo_ecg = static_cast<double>(le * ll - b * kl);
    if (grads) {
      auto g = recon_loglik_ecg_grad(target, xh);
      for (auto& v : g.values()) v *= -scale * le;
      const auto gz = decoder_backward(m, m.layout.ecg, td, g, grads);
      reparameterize_backward<S>(qe, noise.ecg, gz, ge);
      kl_standard_normal_backward(qe, scale * b, ge);
    }
  }
  if (streams.joint) {
    const std::vector<BasicGaussian<S>> experts{qc, qe};
    const auto q = poe_fuse<S>(std::span<const BasicGaussian<S>>(experts), true);
    const auto z = reparameterize<S>(q, noise.joint);
    StackTrace<S> tdc, tde;
    const auto target = signal_target(*signal);
    const auto xc = decode_cxr<S>(m, z, &tdc);
    const auto xe = decode_ecg<S>(m, z, &tde);
    const S llc = recon_loglik_cxr(*image, xc);
    const S lle = recon_loglik_ecg(target, xe);
    const S kl = kl_standard_normal(q);
    out.joint_recon_cxr = llc;
    out.joint_recon_ecg = lle;
    out.kl_joint = kl;
    out.elbo_joint = static_cast<double>(lc * llc + le * lle - b * kl);
    if (grads) {
      auto g1 = recon_loglik_cxr_grad(*image, xc);
      for (auto& v : g1.values()) v *= -scale * lc;
      auto g2 = recon_loglik_ecg_grad(target, xe);
      for (auto& v : g2.values()) v *= -scale * le;
      auto gz = decoder_backward(m, m.layout.cxr, tdc, g1, grads);
      const auto gz2 = decoder_backward(m, m.layout.ecg, tde, g2, grads);
      for (std::size_t d = 0; d < D; ++d) gz[d] += gz2[d];
      GaussianGrad<S> gq(D);
      reparameterize_backward<S>(q, noise.joint, gz, gq);
      kl_standard_normal_backward(q, scale * b, gq);
      const auto eg = poe_fuse_backward<S>(std::span<const BasicGaussian<S>>(experts), true, gq);
      for (std::size_t d = 0; d < D; ++d) {
        gc.mean[d] += eg[0].mean[d];
        gc.log_var[d] += eg[0].log_var[d];
        ge.mean[d] += eg[1].mean[d];
        ge.log_var[d] += eg[1].log_var[d];
      }
    }
  }
  if (grads) {
    if (need_img) encoder_backward(m, m.layout.cxr, ti, gc, grads);
    if (need_sig) encoder_backward(m, m.layout.ecg, ts, ge, grads);
  }
  out.finalize();
  return out;
}

}  // namespace cardiovae
