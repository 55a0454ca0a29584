#pragma once

// The two-modality VAE: image and signal encoders (three stride-2 convs +
// mean/log-variance heads), mirrored transposed-conv decoders, and the
// two-layer classification head used after pre-training.

#include <array>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cardiovae/latent.hpp"
#include "cardiovae/numerics.hpp"
#include "cardiovae/tensor.hpp"

namespace cardiovae {

struct ArchConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t image_c = 1;
  std::size_t signal_len = 4096;
  std::array<std::size_t, 3> channels{16, 32, 64};
  std::size_t latent_dim = 16;
  std::size_t head_hidden = 128;
  double head_dropout = 0.5;

  /// 64x64 images, 4096-sample signals, 16 latent dims.
  static ArchConfig desk() { return {}; }
  /// 224x224 images, 60000-sample signals, 64 latent dims.
  static ArchConfig paper() {
    ArchConfig a;
    a.image_h = a.image_w = 224;
    a.signal_len = 60000;
    a.latent_dim = 64;
    return a;
  }

  void validate() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Layer specs and intermediate dims for one modality's encoder/decoder pair.
struct StackLayout {
  std::string name;                  // "cxr" or "ecg"
  Dims input_dims;                   // (H,W,C) or (L,1)
  std::vector<LayerSpec> convs;      // encoder conv1..3
  std::vector<Dims> conv_out_dims;   // activation dims after each conv
  std::size_t flat = 0;              // flattened width after conv3
  LayerSpec fc_mu, fc_logvar;
  LayerSpec dec_fc;                  // latent -> flat
  std::vector<LayerSpec> tconvs;     // decoder tconv1..3
  std::vector<Dims> tconv_out_dims;

  std::string encoder_prefix() const { return name + "_encoder"; }
  std::string decoder_prefix() const { return name + "_decoder"; }
};

struct ModelLayout {
  ArchConfig arch;
  StackLayout cxr, ecg;
  LayerSpec head_fc1, head_fc2;

  /// Every parameterized layer by qualified name ("cxr_encoder.conv1", ...), in a fixed order.
  std::vector<std::pair<std::string, LayerSpec>> layers() const;
};

ModelLayout make_layout(const ArchConfig& arch);

/// Named weight/bias tensors: "<layer>.weight", "<layer>.bias".
template <typename S>
class BasicModelParams {
 public:
  using TensorT = BasicTensor<S>;

  BasicModelParams() = default;

  /// All-zero tensors shaped for `layout`.
  static BasicModelParams zeros(const ModelLayout& layout) {
    BasicModelParams p;
    for (const auto& [name, spec] : layout.layers()) {
      p.tensors_.emplace(name + ".weight", TensorT(weight_dims(spec)));
      p.tensors_.emplace(name + ".bias", TensorT(bias_dims(spec)));
    }
    return p;
  }

  const TensorT& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error(ErrorKind::invalid, "missing parameter tensor '" + name + "'");
    return it->second;
  }
  TensorT& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error(ErrorKind::invalid, "missing parameter tensor '" + name + "'");
    return it->second;
  }
  TensorT* find(const std::string& name) {
    auto it = tensors_.find(name);
    return it == tensors_.end() ? nullptr : &it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  void set(const std::string& name, TensorT t) { tensors_[name] = std::move(t); }

  const std::map<std::string, TensorT>& tensors() const { return tensors_; }
  std::map<std::string, TensorT>& tensors() { return tensors_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  void zero() {
    for (auto& [_, t] : tensors_) t.fill(S(0));
  }

  template <typename T>
  BasicModelParams<T> cast() const {
    BasicModelParams<T> out;
    for (const auto& [name, t] : tensors_) out.set(name, t.template cast<T>());
    return out;
  }

  /// Throws unless every layer tensor of `layout` is present with the right dims and finite.
  void validate(const ModelLayout& layout) const;

 private:
  std::map<std::string, TensorT> tensors_;
};

using ModelParams = BasicModelParams<float>;

/// Deterministic He-style uniform init (bound sqrt(6 / fan_in)); biases zero.
ModelParams init_params(const ArchConfig& arch, std::uint64_t seed);

/// Re-draws only head.* tensors from `seed`.
void init_head(ModelParams& params, const ModelLayout& layout, std::uint64_t seed);

template <typename S>
struct BasicModel {
  ModelLayout layout;
  BasicModelParams<S> params;

  const ArchConfig& arch() const { return layout.arch; }
};

using Model = BasicModel<float>;

inline Model make_model(const ArchConfig& arch, std::uint64_t seed) { return {make_layout(arch), init_params(arch, seed)}; }

/// Activations kept for the backward pass. acts[0] is the input.
template <typename S>
struct StackTrace {
  std::vector<BasicTensor<S>> acts;
};

template <typename S>
struct EncoderTrace {
  StackTrace<S> convs;
  BasicGaussian<S> posterior;
};

template <typename S>
struct HeadTrace {
  BasicTensor<S> features, hidden, dropped;
  std::vector<S> mask;  // per-unit dropout multiplier (empty in eval mode)
};

/// Feature source for fine-tuning and attribution.
enum class Modality { cxr, ecg, joint };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::cxr: return "cxr";
    case Modality::ecg: return "ecg";
    case Modality::joint: return "joint";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Forward/backward passes (templated over float and double).

/// Image posterior q(z | image). Pixels must lie in [0, 1].
template <typename S>
BasicGaussian<S> encode_cxr(const BasicModel<S>& m, const BasicTensor<S>& image, EncoderTrace<S>* trace = nullptr);

/// Signal posterior q(z | signal). Accepts (1,L), (L) or (L,1).
template <typename S>
BasicGaussian<S> encode_ecg(const BasicModel<S>& m, const BasicTensor<S>& signal, EncoderTrace<S>* trace = nullptr);

/// Bernoulli means, dims (H,W,C), each in (0,1).
template <typename S>
BasicTensor<S> decode_cxr(const BasicModel<S>& m, std::span<const S> z, StackTrace<S>* trace = nullptr);

/// Gaussian means, dims (1,L).
template <typename S>
BasicTensor<S> decode_ecg(const BasicModel<S>& m, std::span<const S> z, StackTrace<S>* trace = nullptr);

/// Backprop from posterior gradients to parameters (if `grads`) and to the input.
template <typename S>
BasicTensor<S> encoder_backward(const BasicModel<S>& m, const StackLayout& stack, const EncoderTrace<S>& trace,
                                const GaussianGrad<S>& grad, std::type_identity_t<BasicModelParams<S>>* grads, bool want_input_grad = false);

/// Backprop from d(loss)/d(decoder output) to parameters (if `grads`); returns d(loss)/dz.
template <typename S>
std::vector<S> decoder_backward(const BasicModel<S>& m, const StackLayout& stack, const StackTrace<S>& trace,
                                const BasicTensor<S>& grad_out, std::type_identity_t<BasicModelParams<S>>* grads);

/// Posterior mean used as the fine-tuning feature vector. `joint` fuses the
/// available modalities with the unit prior; unimodal modes need that modality.
template <typename S>
std::vector<S> extract_features(const BasicModel<S>& m, const BasicTensor<S>* image, const BasicTensor<S>* signal,
                                Modality mode);

/// fc1 -> ReLU -> dropout (train only) -> fc2. `dropout_rng` is required in train mode.
template <typename S>
S classify(const BasicModel<S>& m, std::span<const S> features, bool train_mode, std::mt19937_64* dropout_rng,
           HeadTrace<S>* trace = nullptr);

/// Accumulates head.* gradients of `grad_logit * logit`; returns d(logit)/d(features) scaled likewise.
template <typename S>
std::vector<S> head_backward(const BasicModel<S>& m, const HeadTrace<S>& trace, S grad_logit,
                             std::type_identity_t<BasicModelParams<S>>* grads);

/// Gradient of the eval-mode logit with respect to the raw inputs, through the
/// frozen encoders and the head. Missing modalities yield empty tensors.
template <typename S>
struct InputGradient {
  S logit{};
  BasicTensor<S> image, signal;
};

template <typename S>
InputGradient<S> logit_input_gradient(const BasicModel<S>& m, const BasicTensor<S>* image,
                                      const BasicTensor<S>* signal, Modality mode);

/// Returns (L,1) signal dims view of an accepted signal tensor.
Dims canonical_signal_dims(const Dims& d, std::size_t length);

}  // namespace cardiovae

#include "cardiovae/model_impl.hpp"
