#pragma once

// Template definitions for model.hpp.

namespace cardiovae {

template <typename S>
void BasicModelParams<S>::validate(const ModelLayout& layout) const {
  for (const auto& [name, spec] : layout.layers()) {
    for (const auto& [suffix, dims] : {std::pair{std::string(".weight"), weight_dims(spec)},
                                       std::pair{std::string(".bias"), bias_dims(spec)}}) {
      auto it = tensors_.find(name + suffix);
      if (it == tensors_.end()) throw Error(ErrorKind::invalid, "missing parameter tensor '" + name + suffix + "'");
      if (it->second.dims() != dims)
        throw ShapeError("weights", "parameter '" + name + suffix + "' has dims " + dims_string(it->second.dims()) +
                                        ", expected " + dims_string(dims));
      it->second.require_finite("parameter '" + name + suffix + "'");
    }
  }
}

namespace detail {

template <typename S>
const BasicTensor<S>& weight(const BasicModelParams<S>& p, const std::string& layer) {
  return p.at(layer + ".weight");
}
template <typename S>
const BasicTensor<S>& bias(const BasicModelParams<S>& p, const std::string& layer) {
  return p.at(layer + ".bias");
}

template <typename S>
BasicTensor<S>* grad_of(BasicModelParams<S>* grads, const std::string& name) {
  return grads ? &grads->at(name) : nullptr;
}

template <typename S>
BasicGaussian<S> encode_stack(const BasicModel<S>& m, const StackLayout& st, BasicTensor<S> x, EncoderTrace<S>* trace) {
  const auto& p = m.params;
  const std::string pre = st.encoder_prefix();
  std::vector<BasicTensor<S>> acts;
  acts.reserve(st.convs.size() + 1);
  acts.push_back(std::move(x));
  for (std::size_t i = 0; i < st.convs.size(); ++i) {
    const std::string layer = pre + ".conv" + std::to_string(i + 1);
    acts.push_back(forward(st.convs[i], weight(p, layer), bias(p, layer), acts.back()));
  }
  const auto flat = acts.back().reshaped({st.flat});
  auto mu = forward(st.fc_mu, weight(p, pre + ".fc_mu"), bias(p, pre + ".fc_mu"), flat);
  auto lv = forward(st.fc_logvar, weight(p, pre + ".fc_logvar"), bias(p, pre + ".fc_logvar"), flat);
  BasicGaussian<S> q(std::move(mu.storage()), std::move(lv.storage()));
  if (trace) {
    trace->convs.acts = std::move(acts);
    trace->posterior = q;
  }
  return q;
}

template <typename S>
BasicTensor<S> decode_stack(const BasicModel<S>& m, const StackLayout& st, std::span<const S> z, StackTrace<S>* trace) {
  if (z.size() != m.arch().latent_dim)
    throw ShapeError("latent", "decoder expects latent of length " + std::to_string(m.arch().latent_dim) + ", got " +
                                   std::to_string(z.size()));
  const auto& p = m.params;
  const std::string pre = st.decoder_prefix();
  std::vector<BasicTensor<S>> acts;
  acts.reserve(st.tconvs.size() + 2);
  acts.emplace_back(Dims{z.size()}, std::vector<S>(z.begin(), z.end()));
  acts.push_back(forward(st.dec_fc, weight(p, pre + ".fc"), bias(p, pre + ".fc"), acts.back())
                     .reshaped(st.conv_out_dims.back()));
  for (std::size_t i = 0; i < st.tconvs.size(); ++i) {
    const std::string layer = pre + ".tconv" + std::to_string(i + 1);
    acts.push_back(forward(st.tconvs[i], weight(p, layer), bias(p, layer), acts.back()));
  }
  BasicTensor<S> out = acts.back();
  if (trace) trace->acts = std::move(acts);
  return out;
}

template <typename S>
void check_image(const ArchConfig& a, const BasicTensor<S>& x) {
  const Dims want{a.image_h, a.image_w, a.image_c};
  if (x.dims() != want) {
    static const char* axes[] = {"height", "width", "channels"};
    std::string axis = "rank";
    if (x.rank() == 3)
      for (int i = 0; i < 3; ++i)
        if (x.dims()[i] != want[i]) {
          axis = axes[i];
          break;
        }
    throw ShapeError(axis, "image dims " + dims_string(x.dims()) + " do not match arch " + dims_string(want));
  }
  for (S v : x.values())
    if (!(v >= S(0) && v <= S(1))) throw Error(ErrorKind::invalid, "image pixels must lie in [0, 1]");
}

}  // namespace detail

template <typename S>
BasicGaussian<S> encode_cxr(const BasicModel<S>& m, const BasicTensor<S>& image, EncoderTrace<S>* trace) {
  detail::check_image(m.arch(), image);
  return detail::encode_stack(m, m.layout.cxr, image, trace);
}

template <typename S>
BasicGaussian<S> encode_ecg(const BasicModel<S>& m, const BasicTensor<S>& signal, EncoderTrace<S>* trace) {
  signal.require_finite("signal input");
  return detail::encode_stack(m, m.layout.ecg, signal.reshaped(canonical_signal_dims(signal.dims(), m.arch().signal_len)),
                              trace);
}

template <typename S>
BasicTensor<S> decode_cxr(const BasicModel<S>& m, std::span<const S> z, StackTrace<S>* trace) {
  return detail::decode_stack(m, m.layout.cxr, z, trace);
}

template <typename S>
BasicTensor<S> decode_ecg(const BasicModel<S>& m, std::span<const S> z, StackTrace<S>* trace) {
  return detail::decode_stack(m, m.layout.ecg, z, trace).reshaped({1, m.arch().signal_len});
}

template <typename S>
BasicTensor<S> encoder_backward(const BasicModel<S>& m, const StackLayout& st, const EncoderTrace<S>& trace,
                                const GaussianGrad<S>& grad, std::type_identity_t<BasicModelParams<S>>* grads, bool want_input_grad) {
  using detail::grad_of;
  const auto& p = m.params;
  const std::string pre = st.encoder_prefix();
  const auto& acts = trace.convs.acts;
  const auto flat = acts.back().reshaped({st.flat});
  const std::size_t D = grad.mean.size();

  BasicTensor<S> mu(Dims{D}, trace.posterior.mean), lv(Dims{D}, trace.posterior.log_var);
  auto g_flat = backward(st.fc_mu, p.at(pre + ".fc_mu.weight"), flat, mu, BasicTensor<S>(Dims{D}, grad.mean),
                         grad_of(grads, pre + ".fc_mu.weight"), grad_of(grads, pre + ".fc_mu.bias"));
  auto g_lv = backward(st.fc_logvar, p.at(pre + ".fc_logvar.weight"), flat, lv, BasicTensor<S>(Dims{D}, grad.log_var),
                       grad_of(grads, pre + ".fc_logvar.weight"), grad_of(grads, pre + ".fc_logvar.bias"));
  for (std::size_t i = 0; i < g_flat.size(); ++i) g_flat[i] += g_lv[i];

  BasicTensor<S> g = g_flat.reshaped(acts.back().dims());
  for (std::size_t i = st.convs.size(); i-- > 0;) {
    if (i == 0 && !want_input_grad && grads) {
      // Input gradient not needed: still accumulate conv1 parameter grads.
      backward(st.convs[0], p.at(pre + ".conv1.weight"), acts[0], acts[1], std::move(g),
               grad_of(grads, pre + ".conv1.weight"), grad_of(grads, pre + ".conv1.bias"));
      return {};
    }
    const std::string layer = pre + ".conv" + std::to_string(i + 1);
    g = backward(st.convs[i], p.at(layer + ".weight"), acts[i], acts[i + 1], std::move(g),
                 grad_of(grads, layer + ".weight"), grad_of(grads, layer + ".bias"));
  }
  return g;
}

template <typename S>
std::vector<S> decoder_backward(const BasicModel<S>& m, const StackLayout& st, const StackTrace<S>& trace,
                                const BasicTensor<S>& grad_out, std::type_identity_t<BasicModelParams<S>>* grads) {
  using detail::grad_of;
  const auto& p = m.params;
  const std::string pre = st.decoder_prefix();
  const auto& acts = trace.acts;
  BasicTensor<S> g = grad_out.reshaped(acts.back().dims());
  for (std::size_t i = st.tconvs.size(); i-- > 0;) {
    const std::string layer = pre + ".tconv" + std::to_string(i + 1);
    g = backward(st.tconvs[i], p.at(layer + ".weight"), acts[i + 1], acts[i + 2], std::move(g),
                 grad_of(grads, layer + ".weight"), grad_of(grads, layer + ".bias"));
  }
  g = backward(st.dec_fc, p.at(pre + ".fc.weight"), acts[0], acts[1].reshaped({st.flat}), g.reshaped({st.flat}),
               grad_of(grads, pre + ".fc.weight"), grad_of(grads, pre + ".fc.bias"));
  return std::move(g.storage());
}

template <typename S>
std::vector<S> extract_features(const BasicModel<S>& m, const BasicTensor<S>* image, const BasicTensor<S>* signal,
                                Modality mode) {
  switch (mode) {
    case Modality::cxr:
      if (!image) throw Error(ErrorKind::invalid, "cxr features need an image");
      return encode_cxr(m, *image).mean;
    case Modality::ecg:
      if (!signal) throw Error(ErrorKind::invalid, "ecg features need a signal");
      return encode_ecg(m, *signal).mean;
    case Modality::joint: {
      if (!image && !signal) throw Error(ErrorKind::invalid, "joint features need at least one modality");
      std::vector<BasicGaussian<S>> experts;
      if (image) experts.push_back(encode_cxr(m, *image));
      if (signal) experts.push_back(encode_ecg(m, *signal));
      return poe_fuse<S>(std::span<const BasicGaussian<S>>(experts), true).mean;
    }
  }
  return {};
}

template <typename S>
S classify(const BasicModel<S>& m, std::span<const S> features, bool train_mode, std::mt19937_64* dropout_rng,
           HeadTrace<S>* trace) {
  const auto& L = m.layout;
  if (features.size() != L.arch.latent_dim)
    throw ShapeError("features", "head expects " + std::to_string(L.arch.latent_dim) + " features, got " +
                                     std::to_string(features.size()));
  BasicTensor<S> f(Dims{features.size()}, std::vector<S>(features.begin(), features.end()));
  auto hidden = forward(L.head_fc1, m.params.at("head.fc1.weight"), m.params.at("head.fc1.bias"), f);
  BasicTensor<S> dropped = hidden;
  std::vector<S> mask;
  if (train_mode && L.arch.head_dropout > 0.0) {
    if (!dropout_rng) throw Error(ErrorKind::invalid, "classify: train mode needs a dropout rng");
    const double keep = 1.0 - L.arch.head_dropout;
    std::bernoulli_distribution bern(keep);
    mask.resize(hidden.size());
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      mask[i] = bern(*dropout_rng) ? S(1.0 / keep) : S(0);
      dropped[i] *= mask[i];
    }
  }
  auto out = forward(L.head_fc2, m.params.at("head.fc2.weight"), m.params.at("head.fc2.bias"), dropped);
  if (trace) {
    trace->features = std::move(f);
    trace->hidden = std::move(hidden);
    trace->dropped = std::move(dropped);
    trace->mask = std::move(mask);
  }
  return out[0];
}

template <typename S>
std::vector<S> head_backward(const BasicModel<S>& m, const HeadTrace<S>& trace, S grad_logit,
                             std::type_identity_t<BasicModelParams<S>>* grads) {
  using detail::grad_of;
  const auto& L = m.layout;
  BasicTensor<S> logit_dummy(Dims{1});
  auto g = backward(L.head_fc2, m.params.at("head.fc2.weight"), trace.dropped, logit_dummy,
                    BasicTensor<S>(Dims{1}, {grad_logit}), grad_of(grads, "head.fc2.weight"),
                    grad_of(grads, "head.fc2.bias"));
  if (!trace.mask.empty())
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= trace.mask[i];
  g = backward(L.head_fc1, m.params.at("head.fc1.weight"), trace.features, trace.hidden, std::move(g),
               grad_of(grads, "head.fc1.weight"), grad_of(grads, "head.fc1.bias"));
  return std::move(g.storage());
}

template <typename S>
InputGradient<S> logit_input_gradient(const BasicModel<S>& m, const BasicTensor<S>* image,
                                      const BasicTensor<S>* signal, Modality mode) {
  const bool use_img = image && mode != Modality::ecg;
  const bool use_sig = signal && mode != Modality::cxr;
  if (mode == Modality::cxr && !image) throw Error(ErrorKind::invalid, "cxr mode needs an image");
  if (mode == Modality::ecg && !signal) throw Error(ErrorKind::invalid, "ecg mode needs a signal");
  if (!use_img && !use_sig) throw Error(ErrorKind::invalid, "no modality available for attribution");

  EncoderTrace<S> ti, ts;
  std::vector<BasicGaussian<S>> experts;
  if (use_img) experts.push_back(encode_cxr(m, *image, &ti));
  if (use_sig) experts.push_back(encode_ecg(m, *signal, &ts));

  std::vector<S> features;
  if (mode == Modality::joint) {
    features = poe_fuse<S>(std::span<const BasicGaussian<S>>(experts), true).mean;
  } else {
    features = experts.front().mean;
  }
  HeadTrace<S> ht;
  InputGradient<S> out;
  out.logit = classify(m, std::span<const S>(features), false, nullptr, &ht);
  const auto g_feat = head_backward<S>(m, ht, S(1), nullptr);

  std::vector<GaussianGrad<S>> expert_grads;
  if (mode == Modality::joint) {
    GaussianGrad<S> gf(g_feat.size());
    gf.mean = g_feat;
    expert_grads = poe_fuse_backward<S>(std::span<const BasicGaussian<S>>(experts), true, gf);
  } else {
    GaussianGrad<S> g(g_feat.size());
    g.mean = g_feat;
    expert_grads.push_back(std::move(g));
  }
  std::size_t k = 0;
  if (use_img) {
    out.image = encoder_backward(m, m.layout.cxr, ti, expert_grads[k++], nullptr, true)
                    .reshaped(image->dims());
  }
  if (use_sig) {
    out.signal = encoder_backward(m, m.layout.ecg, ts, expert_grads[k++], nullptr, true)
                     .reshaped(signal->dims());
  }
  return out;
}

}  // namespace cardiovae
