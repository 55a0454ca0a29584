#include "cardiovae/model.hpp"

#include <cmath>

namespace cardiovae {

namespace {

constexpr std::size_t kKernel = 3;
constexpr std::size_t kStride = 2;
constexpr std::size_t kPad = 1;

LayerSpec conv(LayerKind kind, std::size_t cin, std::size_t cout, Activation act) {
  LayerSpec s;
  s.kind = kind;
  s.in_channels = cin;
  s.out_channels = cout;
  s.kernel = kKernel;
  s.stride = kStride;
  s.padding = kPad;
  s.activation = act;
  return s;
}

LayerSpec fc(std::size_t in, std::size_t out, Activation act) {
  LayerSpec s;
  s.kind = LayerKind::fc;
  s.in_channels = in;
  s.out_channels = out;
  s.activation = act;
  return s;
}

/// Output padding that makes the transposed layer land exactly on `target`.
std::size_t restoring_padding(std::size_t n, std::size_t target, const std::string& axis) {
  const std::size_t base = tconv_out_len(n, kKernel, kStride, kPad, 0);
  if (target < base || target - base >= kStride)
    throw ShapeError(axis, "cannot invert convolution " + std::to_string(target) + " -> " + std::to_string(n));
  return target - base;
}

StackLayout make_stack(const std::string& name, Dims input, const ArchConfig& a, bool two_d) {
  StackLayout st;
  st.name = name;
  st.input_dims = input;
  const LayerKind ck = two_d ? LayerKind::conv2d : LayerKind::conv1d;
  const LayerKind tk = two_d ? LayerKind::tconv2d : LayerKind::tconv1d;
  const std::size_t in_c = two_d ? input[2] : input[1];

  std::vector<Dims> pre_dims{input};
  std::size_t cin = in_c;
  for (std::size_t i = 0; i < 3; ++i) {
    st.convs.push_back(conv(ck, cin, a.channels[i], Activation::relu));
    st.conv_out_dims.push_back(output_dims(st.convs.back(), pre_dims.back()));
    pre_dims.push_back(st.conv_out_dims.back());
    cin = a.channels[i];
  }
  st.flat = dims_product(st.conv_out_dims.back());
  st.fc_mu = fc(st.flat, a.latent_dim, Activation::none);
  st.fc_logvar = fc(st.flat, a.latent_dim, Activation::none);
  st.dec_fc = fc(a.latent_dim, st.flat, Activation::relu);

  for (std::size_t i = 3; i-- > 0;) {
    const Dims& from = pre_dims[i + 1];
    const Dims& to = pre_dims[i];
    const std::size_t cout = i == 0 ? in_c : a.channels[i - 1];
    const Activation act = i != 0 ? Activation::relu : (two_d ? Activation::sigmoid : Activation::none);
    LayerSpec t = conv(tk, a.channels[i], cout, act);
    if (two_d) {
      t.output_padding_h = restoring_padding(from[0], to[0], "height");
      t.output_padding = restoring_padding(from[1], to[1], "width");
    } else {
      t.output_padding = restoring_padding(from[0], to[0], "length");
    }
    st.tconvs.push_back(t);
    st.tconv_out_dims.push_back(output_dims(t, from));
  }
  return st;
}

void init_layer(ModelParams& p, const std::string& name, const LayerSpec& s, std::mt19937_64& rng) {
  std::size_t fan_in = s.in_channels;
  if (s.kind == LayerKind::conv2d) fan_in *= s.kernel * s.kernel;
  if (s.kind == LayerKind::conv1d) fan_in *= s.kernel;
  if (s.is_transposed()) {
    // Each output position receives ceil(kernel/stride) taps per spatial axis.
    const std::size_t taps = (s.kernel + s.stride - 1) / s.stride;
    fan_in *= s.is_2d() ? taps * taps : taps;
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor w(weight_dims(s));
  for (auto& v : w.values()) v = static_cast<float>(uni(rng));
  p.set(name + ".weight", std::move(w));
  p.set(name + ".bias", Tensor(bias_dims(s)));
}

}  // namespace

void ArchConfig::validate() const {
  if (image_h < 1 || image_w < 1 || image_c < 1) throw Error(ErrorKind::invalid, "image dims must be positive");
  if (signal_len < 1) throw Error(ErrorKind::invalid, "signal length must be positive");
  for (auto c : channels)
    if (c < 1) throw Error(ErrorKind::invalid, "conv channels must be positive");
  if (latent_dim < 1) throw Error(ErrorKind::invalid, "latent dim must be positive");
  if (head_hidden < 1) throw Error(ErrorKind::invalid, "head hidden width must be positive");
  if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw Error(ErrorKind::invalid, "head dropout must be in [0, 1)");
}

ModelLayout make_layout(const ArchConfig& arch) {
  arch.validate();
  ModelLayout L;
  L.arch = arch;
  L.cxr = make_stack("cxr", {arch.image_h, arch.image_w, arch.image_c}, arch, true);
  L.ecg = make_stack("ecg", {arch.signal_len, 1}, arch, false);
  L.head_fc1 = fc(arch.latent_dim, arch.head_hidden, Activation::relu);
  L.head_fc2 = fc(arch.head_hidden, 1, Activation::none);
  return L;
}

std::vector<std::pair<std::string, LayerSpec>> ModelLayout::layers() const {
  std::vector<std::pair<std::string, LayerSpec>> out;
  for (const StackLayout* st : {&cxr, &ecg}) {
    const auto pre = st->encoder_prefix();
    for (std::size_t i = 0; i < st->convs.size(); ++i) out.emplace_back(pre + ".conv" + std::to_string(i + 1), st->convs[i]);
    out.emplace_back(pre + ".fc_mu", st->fc_mu);
    out.emplace_back(pre + ".fc_logvar", st->fc_logvar);
  }
  for (const StackLayout* st : {&cxr, &ecg}) {
    const auto pre = st->decoder_prefix();
    out.emplace_back(pre + ".fc", st->dec_fc);
    for (std::size_t i = 0; i < st->tconvs.size(); ++i)
      out.emplace_back(pre + ".tconv" + std::to_string(i + 1), st->tconvs[i]);
  }
  out.emplace_back("head.fc1", head_fc1);
  out.emplace_back("head.fc2", head_fc2);
  return out;
}

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  const auto layout = make_layout(arch);
  ModelParams p;
  std::mt19937_64 rng(seed);
  for (const auto& [name, spec] : layout.layers()) {
    if (name.rfind("head.", 0) == 0) continue;
    init_layer(p, name, spec, rng);
  }
  init_head(p, layout, seed);
  return p;
}

void init_head(ModelParams& params, const ModelLayout& layout, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x68656164ULL);  // "head"
  init_layer(params, "head.fc1", layout.head_fc1, rng);
  init_layer(params, "head.fc2", layout.head_fc2, rng);
}

Dims canonical_signal_dims(const Dims& d, std::size_t length) {
  const bool ok = (d.size() == 1 && d[0] == length) || (d.size() == 2 && d[0] == 1 && d[1] == length) ||
                  (d.size() == 2 && d[0] == length && d[1] == 1);
  if (!ok) throw ShapeError("length", "signal dims " + dims_string(d) + " do not match length " + std::to_string(length));
  return {length, 1};
}

}  // namespace cardiovae
