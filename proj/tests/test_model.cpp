#include "doctest.h"

#include <random>

#include "cardiovae/model.hpp"
#include "test_util.hpp"

using namespace cardiovae;
using doctest::Approx;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.image_h = 8;
  a.image_w = 8;
  a.signal_len = 16;
  a.channels = {2, 3, 4};
  a.latent_dim = 3;
  a.head_hidden = 5;
  return a;
}

BasicModel<double> double_model(const ArchConfig& a, std::uint64_t seed) {
  return {make_layout(a), init_params(a, seed).cast<double>()};
}

Tensor random_image(const ArchConfig& a, std::mt19937_64& rng) {
  return testutil::random_tensor<float>({a.image_h, a.image_w, a.image_c}, rng, 0.0, 1.0);
}

Tensor random_signal(const ArchConfig& a, std::mt19937_64& rng) {
  return testutil::random_tensor<float>({1, a.signal_len}, rng, -1.0, 1.0);
}

}  // namespace

TEST_CASE("layout shape arithmetic") {
  SUBCASE("desk") {
    const auto L = make_layout(ArchConfig::desk());
    CHECK(L.cxr.conv_out_dims.back() == Dims{8, 8, 64});
    CHECK(L.ecg.conv_out_dims.back() == Dims{512, 64});
    CHECK(L.ecg.flat == 512 * 64);
    CHECK(L.cxr.tconv_out_dims.back() == Dims{64, 64, 1});
    CHECK(L.ecg.tconv_out_dims.back() == Dims{4096, 1});
  }
  SUBCASE("paper") {
    const auto L = make_layout(ArchConfig::paper());
    CHECK(L.cxr.conv_out_dims.back() == Dims{28, 28, 64});
    CHECK(L.ecg.conv_out_dims.back() == Dims{7500, 64});
    CHECK(L.ecg.flat == 480000);
    CHECK(L.ecg.tconv_out_dims.back() == Dims{60000, 1});
  }
  SUBCASE("degenerate") {
    ArchConfig a;
    a.signal_len = 0;
    CHECK_THROWS_AS(make_layout(a), Error);
    a = ArchConfig{};
    a.latent_dim = 0;
    CHECK_THROWS_AS(make_layout(a), Error);
  }
}

TEST_CASE("parameter names cover every layer") {
  const auto p = init_params(tiny_arch(), 1);
  for (const char* n :
       {"cxr_encoder.conv1", "cxr_encoder.conv2", "cxr_encoder.conv3", "cxr_encoder.fc_mu", "cxr_encoder.fc_logvar",
        "ecg_encoder.conv1", "ecg_encoder.conv2", "ecg_encoder.conv3", "ecg_encoder.fc_mu", "ecg_encoder.fc_logvar",
        "cxr_decoder.fc", "cxr_decoder.tconv1", "cxr_decoder.tconv2", "cxr_decoder.tconv3", "ecg_decoder.fc",
        "ecg_decoder.tconv1", "ecg_decoder.tconv2", "ecg_decoder.tconv3", "head.fc1", "head.fc2"}) {
    CHECK(p.contains(std::string(n) + ".weight"));
    CHECK(p.contains(std::string(n) + ".bias"));
  }
  CHECK(p.tensors().size() == 40);
  CHECK_NOTHROW(p.validate(make_layout(tiny_arch())));
  auto broken = p;
  broken.tensors().erase("head.fc2.bias");
  CHECK_THROWS_AS(broken.validate(make_layout(tiny_arch())), Error);
}

TEST_CASE("init_params is deterministic per seed") {
  const auto a = init_params(ArchConfig::desk(), 42);
  const auto b = init_params(ArchConfig::desk(), 42);
  const auto c = init_params(ArchConfig::desk(), 43);
  for (const auto& [name, t] : a.tensors()) {
    CHECK(testutil::bitwise_equal(t, b.at(name)));
  }
  CHECK_FALSE(testutil::bitwise_equal(a.at("cxr_encoder.conv1.weight"), c.at("cxr_encoder.conv1.weight")));
}

TEST_CASE("init_head redraws only the head") {
  const auto arch = tiny_arch();
  const auto layout = make_layout(arch);
  const auto a = init_params(arch, 5);
  auto b = a;
  init_head(b, layout, 99);
  for (const auto& [name, t] : a.tensors()) {
    if (name.rfind("head.", 0) == 0) continue;
    CHECK(testutil::bitwise_equal(t, b.at(name)));
  }
  CHECK_FALSE(testutil::bitwise_equal(a.at("head.fc1.weight"), b.at("head.fc1.weight")));
}

TEST_CASE("encoders: shapes, zero input, determinism, validation") {
  const auto arch = ArchConfig::desk();
  const auto m = make_model(arch, 3);
  std::mt19937_64 rng(3);
  const auto img = random_image(arch, rng);
  const auto sig = random_signal(arch, rng);

  const auto qc = encode_cxr(m, img);
  const auto qe = encode_ecg(m, sig);
  CHECK(qc.dim() == 16);
  CHECK(qe.dim() == 16);

  const auto qc2 = encode_cxr(m, img);
  CHECK(qc.mean == qc2.mean);
  CHECK(qc.log_var == qc2.log_var);

  const auto qz = encode_cxr(m, Tensor({64, 64, 1}));
  for (float v : qz.mean) CHECK(v == 0.0f);
  const auto qs = encode_ecg(m, Tensor({1, 4096}));
  for (float v : qs.mean) CHECK(v == 0.0f);

  CHECK(encode_ecg(m, sig.reshaped({4096})).mean == qe.mean);
  CHECK(encode_ecg(m, sig.reshaped({4096, 1})).mean == qe.mean);

  auto bad = img;
  bad[7] = 1.5f;
  CHECK_THROWS_AS(encode_cxr(m, bad), Error);
  try {
    encode_cxr(m, Tensor({64, 32, 1}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(e.axis() == "width");
  }
  CHECK_THROWS_AS(encode_ecg(m, Tensor({1, 4000})), ShapeError);
}

TEST_CASE("decoders: shapes and ranges") {
  const auto arch = ArchConfig::desk();
  const auto m = make_model(arch, 4);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 3; ++trial) {
    const auto z = standard_normal_draws<float>(rng, arch.latent_dim);
    const auto x = decode_cxr<float>(m, z);
    CHECK(x.dims() == Dims{64, 64, 1});
    for (float v : x.values()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
    const auto s = decode_ecg<float>(m, z);
    CHECK(s.dims() == Dims{1, 4096});
    CHECK(testutil::bitwise_equal(s, decode_ecg<float>(m, z)));
  }
  CHECK_THROWS_AS(decode_cxr<float>(m, std::vector<float>(15, 0.0f)), ShapeError);
}

TEST_CASE("encoder-decoder shape closure across arch configs") {
  std::mt19937_64 rng(5);
  for (auto [h, w, c, len] : std::vector<std::array<std::size_t, 4>>{
           {64, 64, 1, 4096}, {37, 50, 2, 1001}, {9, 9, 1, 7}, {1, 1, 1, 1}, {60, 64, 3, 100}}) {
    ArchConfig a = tiny_arch();
    a.image_h = h;
    a.image_w = w;
    a.image_c = c;
    a.signal_len = len;
    const auto m = make_model(a, 6);
    const auto img = random_image(a, rng);
    const auto sig = random_signal(a, rng);
    const auto eps = standard_normal_draws<float>(rng, a.latent_dim);
    CHECK(decode_cxr<float>(m, reparameterize<float>(encode_cxr(m, img), eps)).dims() == img.dims());
    CHECK(decode_ecg<float>(m, reparameterize<float>(encode_ecg(m, sig), eps)).dims() == sig.dims());
  }
}

TEST_CASE("extract_features") {
  const auto arch = tiny_arch();
  const auto m = make_model(arch, 7);
  std::mt19937_64 rng(7);
  const auto img = random_image(arch, rng);
  const auto sig = random_signal(arch, rng);
  const auto qc = encode_cxr(m, img), qe = encode_ecg(m, sig);

  CHECK(extract_features(m, &img, &sig, Modality::cxr) == qc.mean);
  CHECK(extract_features(m, &img, &sig, Modality::ecg) == qe.mean);

  const auto joint = extract_features(m, &img, &sig, Modality::joint);
  CHECK(joint.size() == arch.latent_dim);
  // Independent composition: precision-weighted mean with the unit prior.
  for (std::size_t d = 0; d < arch.latent_dim; ++d) {
    const double vc = std::max(std::exp(double(qc.log_var[d])), 1e-8);
    const double ve = std::max(std::exp(double(qe.log_var[d])), 1e-8);
    const double mu = (qc.mean[d] / vc + qe.mean[d] / ve) / (1.0 + 1.0 / vc + 1.0 / ve);
    CHECK(joint[d] == Approx(mu).epsilon(1e-5));
  }

  const auto only_img = extract_features<float>(m, &img, nullptr, Modality::joint);
  const auto with_prior = poe_fuse({qc}, true);
  CHECK(only_img == with_prior.mean);

  CHECK_THROWS_AS(extract_features<float>(m, nullptr, &sig, Modality::cxr), Error);
  CHECK_THROWS_AS(extract_features<float>(m, &img, nullptr, Modality::ecg), Error);
}

TEST_CASE("classify") {
  const auto arch = tiny_arch();
  auto m = make_model(arch, 8);
  const std::vector<float> f{0.3f, -1.2f, 0.8f};

  CHECK(classify<float>(m, f, false, nullptr) == classify<float>(m, f, false, nullptr));

  std::mt19937_64 r1(11), r2(11);
  CHECK(classify<float>(m, f, true, &r1) == classify<float>(m, f, true, &r2));
  CHECK_THROWS_AS(classify<float>(m, f, true, nullptr), Error);
  CHECK_THROWS_AS(classify<float>(m, std::vector<float>{1.0f}, false, nullptr), ShapeError);

  m.params.at("head.fc1.weight").fill(0.0f);
  m.params.at("head.fc2.weight").fill(0.0f);
  m.params.at("head.fc2.bias")[0] = 0.625f;
  CHECK(classify<float>(m, f, false, nullptr) == 0.625f);
}

TEST_CASE("dropout mask scales kept units by 1/(1-p)") {
  const auto arch = tiny_arch();
  const auto m = make_model(arch, 9);
  std::mt19937_64 rng(9);
  HeadTrace<float> t;
  classify<float>(m, std::vector<float>{1.0f, 2.0f, 3.0f}, true, &rng, &t);
  CHECK(t.mask.size() == arch.head_hidden);
  for (float v : t.mask) CHECK((v == 0.0f || v == 2.0f));
}

TEST_CASE("logit input gradient matches finite differences") {
  const auto arch = tiny_arch();
  const auto m = double_model(arch, 10);
  std::mt19937_64 rng(10);
  const auto img = testutil::random_tensor<double>({8, 8, 1}, rng, 0.2, 0.8);
  const auto sig = testutil::random_tensor<double>({1, 16}, rng, -1.0, 1.0);

  for (Modality mode : {Modality::cxr, Modality::ecg, Modality::joint}) {
    CAPTURE(modality_name(mode));
    if (mode != Modality::ecg) {
      GradFunction f = [&](const TensorD& x, TensorD* g) {
        const auto r = logit_input_gradient<double>(m, &x, &sig, mode);
        if (g) *g = r.image;
        return r.logit;
      };
      CHECK(gradient_check(f, img, 1e-6) < 1e-4);
    }
    if (mode != Modality::cxr) {
      GradFunction f = [&](const TensorD& x, TensorD* g) {
        const auto r = logit_input_gradient<double>(m, &img, &x, mode);
        if (g) *g = r.signal;
        return r.logit;
      };
      CHECK(gradient_check(f, sig, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("head backward matches finite differences on parameters") {
  const auto arch = tiny_arch();
  auto m = double_model(arch, 12);
  const std::vector<double> f{0.4, -0.9, 1.3};
  for (const char* name : {"head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"}) {
    CAPTURE(name);
    const TensorD x0 = m.params.at(name);
    GradFunction fn = [&](const TensorD& x, TensorD* g) {
      m.params.at(name) = x;
      HeadTrace<double> t;
      std::mt19937_64 rng(3);
      const double logit = classify<double>(m, f, true, &rng, &t);
      if (g) {
        auto grads = BasicModelParams<double>::zeros(m.layout);
        head_backward<double>(m, t, 1.0, &grads);
        *g = grads.at(name);
      }
      return logit;
    };
    CHECK(gradient_check(fn, x0, 1e-6) < 1e-4);
    m.params.at(name) = x0;
  }
}
