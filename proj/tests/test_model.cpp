#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "wstatt/gradcheck.hpp"
#include "wstatt/model.hpp"
#include "wstatt/rng.hpp"

using namespace wstatt;

namespace {

ModelConfig small_config(ModelMode mode = ModelMode::Wstatt) {
  ModelConfig cfg;
  cfg.sat_channels = 3;
  cfg.weather_channels = 2;
  cfg.classes = 4;
  cfg.conv_widths = {4, 6, 8};
  cfg.lstm_hidden_sat = 8;
  cfg.lstm_hidden_wx = 4;
  cfg.mode = mode;
  cfg.patch_px = 16;
  return cfg;
}

TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

void zero_prefix(ParamStore& params, const std::string& prefix) {
  for (auto& e : params.entries())
    if (e.name.rfind(prefix, 0) == 0) e.value.setZero();
}

}  // namespace

TEST_CASE("encode_satellite default geometry: 24 x 256 x 8 x 8 from P=64") {
  ModelConfig cfg;  // paper-scale defaults [32,64,128], Dh 128
  cfg.sat_channels = 10;
  cfg.classes = 6;
  cfg.patch_px = 64;
  ParamStore params;
  init_params(cfg, 1, params);
  Rng rng(2);
  auto sat = random_tensor({24, 10, 64, 64}, rng, 0, 1);
  SatEncoderCache cache;
  auto h_s = encode_satellite(sat, cfg, params, cache);
  CHECK(h_s.shape() == Shape{24, 256, 8, 8});
  CHECK(cache.keep_out.size() == 3);
  CHECK(cache.keep_out[0].shape() == Shape{24, 32, 64, 64});
  CHECK(cache.keep_out[1].shape() == Shape{24, 64, 32, 32});
  CHECK(cache.keep_out[2].shape() == Shape{24, 128, 16, 16});
}

TEST_CASE("encode_satellite: shared weights give identical embeddings for identical frames") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 3, params);
  Rng rng(4);
  auto sat = random_tensor({3, 3, 16, 16}, rng, 0, 1);
  // make frame 2 identical to frame 0
  std::copy(sat.data(), sat.data() + 3 * 16 * 16, sat.data() + 2 * 3 * 16 * 16);
  SatEncoderCache cache;
  encode_satellite(sat, cfg, params, cache);
  const auto& z = cache.down_out.back();  // T x C x H' x W'
  Index frame = z.dim(1) * z.dim(2) * z.dim(3);
  for (Index i = 0; i < frame; ++i) CHECK(z[i] == z[2 * frame + i]);
}

TEST_CASE("encode_satellite: zero-weight LSTM gives all-zero H_S") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 5, params);
  zero_prefix(params, "sat_lstm");
  Rng rng(6);
  auto sat = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  SatEncoderCache cache;
  auto h_s = encode_satellite(sat, cfg, params, cache);
  for (Index i = 0; i < h_s.size(); ++i) CHECK(h_s[i] == 0.0);
}

TEST_CASE("encode_satellite rejects patches not divisible by 2^levels") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 7, params);
  Rng rng(8);
  auto sat = random_tensor({2, 3, 12, 12}, rng);
  SatEncoderCache cache;
  CHECK_THROWS_AS(encode_satellite(sat, cfg, params, cache), Error);
}

TEST_CASE("encode_weather shapes and zero-weight case") {
  ModelConfig cfg;
  cfg.sat_channels = 10;
  cfg.weather_channels = 7;
  cfg.classes = 6;
  cfg.lstm_hidden_wx = 32;
  ParamStore params;
  init_params(cfg, 9, params);
  Rng rng(10);
  auto weather = random_tensor({365, 7, 1, 1}, rng, 0, 1);
  WxEncoderCache cache;
  auto h_w = encode_weather(weather, cfg, params, cache);
  CHECK(h_w.shape() == Shape{365, 64});

  zero_prefix(params, "wx_lstm");
  WxEncoderCache cache2;
  auto h0 = encode_weather(weather, cfg, params, cache2);
  for (Index i = 0; i < h0.size(); ++i) CHECK(h0[i] == 0.0);
}

TEST_CASE("encode_weather: reversing input swaps direction roles when weights match") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 11, params);
  // copy fwd weights onto bwd so both directions share parameters
  for (const char* g : {"f", "i", "o", "g"}) {
    params.at(std::string("wx_lstm.bwd.w_h_") + g).value =
        params.at(std::string("wx_lstm.fwd.w_h_") + g).value;
    params.at(std::string("wx_lstm.bwd.w_z_") + g).value =
        params.at(std::string("wx_lstm.fwd.w_z_") + g).value;
  }
  Rng rng(12);
  Index t = 9;
  auto weather = random_tensor({t, 2, 1, 1}, rng, 0, 1);
  TensorD reversed(weather.shape());
  for (Index d = 0; d < t; ++d)
    std::copy(weather.data() + d * 2, weather.data() + (d + 1) * 2,
              reversed.data() + (t - 1 - d) * 2);

  WxEncoderCache c1, c2;
  auto h = encode_weather(weather, cfg, params, c1);
  auto hr = encode_weather(reversed, cfg, params, c2);
  Index dh = 4;
  for (Index d = 0; d < t; ++d)
    for (Index j = 0; j < dh; ++j) {
      CHECK(hr(d, j) == doctest::Approx(h(t - 1 - d, dh + j)).epsilon(1e-12));
      CHECK(hr(d, dh + j) == doctest::Approx(h(t - 1 - d, j)).epsilon(1e-12));
    }
}

TEST_CASE("align_weather selection rule") {
  auto idx = align_weather_indices(365, 24);
  CHECK(idx.size() == 24);
  CHECK(idx[0] == 14);
  CHECK(idx[1] == 29);
  CHECK(idx[23] == 359);
  for (size_t i = 0; i < 24; ++i) CHECK(idx[i] == static_cast<Index>(15 * (i + 1) - 1));

  auto same = align_weather_indices(7, 7);
  for (Index i = 0; i < 7; ++i) CHECK(same[static_cast<size_t>(i)] == i);

  auto trunc = align_weather_indices(182, 12);
  CHECK(trunc.back() == 179);

  CHECK_THROWS_AS(align_weather_indices(5, 6), Error);

  Rng rng(13);
  auto h_w = random_tensor({10, 3}, rng);
  auto sel = align_weather(h_w, 5);  // stride 2, indices 1,3,5,7,9
  CHECK(sel.shape() == Shape{5, 3});
  for (Index t = 0; t < 5; ++t)
    for (Index c = 0; c < 3; ++c) CHECK(sel(t, c) == h_w(2 * t + 1, c));
}

TEST_CASE("fuse broadcasts weather embeddings and concatenates channels") {
  Rng rng(14);
  auto h_s = random_tensor({2, 6, 4, 4}, rng);
  auto hs_w = random_tensor({2, 3}, rng);
  auto fused = fuse(h_s, hs_w);
  CHECK(fused.shape() == Shape{2, 9, 4, 4});
  for (Index t = 0; t < 2; ++t) {
    for (Index c = 0; c < 6; ++c)
      for (Index p = 0; p < 16; ++p)
        CHECK(fused.data()[(t * 9 + c) * 16 + p] == h_s.data()[(t * 6 + c) * 16 + p]);
    for (Index c = 0; c < 3; ++c)
      for (Index p = 0; p < 16; ++p)
        CHECK(fused.data()[(t * 9 + 6 + c) * 16 + p] == hs_w(t, c));
  }

  // default sizes: 2*128 + 2*32 = 320 fused channels
  ModelConfig dflt;
  CHECK(dflt.fused_channels() == 320);

  // zero weather embeddings leave satellite channels untouched, weather zero
  TensorD zero_w({2, 3});
  auto fz = fuse(h_s, zero_w);
  for (Index t = 0; t < 2; ++t)
    for (Index c = 6; c < 9; ++c)
      for (Index p = 0; p < 16; ++p) CHECK(fz.data()[(t * 9 + c) * 16 + p] == 0.0);
}

TEST_CASE("attend: equal embeddings give uniform weights; T=1 gives 1") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 15, params);
  Index d = cfg.fused_channels();

  Rng rng(16);
  TensorD one_step = random_tensor({1, d, 2, 2}, rng);
  TensorD equal({4, d, 2, 2});
  for (Index t = 0; t < 4; ++t)
    std::copy(one_step.data(), one_step.data() + d * 4, equal.data() + t * d * 4);

  AttendCache cache;
  auto alpha = attend(equal, cfg, params, cache);
  CHECK(alpha.shape() == Shape{4, 2, 2});
  for (Index i = 0; i < alpha.size(); ++i) CHECK(alpha[i] == doctest::Approx(0.25));

  AttendCache c1;
  auto a1 = attend(one_step, cfg, params, c1);
  for (Index i = 0; i < a1.size(); ++i) CHECK(a1[i] == doctest::Approx(1.0));
}

TEST_CASE("attend: truncation renormalizes the remaining logits") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 17, params);
  Index d = cfg.fused_channels();
  Rng rng(18);
  auto h_sw = random_tensor({24, d, 2, 2}, rng);

  AttendCache full_cache;
  attend(h_sw, cfg, params, full_cache);

  TensorD first12({12, d, 2, 2});
  std::copy(h_sw.data(), h_sw.data() + first12.size(), first12.data());
  AttendCache t_cache;
  auto alpha12 = attend(first12, cfg, params, t_cache);

  // manual: softmax of the first 12 full-run logits
  for (Index i = 0; i < 2; ++i)
    for (Index k = 0; k < 2; ++k) {
      double m = -1e300;
      for (Index t = 0; t < 12; ++t) m = std::max(m, full_cache.logits(t, i, k));
      double z = 0;
      for (Index t = 0; t < 12; ++t) z += std::exp(full_cache.logits(t, i, k) - m);
      for (Index t = 0; t < 12; ++t) {
        double want = std::exp(full_cache.logits(t, i, k) - m) / z;
        CHECK(alpha12(t, i, k) == doctest::Approx(want).epsilon(1e-10));
      }
      double sum = 0;
      for (Index t = 0; t < 12; ++t) sum += alpha12(t, i, k);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("attend honors the optional hidden layer") {
  auto cfg = small_config();
  cfg.attention_hidden = 5;
  ParamStore params;
  init_params(cfg, 19, params);
  CHECK(params.has("attn.hidden.weight"));
  Rng rng(20);
  auto h_sw = random_tensor({3, cfg.fused_channels(), 2, 2}, rng);
  AttendCache cache;
  auto alpha = attend(h_sw, cfg, params, cache);
  for (Index i = 0; i < 2; ++i)
    for (Index k = 0; k < 2; ++k) {
      double sum = 0;
      for (Index t = 0; t < 3; ++t) sum += alpha(t, i, k);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("aggregate: one-hot selects, uniform averages, matches brute force") {
  Rng rng(21);
  auto h_sw = random_tensor({5, 3, 2, 2}, rng);

  TensorD onehot({5, 2, 2});
  for (Index i = 0; i < 4; ++i) onehot.data()[3 * 4 + i] = 1.0;  // t = 3
  auto picked = aggregate(h_sw, onehot);
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < 4; ++p)
      CHECK(picked.data()[c * 4 + p] == h_sw.data()[(3 * 3 + c) * 4 + p]);

  auto two = random_tensor({2, 3, 2, 2}, rng);
  TensorD uni = TensorD::constant({2, 2, 2}, 0.5);
  auto mean = aggregate(two, uni);
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < 4; ++p)
      CHECK(mean.data()[c * 4 + p] ==
            doctest::Approx(0.5 * (two.data()[c * 4 + p] + two.data()[(3 + c) * 4 + p])));

  // brute-force oracle on random alpha
  auto alpha = random_tensor({5, 2, 2}, rng, 0.01, 1.0);
  auto got = aggregate(h_sw, alpha);
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 2; ++i)
      for (Index k = 0; k < 2; ++k) {
        double want = 0;
        for (Index t = 0; t < 5; ++t) want += alpha(t, i, k) * h_sw(t, c, i, k);
        CHECK(std::abs(got(c, i, k) - want) <= 1e-12);
      }
}

TEST_CASE("aggregate_skips matches brute force with upsampled alpha") {
  Rng rng(22);
  std::vector<TensorD> skips;
  skips.push_back(random_tensor({3, 2, 4, 4}, rng));
  skips.push_back(random_tensor({3, 4, 2, 2}, rng));
  auto alpha = random_tensor({3, 2, 2}, rng, 0.01, 1.0);
  auto agg = aggregate_skips(skips, alpha);
  REQUIRE(agg.size() == 2);
  CHECK(agg[0].shape() == Shape{2, 4, 4});
  for (Index c = 0; c < 2; ++c)
    for (Index i = 0; i < 4; ++i)
      for (Index k = 0; k < 4; ++k) {
        double want = 0;
        for (Index t = 0; t < 3; ++t) want += alpha(t, i / 2, k / 2) * skips[0](t, c, i, k);
        CHECK(std::abs(agg[0](c, i, k) - want) <= 1e-12);
      }
}

TEST_CASE("decode geometry: 3 levels from the bottleneck back to the patch") {
  auto cfg = small_config();
  cfg.classes = 5;
  ParamStore params;
  init_params(cfg, 23, params);
  Rng rng(24);
  auto sat = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  auto weather = random_tensor({30, 2, 1, 1}, rng, 0, 1);
  auto res = forward(sat, weather, cfg, params);
  CHECK(res.logits.shape() == Shape{5, 16, 16});
  CHECK(res.probs.shape() == Shape{5, 16, 16});
}

TEST_CASE("forward: per-pixel probabilities sum to one") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 25, params);
  Rng rng(26);
  auto sat = random_tensor({4, 3, 16, 16}, rng, 0, 1);
  auto weather = random_tensor({61, 2, 1, 1}, rng, 0, 1);
  auto res = forward(sat, weather, cfg, params);
  for (Index i = 0; i < 16; ++i)
    for (Index k = 0; k < 16; ++k) {
      double sum = 0;
      for (Index c = 0; c < cfg.classes; ++c) sum += res.probs(c, i, k);
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  // attention contract
  for (Index i = 0; i < res.attention.alpha.dim(1); ++i)
    for (Index k = 0; k < res.attention.alpha.dim(2); ++k) {
      double sum = 0;
      for (Index t = 0; t < 4; ++t) {
        CHECK(res.attention.alpha(t, i, k) > 0.0);
        sum += res.attention.alpha(t, i, k);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("statt ablation equals wstatt with a zeroed weather path") {
  auto wcfg = small_config(ModelMode::Wstatt);
  auto scfg = small_config(ModelMode::StattAblation);
  ParamStore wparams, sparams;
  init_params(wcfg, 27, wparams);
  init_params(scfg, 27, sparams);

  // silence the weather path in the wstatt model
  zero_prefix(wparams, "wx_lstm");

  // copy every shared tensor; slice out weather columns where shapes differ
  Index sat_d = 2 * wcfg.lstm_hidden_sat;
  Index wx_d = 2 * wcfg.lstm_hidden_wx;
  for (auto& se : sparams.entries()) {
    const auto& we = wparams.at(se.name);
    if (se.value.same_shape(we.value)) {
      se.value = we.value;
    } else if (se.name == "attn.weight") {
      for (Index c = 0; c < sat_d; ++c) se.value[c] = we.value[c];
    } else if (se.name == "dec.l2.kernel") {
      // input channels: [0, sat_d) fused satellite, skip channels after the
      // weather block
      Index w_out = se.value.dim(0);
      Index s_in = se.value.dim(1);
      for (Index o = 0; o < w_out; ++o)
        for (Index ci = 0; ci < s_in; ++ci) {
          Index wi = ci < sat_d ? ci : ci + wx_d;
          for (Index a = 0; a < 3; ++a)
            for (Index b = 0; b < 3; ++b) se.value(o, ci, a, b) = we.value(o, wi, a, b);
        }
    } else {
      FAIL("unexpected shape mismatch for ", se.name);
    }
  }

  Rng rng(28);
  auto sat = random_tensor({3, 3, 16, 16}, rng, 0, 1);
  auto weather = random_tensor({45, 2, 1, 1}, rng, 0, 1);
  auto wres = forward(sat, weather, wcfg, wparams);
  auto sres = forward(sat, TensorD(), scfg, sparams);
  for (Index i = 0; i < wres.probs.size(); ++i)
    CHECK(wres.probs[i] == doctest::Approx(sres.probs[i]).epsilon(1e-12));
}

TEST_CASE("swapping two identical-content timestamps leaves the output unchanged") {
  auto cfg = small_config();
  ParamStore params;
  init_params(cfg, 29, params);
  Rng rng(30);
  auto sat = random_tensor({4, 3, 16, 16}, rng, 0, 1);
  Index frame = 3 * 16 * 16;
  std::copy(sat.data(), sat.data() + frame, sat.data() + 2 * frame);  // t2 := t0
  auto weather = random_tensor({61, 2, 1, 1}, rng, 0, 1);

  auto base = forward(sat, weather, cfg, params);
  TensorD swapped = sat;
  for (Index i = 0; i < frame; ++i)
    std::swap(swapped.data()[i], swapped.data()[2 * frame + i]);
  auto after = forward(swapped, weather, cfg, params);
  for (Index i = 0; i < base.probs.size(); ++i) CHECK(base.probs[i] == after.probs[i]);
}

TEST_CASE("predict_early: months=12 equals full forward, truncation shortens") {
  auto cfg = small_config();
  cfg.sat_step_days = 15;
  ParamStore params;
  init_params(cfg, 31, params);
  Rng rng(32);
  auto sat = random_tensor({24, 3, 16, 16}, rng, 0, 1);
  auto weather = random_tensor({365, 2, 1, 1}, rng, 0, 1);

  auto full = forward(sat, weather, cfg, params);
  auto early12 = predict_early(sat, 15, weather, 1, 12, cfg, params);
  auto full_map = argmax_labels(full.probs);
  for (Index i = 0; i < full_map.size(); ++i)
    CHECK(early12.label_map[i] == full_map[i]);
  for (Index i = 0; i < full.probs.size(); ++i)
    CHECK(early12.result.probs[i] == full.probs[i]);

  auto early6 = predict_early(sat, 15, weather, 1, 6, cfg, params);
  CHECK(early6.result.attention.truncation_t == 12);
  CHECK(early6.result.attention.alpha.dim(0) == 12);
  for (Index i = 0; i < early6.result.attention.alpha.dim(1); ++i)
    for (Index k = 0; k < early6.result.attention.alpha.dim(2); ++k) {
      double sum = 0;
      for (Index t = 0; t < 12; ++t) sum += early6.result.attention.alpha(t, i, k);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }

  auto early8 = predict_early(sat, 15, weather, 1, 8, cfg, params);
  CHECK(early8.result.attention.truncation_t == 16);
}

TEST_CASE("backward end to end matches finite differences on a tiny instance") {
  ModelConfig cfg;
  cfg.sat_channels = 2;
  cfg.weather_channels = 2;
  cfg.classes = 3;
  cfg.conv_widths = {3, 4};
  cfg.lstm_hidden_sat = 3;
  cfg.lstm_hidden_wx = 2;
  cfg.patch_px = 8;
  ParamStore params;
  init_params(cfg, 33, params);

  Rng rng(34);
  auto sat = random_tensor({3, 2, 8, 8}, rng, 0, 1);
  auto weather = random_tensor({12, 2, 1, 1}, rng, 0, 1);
  Tensor<uint16_t> target({8, 8});
  for (Index i = 0; i < target.size(); ++i) target[i] = static_cast<uint16_t>(rng.below(3));
  Tensor<uint8_t> mask = Tensor<uint8_t>::constant({8, 8}, 1);

  auto loss = [&] {
    auto res = forward(sat, weather, cfg, params);
    return cross_entropy_masked(res.probs, target, mask);
  };

  ForwardCache cache;
  forward(sat, weather, cfg, params, &cache);
  params.zero_grads();
  backward(cross_entropy_masked_backward(cache.probs, target, mask), cfg, params, cache);

  for (auto& e : params.entries()) {
    auto res = gradcheck(loss, e.value.data(), e.value.size(), e.grad.data(), 1e-5, 10, 77);
    INFO("param ", e.name, " worst analytic ", res.analytic_at_worst, " numeric ",
         res.numeric_at_worst);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("checkpoint roundtrip restores params, config, and moments bit-exactly") {
  auto cfg = small_config();
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.sat_stats = {{0.0f, 0.1f, 0.2f}, {1.0f, 1.1f, 1.2f}};
  ckpt.wx_stats = {{-1.0f, -2.0f}, {5.0f, 6.0f}};
  ckpt.class_table = {"unknown", "a", "b", "c"};
  ckpt.epoch = 17;
  ckpt.seed = 99;
  init_params(cfg, 35, ckpt.params);
  // fabricate moments
  for (auto& e : ckpt.params.entries()) {
    e.grad.flat().setConstant(0.5);
  }
  adam_step(ckpt.params, {.lr = 1e-3}, 1);

  auto path = (std::filesystem::temp_directory_path() / "wstatt_ckpt_test.wstc").string();
  write_checkpoint(path, ckpt, true);
  auto back = read_checkpoint(path);
  CHECK(back.epoch == 17);
  CHECK(back.seed == 99);
  CHECK(back.class_table == ckpt.class_table);
  CHECK(back.config.conv_widths == cfg.conv_widths);
  CHECK(back.config.mode == cfg.mode);
  CHECK(back.sat_stats.per_band_max == ckpt.sat_stats.per_band_max);
  REQUIRE(back.params.size() == ckpt.params.size());
  for (size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& a = ckpt.params.entries()[i];
    const auto& b = back.params.entries()[i];
    CHECK(a.name == b.name);
    REQUIRE(a.value.same_shape(b.value));
    for (Index j = 0; j < a.value.size(); ++j) CHECK(a.value[j] == b.value[j]);
    for (Index j = 0; j < a.m.size(); ++j) CHECK(a.m[j] == b.m[j]);
    for (Index j = 0; j < a.v.size(); ++j) CHECK(a.v[j] == b.v[j]);
  }

  // wrong magic is rejected
  CHECK_THROWS_AS(read_checkpoint("/dev/null"), Error);
}
