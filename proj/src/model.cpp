#include "wstatt/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "wstatt/rng.hpp"

namespace wstatt {

using json = nlohmann::ordered_json;

std::string mode_name(ModelMode m) {
  return m == ModelMode::Wstatt ? "wstatt" : "statt";
}

ModelMode mode_from_name(const std::string& s) {
  if (s == "wstatt") return ModelMode::Wstatt;
  if (s == "statt" || s == "statt_ablation") return ModelMode::StattAblation;
  fail(ErrorCode::BadConfig, "unknown mode '" + s + "'");
}

void ModelConfig::validate() const {
  if (conv_widths.empty()) fail(ErrorCode::BadConfig, "conv_widths must be nonempty");
  if (classes < 2) fail(ErrorCode::BadConfig, "need at least 2 classes");
  if (sat_channels < 1 || lstm_hidden_sat < 1)
    fail(ErrorCode::BadConfig, "satellite channel/hidden sizes must be positive");
  if (mode == ModelMode::Wstatt && (weather_channels < 1 || lstm_hidden_wx < 1))
    fail(ErrorCode::BadConfig, "weather channel/hidden sizes must be positive");
  if (patch_px % (Index(1) << levels()) != 0)
    fail(ErrorCode::BadConfig, "patch_px " + std::to_string(patch_px) +
                                   " not divisible by 2^" + std::to_string(levels()));
}

// ---- parameter registry ----

namespace {

const char* kGateNames[4] = {"f", "i", "o", "g"};

void add_lstm(ParamStore& p, const std::string& prefix, Index dh, Index din) {
  for (const char* dir : {"fwd", "bwd"})
    for (int g = 0; g < 4; ++g) {
      p.add(prefix + "." + dir + ".w_h_" + kGateNames[g], {dh, dh});
      p.add(prefix + "." + dir + ".w_z_" + kGateNames[g], {dh, din});
    }
}

LstmView lstm_view(const ParamStore& p, const std::string& prefix) {
  LstmView v;
  for (int g = 0; g < 4; ++g) {
    v.w_h[g] = &p.at(prefix + ".w_h_" + kGateNames[g]).value;
    v.w_z[g] = &p.at(prefix + ".w_z_" + kGateNames[g]).value;
  }
  return v;
}

LstmGradView lstm_grad_view(ParamStore& p, const std::string& prefix) {
  LstmGradView v;
  for (int g = 0; g < 4; ++g) {
    v.w_h[g] = &p.at(prefix + ".w_h_" + kGateNames[g]).grad;
    v.w_z[g] = &p.at(prefix + ".w_z_" + kGateNames[g]).grad;
  }
  return v;
}

Index fan_in_of(const std::string& name, const TensorD& t) {
  if (t.rank() == 4) return t.dim(1) * t.dim(2) * t.dim(3);  // conv kernel
  if (t.rank() == 2) return t.dim(1);                        // linear / lstm
  (void)name;
  return std::max<Index>(t.size(), 1);  // bias
}

// (T,C,H,W) -> (T*H*W, C) channel-vector rows
TensorD chw_to_rows(const TensorD& x) {
  Index t = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  TensorD rows({t * h * w, c});
  for (Index ti = 0; ti < t; ++ti)
    for (Index ci = 0; ci < c; ++ci) {
      const double* src = x.data() + (ti * c + ci) * h * w;
      for (Index p = 0; p < h * w; ++p) rows[(ti * h * w + p) * c + ci] = src[p];
    }
  return rows;
}

TensorD rows_to_chw(const TensorD& rows, Index t, Index c, Index h, Index w) {
  TensorD x({t, c, h, w});
  for (Index ti = 0; ti < t; ++ti)
    for (Index ci = 0; ci < c; ++ci) {
      double* dst = x.data() + (ti * c + ci) * h * w;
      for (Index p = 0; p < h * w; ++p) dst[p] = rows[(ti * h * w + p) * c + ci];
    }
  return x;
}

}  // namespace

void init_params(const ModelConfig& cfg, uint64_t seed, ParamStore& params) {
  cfg.validate();
  Index prev = cfg.sat_channels;
  for (Index l = 0; l < cfg.levels(); ++l) {
    Index w = cfg.conv_widths[static_cast<size_t>(l)];
    params.add("sat_enc.l" + std::to_string(l) + ".keep.kernel", {w, prev, 3, 3});
    params.add("sat_enc.l" + std::to_string(l) + ".down.kernel", {w, w, 3, 3});
    prev = w;
  }
  add_lstm(params, "sat_lstm", cfg.lstm_hidden_sat, cfg.conv_widths.back());
  if (cfg.mode == ModelMode::Wstatt)
    add_lstm(params, "wx_lstm", cfg.lstm_hidden_wx, cfg.weather_channels);

  Index d = cfg.fused_channels();
  if (cfg.attention_hidden > 0) {
    params.add("attn.hidden.weight", {cfg.attention_hidden, d});
    params.add("attn.hidden.bias", {cfg.attention_hidden});
    params.add("attn.weight", {1, cfg.attention_hidden});
  } else {
    params.add("attn.weight", {1, d});
  }
  params.add("attn.bias", {1});

  for (Index l = cfg.levels() - 1; l >= 0; --l) {
    Index w = cfg.conv_widths[static_cast<size_t>(l)];
    Index in = (l == cfg.levels() - 1 ? d : cfg.conv_widths[static_cast<size_t>(l + 1)]) + w;
    params.add("dec.l" + std::to_string(l) + ".kernel", {w, in, 3, 3});
  }
  params.add("head.weight", {cfg.classes, cfg.conv_widths.front()});
  params.add("head.bias", {cfg.classes});

  Rng rng(seed);
  for (auto& e : params.entries()) {
    if (e.name.find("bias") != std::string::npos) continue;  // biases start at 0
    double s = 1.0 / std::sqrt(static_cast<double>(fan_in_of(e.name, e.value)));
    for (Index i = 0; i < e.value.size(); ++i) e.value[i] = rng.uniform(-s, s);
  }
}

// ---- satellite encoder ----

TensorD encode_satellite(const TensorD& sat, const ModelConfig& cfg,
                         const ParamStore& params, SatEncoderCache& cache) {
  if (sat.rank() != 4) fail(ErrorCode::DimMismatch, "satellite tensor must be 4-d");
  Index p = sat.dim(2);
  if (sat.dim(3) != p || p % (Index(1) << cfg.levels()) != 0)
    fail(ErrorCode::DimMismatch, "patch not divisible by 2^levels");
  if (sat.dim(1) != cfg.sat_channels)
    fail(ErrorCode::DimMismatch, "satellite channel count mismatch");

  cache.input = sat;
  cache.keep_out.clear();
  cache.down_out.clear();
  const TensorD* cur = &cache.input;
  for (Index l = 0; l < cfg.levels(); ++l) {
    const auto& keep_k = params.at("sat_enc.l" + std::to_string(l) + ".keep.kernel").value;
    const auto& down_k = params.at("sat_enc.l" + std::to_string(l) + ".down.kernel").value;
    cache.keep_out.push_back(pointwise(Pointwise::Relu, conv2d(*cur, keep_k, 1, 1)));
    cache.down_out.push_back(
        pointwise(Pointwise::Relu, conv2d_floor(cache.keep_out.back(), down_k, 2, 1)));
    cur = &cache.down_out.back();
  }

  Index t = sat.dim(0);
  Index c = cfg.conv_widths.back();
  Index hb = cur->dim(2), wb = cur->dim(3);
  Index b = hb * wb;
  cache.z_seq = TensorD({t, b, c});
  for (Index ti = 0; ti < t; ++ti)
    for (Index ci = 0; ci < c; ++ci) {
      const double* src = cur->data() + (ti * c + ci) * b;
      for (Index px = 0; px < b; ++px) cache.z_seq[(ti * b + px) * c + ci] = src[px];
    }

  cache.h_seq = bilstm(cache.z_seq, lstm_view(params, "sat_lstm.fwd"),
                       lstm_view(params, "sat_lstm.bwd"), &cache.lstm);

  Index dh2 = 2 * cfg.lstm_hidden_sat;
  TensorD h_s({t, dh2, hb, wb});
  for (Index ti = 0; ti < t; ++ti)
    for (Index ci = 0; ci < dh2; ++ci) {
      double* dst = h_s.data() + (ti * dh2 + ci) * b;
      for (Index px = 0; px < b; ++px) dst[px] = cache.h_seq[(ti * b + px) * dh2 + ci];
    }
  return h_s;
}

TensorD encode_satellite_backward(const TensorD& dh_s,
                                  const std::vector<TensorD>& dskips,
                                  const ModelConfig& cfg, ParamStore& params,
                                  const SatEncoderCache& cache) {
  Index t = dh_s.dim(0), dh2 = dh_s.dim(1), hb = dh_s.dim(2), wb = dh_s.dim(3);
  Index b = hb * wb;

  TensorD dh_seq({t, b, dh2});
  for (Index ti = 0; ti < t; ++ti)
    for (Index ci = 0; ci < dh2; ++ci) {
      const double* src = dh_s.data() + (ti * dh2 + ci) * b;
      for (Index px = 0; px < b; ++px) dh_seq[(ti * b + px) * dh2 + ci] = src[px];
    }

  TensorD dz_seq = bilstm_backward(cache.z_seq, lstm_view(params, "sat_lstm.fwd"),
                                   lstm_view(params, "sat_lstm.bwd"), cache.lstm, dh_seq,
                                   lstm_grad_view(params, "sat_lstm.fwd"),
                                   lstm_grad_view(params, "sat_lstm.bwd"));

  Index c = cfg.conv_widths.back();
  TensorD dcur({t, c, hb, wb});
  for (Index ti = 0; ti < t; ++ti)
    for (Index ci = 0; ci < c; ++ci) {
      double* dst = dcur.data() + (ti * c + ci) * b;
      for (Index px = 0; px < b; ++px) dst[px] = dz_seq[(ti * b + px) * c + ci];
    }

  for (Index l = cfg.levels() - 1; l >= 0; --l) {
    auto& keep_entry = params.at("sat_enc.l" + std::to_string(l) + ".keep.kernel");
    auto& down_entry = params.at("sat_enc.l" + std::to_string(l) + ".down.kernel");
    const auto& keep_out = cache.keep_out[static_cast<size_t>(l)];
    const auto& down_out = cache.down_out[static_cast<size_t>(l)];

    TensorD dpre = pointwise_backward(Pointwise::Relu, down_out, dcur);
    auto g = conv2d_floor_backward(keep_out, down_entry.value, 2, 1, dpre);
    down_entry.grad.flat() += g.dkernels.flat();

    TensorD dkeep = std::move(g.dinput);
    if (!dskips.empty() && dskips[static_cast<size_t>(l)].size() > 0)
      dkeep.flat() += dskips[static_cast<size_t>(l)].flat();

    TensorD dkeep_pre = pointwise_backward(Pointwise::Relu, keep_out, dkeep);
    const TensorD& below =
        l == 0 ? cache.input : cache.down_out[static_cast<size_t>(l - 1)];
    auto g2 = conv2d_backward(below, keep_entry.value, 1, 1, dkeep_pre);
    keep_entry.grad.flat() += g2.dkernels.flat();
    dcur = std::move(g2.dinput);
  }
  return dcur;
}

// ---- weather encoder ----

TensorD encode_weather(const TensorD& weather, const ModelConfig& cfg,
                       const ParamStore& params, WxEncoderCache& cache) {
  if (weather.rank() != 4 || weather.dim(2) != 1 || weather.dim(3) != 1)
    fail(ErrorCode::DimMismatch, "weather must be T x C x 1 x 1 (one reading per patch)");
  if (weather.dim(1) != cfg.weather_channels)
    fail(ErrorCode::DimMismatch, "weather channel count mismatch");
  Index t = weather.dim(0), c = weather.dim(1);
  cache.seq = TensorD({t, 1, c});
  std::copy(weather.data(), weather.data() + t * c, cache.seq.data());
  cache.h_seq = bilstm(cache.seq, lstm_view(params, "wx_lstm.fwd"),
                       lstm_view(params, "wx_lstm.bwd"), &cache.lstm);
  Index d2 = 2 * cfg.lstm_hidden_wx;
  TensorD h_w({t, d2});
  std::copy(cache.h_seq.data(), cache.h_seq.data() + t * d2, h_w.data());
  return h_w;
}

void encode_weather_backward(const TensorD& dh_w, const ModelConfig& cfg,
                             ParamStore& params, const WxEncoderCache& cache) {
  Index t = dh_w.dim(0), d2 = dh_w.dim(1);
  TensorD dh_seq({t, 1, d2});
  std::copy(dh_w.data(), dh_w.data() + t * d2, dh_seq.data());
  bilstm_backward(cache.seq, lstm_view(params, "wx_lstm.fwd"),
                  lstm_view(params, "wx_lstm.bwd"), cache.lstm, dh_seq,
                  lstm_grad_view(params, "wx_lstm.fwd"),
                  lstm_grad_view(params, "wx_lstm.bwd"));
}

// ---- alignment and fusion ----

std::vector<Index> align_weather_indices(Index t_w, Index t_s) {
  if (t_w < t_s)
    fail(ErrorCode::DimMismatch, "weather series shorter than satellite series");
  Index stride = t_w / t_s;
  std::vector<Index> idx(static_cast<size_t>(t_s));
  for (Index t = 0; t < t_s; ++t)
    idx[static_cast<size_t>(t)] = std::min((t + 1) * stride - 1, t_w - 1);
  return idx;
}

TensorD align_weather(const TensorD& h_w, Index t_s) {
  auto idx = align_weather_indices(h_w.dim(0), t_s);
  Index d = h_w.dim(1);
  TensorD out({t_s, d});
  for (Index t = 0; t < t_s; ++t)
    std::copy(h_w.data() + idx[static_cast<size_t>(t)] * d,
              h_w.data() + (idx[static_cast<size_t>(t)] + 1) * d, out.data() + t * d);
  return out;
}

TensorD fuse(const TensorD& h_s, const TensorD& hs_w) {
  if (h_s.dim(0) != hs_w.dim(0))
    fail(ErrorCode::DimMismatch, "fuse: satellite/weather timestamp counts differ");
  Index t = h_s.dim(0), h = h_s.dim(2), w = h_s.dim(3), dw = hs_w.dim(1);
  TensorD wx({t, dw, h, w});
  for (Index ti = 0; ti < t; ++ti)
    for (Index ci = 0; ci < dw; ++ci) {
      double v = hs_w(ti, ci);
      double* dst = wx.data() + (ti * dw + ci) * h * w;
      std::fill(dst, dst + h * w, v);
    }
  return concat_channels(h_s, wx);
}

// ---- attention ----

TensorD attend(const TensorD& h_sw, const ModelConfig& cfg, const ParamStore& params,
               AttendCache& cache) {
  Index t = h_sw.dim(0), d = h_sw.dim(1), h = h_sw.dim(2), w = h_sw.dim(3);
  if (t < 1) fail(ErrorCode::DimMismatch, "attend needs T >= 1");
  cache.rows = chw_to_rows(h_sw);

  TensorD e_rows;
  if (cfg.attention_hidden > 0) {
    auto mid = linear(cache.rows, params.at("attn.hidden.weight").value,
                      params.at("attn.hidden.bias").value);
    cache.hidden_out = pointwise(Pointwise::Tanh, mid);
    e_rows = linear(cache.hidden_out, params.at("attn.weight").value,
                    params.at("attn.bias").value);
  } else {
    e_rows = linear(cache.rows, params.at("attn.weight").value, params.at("attn.bias").value);
  }

  cache.logits = TensorD({t, h, w});
  std::copy(e_rows.data(), e_rows.data() + t * h * w, cache.logits.data());
  cache.alpha = softmax_axis(cache.logits, 0);
  (void)d;
  return cache.alpha;
}

TensorD attend_backward(const TensorD& dalpha, const ModelConfig& cfg,
                        ParamStore& params, const AttendCache& cache) {
  Index t = dalpha.dim(0), h = dalpha.dim(1), w = dalpha.dim(2);
  TensorD dlogits = softmax_axis_backward(cache.alpha, dalpha, 0);
  TensorD de_rows({t * h * w, 1});
  std::copy(dlogits.data(), dlogits.data() + t * h * w, de_rows.data());

  TensorD drows;
  if (cfg.attention_hidden > 0) {
    auto g2 = linear_backward(cache.hidden_out, params.at("attn.weight").value, de_rows);
    params.at("attn.weight").grad.flat() += g2.dweight.flat();
    params.at("attn.bias").grad.flat() += g2.dbias.flat();
    TensorD dmid = pointwise_backward(Pointwise::Tanh, cache.hidden_out, g2.dx);
    auto g1 = linear_backward(cache.rows, params.at("attn.hidden.weight").value, dmid);
    params.at("attn.hidden.weight").grad.flat() += g1.dweight.flat();
    params.at("attn.hidden.bias").grad.flat() += g1.dbias.flat();
    drows = std::move(g1.dx);
  } else {
    auto g = linear_backward(cache.rows, params.at("attn.weight").value, de_rows);
    params.at("attn.weight").grad.flat() += g.dweight.flat();
    params.at("attn.bias").grad.flat() += g.dbias.flat();
    drows = std::move(g.dx);
  }
  Index d = cache.rows.dim(1);
  return rows_to_chw(drows, t, d, h, w);
}

// ---- attention aggregation ----

TensorD aggregate(const TensorD& h_sw, const TensorD& alpha) {
  Index t = h_sw.dim(0), d = h_sw.dim(1), h = h_sw.dim(2), w = h_sw.dim(3);
  require_shape(alpha.shape(), {t, h, w}, "aggregate alpha");
  TensorD out({d, h, w});
  Index plane = h * w;
  for (Index ti = 0; ti < t; ++ti) {
    const double* a = alpha.data() + ti * plane;
    for (Index ci = 0; ci < d; ++ci) {
      const double* src = h_sw.data() + (ti * d + ci) * plane;
      double* dst = out.data() + ci * plane;
      for (Index p = 0; p < plane; ++p) dst[p] += a[p] * src[p];
    }
  }
  return out;
}

void aggregate_backward(const TensorD& h_sw, const TensorD& alpha, const TensorD& dc,
                        TensorD& dh_sw, TensorD& dalpha) {
  Index t = h_sw.dim(0), d = h_sw.dim(1), h = h_sw.dim(2), w = h_sw.dim(3);
  dh_sw = TensorD(h_sw.shape());
  dalpha = TensorD(alpha.shape());
  Index plane = h * w;
  for (Index ti = 0; ti < t; ++ti) {
    const double* a = alpha.data() + ti * plane;
    double* da = dalpha.data() + ti * plane;
    for (Index ci = 0; ci < d; ++ci) {
      const double* src = h_sw.data() + (ti * d + ci) * plane;
      const double* dcp = dc.data() + ci * plane;
      double* dst = dh_sw.data() + (ti * d + ci) * plane;
      for (Index p = 0; p < plane; ++p) {
        dst[p] = a[p] * dcp[p];
        da[p] += src[p] * dcp[p];
      }
    }
  }
}

std::vector<TensorD> aggregate_skips(const std::vector<TensorD>& skips,
                                     const TensorD& alpha) {
  std::vector<TensorD> out;
  for (const auto& skip : skips) {
    Index t = skip.dim(0), c = skip.dim(1), h = skip.dim(2), w = skip.dim(3);
    TensorD al = nearest_upsample(alpha, h, w);  // T treated as channels
    TensorD agg({c, h, w});
    Index plane = h * w;
    for (Index ti = 0; ti < t; ++ti) {
      const double* a = al.data() + ti * plane;
      for (Index ci = 0; ci < c; ++ci) {
        const double* src = skip.data() + (ti * c + ci) * plane;
        double* dst = agg.data() + ci * plane;
        for (Index p = 0; p < plane; ++p) dst[p] += a[p] * src[p];
      }
    }
    out.push_back(std::move(agg));
  }
  return out;
}

void aggregate_skips_backward(const std::vector<TensorD>& skips, const TensorD& alpha,
                              const std::vector<TensorD>& dskips_agg,
                              std::vector<TensorD>& dskips, TensorD& dalpha) {
  dskips.clear();
  dalpha = TensorD(alpha.shape());
  for (size_t l = 0; l < skips.size(); ++l) {
    const auto& skip = skips[l];
    const auto& dagg = dskips_agg[l];
    Index t = skip.dim(0), c = skip.dim(1), h = skip.dim(2), w = skip.dim(3);
    TensorD al = nearest_upsample(alpha, h, w);
    TensorD dal({t, h, w});
    TensorD dskip(skip.shape());
    Index plane = h * w;
    for (Index ti = 0; ti < t; ++ti) {
      const double* a = al.data() + ti * plane;
      double* dap = dal.data() + ti * plane;
      for (Index ci = 0; ci < c; ++ci) {
        const double* src = skip.data() + (ti * c + ci) * plane;
        const double* dgp = dagg.data() + ci * plane;
        double* dst = dskip.data() + (ti * c + ci) * plane;
        for (Index p = 0; p < plane; ++p) {
          dst[p] = a[p] * dgp[p];
          dap[p] += src[p] * dgp[p];
        }
      }
    }
    dalpha.flat() += nearest_upsample_backward(alpha.shape(), dal).flat();
    dskips.push_back(std::move(dskip));
  }
}

// ---- decoder ----

TensorD decode(const TensorD& c_sw, const std::vector<TensorD>& skips_agg,
               const ModelConfig& cfg, const ParamStore& params, DecodeCache& cache) {
  if (static_cast<Index>(skips_agg.size()) != cfg.levels())
    fail(ErrorCode::DimMismatch, "decoder needs one aggregated skip per level");
  cache.input = c_sw;
  cache.up_out.clear();
  cache.cat_out.clear();
  cache.conv_out.clear();

  TensorD cur3 = c_sw;  // C x H x W throughout
  for (Index l = cfg.levels() - 1; l >= 0; --l) {
    const auto& skip = skips_agg[static_cast<size_t>(l)];
    Index h2 = skip.dim(1), w2 = skip.dim(2);
    cache.up_out.push_back(nearest_upsample(cur3, h2, w2));
    const TensorD& up = cache.up_out.back();

    TensorD up4({1, up.dim(0), h2, w2}, FlatArray<double>(up.flat()));
    TensorD skip4({1, skip.dim(0), h2, w2}, FlatArray<double>(skip.flat()));
    cache.cat_out.push_back(concat_channels(up4, skip4));

    const auto& kernel = params.at("dec.l" + std::to_string(l) + ".kernel").value;
    cache.conv_out.push_back(
        pointwise(Pointwise::Relu, conv2d(cache.cat_out.back(), kernel, 1, 1)));
    const TensorD& co = cache.conv_out.back();
    cur3 = TensorD({co.dim(1), co.dim(2), co.dim(3)}, FlatArray<double>(co.flat()));
  }

  // per-pixel linear head
  TensorD last({1, cur3.dim(0), cur3.dim(1), cur3.dim(2)},
               FlatArray<double>(cur3.flat()));
  cache.head_rows = chw_to_rows(last);
  TensorD logits_rows = linear(cache.head_rows, params.at("head.weight").value,
                               params.at("head.bias").value);
  Index p = last.dim(2);
  TensorD rows4({1, cfg.classes, p, p});
  for (Index px = 0; px < p * p; ++px)
    for (Index c = 0; c < cfg.classes; ++c)
      rows4[c * p * p + px] = logits_rows[px * cfg.classes + c];
  return TensorD({cfg.classes, p, p}, FlatArray<double>(rows4.flat()));
}

void decode_backward(const TensorD& dlogits, const ModelConfig& cfg, ParamStore& params,
                     const DecodeCache& cache, TensorD& dc_sw,
                     std::vector<TensorD>& dskips_agg) {
  Index v = dlogits.dim(0), p = dlogits.dim(1);
  TensorD dl_rows({p * p, v});
  for (Index px = 0; px < p * p; ++px)
    for (Index c = 0; c < v; ++c) dl_rows[px * v + c] = dlogits[c * p * p + px];

  auto hg = linear_backward(cache.head_rows, params.at("head.weight").value, dl_rows);
  params.at("head.weight").grad.flat() += hg.dweight.flat();
  params.at("head.bias").grad.flat() += hg.dbias.flat();

  Index w0 = cfg.conv_widths.front();
  TensorD dcur = rows_to_chw(hg.dx, 1, w0, p, p);

  dskips_agg.assign(static_cast<size_t>(cfg.levels()), TensorD());
  // decode executed levels L-1 .. 0; walk the cached steps backwards
  for (Index step = cfg.levels() - 1; step >= 0; --step) {
    Index l = cfg.levels() - 1 - step;  // level of this step
    auto& entry = params.at("dec.l" + std::to_string(l) + ".kernel");
    const TensorD& conv_out = cache.conv_out[static_cast<size_t>(step)];
    const TensorD& cat_out = cache.cat_out[static_cast<size_t>(step)];
    const TensorD& up_out = cache.up_out[static_cast<size_t>(step)];

    TensorD dpre = pointwise_backward(Pointwise::Relu, conv_out, dcur);
    auto g = conv2d_backward(cat_out, entry.value, 1, 1, dpre);
    entry.grad.flat() += g.dkernels.flat();

    Index up_c = up_out.dim(0);
    TensorD dup4, dskip4;
    concat_channels_backward(g.dinput, up_c, dup4, dskip4);

    dskips_agg[static_cast<size_t>(l)] =
        TensorD({dskip4.dim(1), dskip4.dim(2), dskip4.dim(3)},
                FlatArray<double>(dskip4.flat()));

    TensorD dup({up_c, up_out.dim(1), up_out.dim(2)}, FlatArray<double>(dup4.flat()));
    Shape below = step == 0 ? cache.input.shape()
                            : cache.conv_out[static_cast<size_t>(step - 1)].shape();
    Shape below3 = step == 0 ? below : Shape{below[1], below[2], below[3]};
    TensorD dprev = nearest_upsample_backward(below3, dup);
    if (step == 0) {
      dc_sw = std::move(dprev);
    } else {
      dcur = TensorD({1, below3[0], below3[1], below3[2]},
                     FlatArray<double>(dprev.flat()));
    }
  }
}

// ---- full pipeline ----

ForwardResult forward(const TensorD& sat, const TensorD& weather, const ModelConfig& cfg,
                      const ParamStore& params, ForwardCache* cache) {
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;

  c.h_s = encode_satellite(sat, cfg, params, c.sat);

  if (cfg.mode == ModelMode::Wstatt) {
    c.h_w = encode_weather(weather, cfg, params, c.wx);
    c.align_idx = align_weather_indices(c.h_w.dim(0), sat.dim(0));
    c.hs_w = align_weather(c.h_w, sat.dim(0));
    c.h_sw = fuse(c.h_s, c.hs_w);
  } else {
    c.h_sw = c.h_s;
  }

  TensorD alpha = attend(c.h_sw, cfg, params, c.attend);
  c.c_sw = aggregate(c.h_sw, alpha);
  c.skips_agg = aggregate_skips(c.sat.keep_out, alpha);
  c.logits = decode(c.c_sw, c.skips_agg, cfg, params, c.decode);
  c.probs = softmax_axis(c.logits, 0);

  ForwardResult res;
  res.probs = c.probs;
  res.logits = c.logits;
  res.attention.alpha = std::move(alpha);
  res.attention.truncation_t = sat.dim(0);
  return res;
}

void backward(const TensorD& dlogits, const ModelConfig& cfg, ParamStore& params,
              const ForwardCache& cache) {
  TensorD dc_sw;
  std::vector<TensorD> dskips_agg;
  decode_backward(dlogits, cfg, params, cache.decode, dc_sw, dskips_agg);

  TensorD dh_sw, dalpha;
  aggregate_backward(cache.h_sw, cache.attend.alpha, dc_sw, dh_sw, dalpha);

  std::vector<TensorD> dskips;
  TensorD dalpha_skips;
  aggregate_skips_backward(cache.sat.keep_out, cache.attend.alpha, dskips_agg, dskips,
                           dalpha_skips);
  dalpha.flat() += dalpha_skips.flat();

  dh_sw.flat() += attend_backward(dalpha, cfg, params, cache.attend).flat();

  TensorD dh_s;
  if (cfg.mode == ModelMode::Wstatt) {
    Index sat_c = 2 * cfg.lstm_hidden_sat;
    TensorD dwx_bcast;
    concat_channels_backward(dh_sw, sat_c, dh_s, dwx_bcast);

    // broadcast backward: sum the spatial plane per (t, channel)
    Index t = dwx_bcast.dim(0), dw = dwx_bcast.dim(1);
    Index plane = dwx_bcast.dim(2) * dwx_bcast.dim(3);
    TensorD dhs_w({t, dw});
    for (Index ti = 0; ti < t; ++ti)
      for (Index ci = 0; ci < dw; ++ci) {
        const double* src = dwx_bcast.data() + (ti * dw + ci) * plane;
        double acc = 0;
        for (Index p = 0; p < plane; ++p) acc += src[p];
        dhs_w(ti, ci) = acc;
      }

    // selection backward: scatter into the picked weather embeddings
    TensorD dh_w({cache.h_w.dim(0), dw});
    for (Index ti = 0; ti < t; ++ti) {
      Index src_t = cache.align_idx[static_cast<size_t>(ti)];
      for (Index ci = 0; ci < dw; ++ci) dh_w(src_t, ci) += dhs_w(ti, ci);
    }
    encode_weather_backward(dh_w, cfg, params, cache.wx);
  } else {
    dh_s = std::move(dh_sw);
  }

  encode_satellite_backward(dh_s, dskips, cfg, params, cache.sat);
}

Tensor<uint16_t> argmax_labels(const TensorD& probs) {
  Index v = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  Tensor<uint16_t> out({h, w});
  for (Index i = 0; i < h; ++i)
    for (Index k = 0; k < w; ++k) {
      Index best = 0;
      double bv = probs(0, i, k);
      for (Index c = 1; c < v; ++c)
        if (probs(c, i, k) > bv) {
          bv = probs(c, i, k);
          best = c;
        }
      out(i, k) = static_cast<uint16_t>(best);
    }
  return out;
}

EarlyPrediction predict_early(const TensorD& sat_full, int sat_origin_day,
                              const TensorD& weather_full, int wx_origin_day, int months,
                              const ModelConfig& cfg, const ParamStore& params) {
  Index t_s = truncated_len(sat_origin_day, cfg.sat_step_days, sat_full.dim(0), months);
  if (t_s == 0) fail(ErrorCode::BadData, "early prediction keeps no satellite composites");
  TensorD sat({t_s, sat_full.dim(1), sat_full.dim(2), sat_full.dim(3)});
  std::copy(sat_full.data(), sat_full.data() + sat.size(), sat.data());

  TensorD weather;
  if (cfg.mode == ModelMode::Wstatt) {
    Index t_w = truncated_len(wx_origin_day, 1, weather_full.dim(0), months);
    if (t_w == 0) fail(ErrorCode::BadData, "early prediction keeps no weather days");
    weather = TensorD({t_w, weather_full.dim(1), 1, 1});
    std::copy(weather_full.data(), weather_full.data() + weather.size(), weather.data());
  }

  EarlyPrediction out;
  out.result = forward(sat, weather, cfg, params);
  out.result.attention.truncation_t = t_s;
  out.label_map = argmax_labels(out.result.probs);
  return out;
}

// ---- checkpoint I/O ----

namespace {

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["sat_channels"] = cfg.sat_channels;
  j["weather_channels"] = cfg.weather_channels;
  j["classes"] = cfg.classes;
  j["conv_widths"] = cfg.conv_widths;
  j["lstm_hidden_sat"] = cfg.lstm_hidden_sat;
  j["lstm_hidden_wx"] = cfg.lstm_hidden_wx;
  j["attention_hidden"] = cfg.attention_hidden;
  j["mode"] = mode_name(cfg.mode);
  j["sat_step_days"] = cfg.sat_step_days;
  j["patch_px"] = cfg.patch_px;
  return j;
}

ModelConfig config_from_json(const json& j) {
  static const std::vector<std::string> keys = {
      "sat_channels",   "weather_channels", "classes",        "conv_widths",
      "lstm_hidden_sat", "lstm_hidden_wx",  "attention_hidden", "mode",
      "sat_step_days",  "patch_px"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      fail(ErrorCode::BadConfig, "unknown model config key '" + it.key() + "'");
  ModelConfig cfg;
  if (j.contains("sat_channels")) cfg.sat_channels = j["sat_channels"].get<Index>();
  if (j.contains("weather_channels")) cfg.weather_channels = j["weather_channels"].get<Index>();
  if (j.contains("classes")) cfg.classes = j["classes"].get<Index>();
  if (j.contains("conv_widths")) cfg.conv_widths = j["conv_widths"].get<std::vector<Index>>();
  if (j.contains("lstm_hidden_sat")) cfg.lstm_hidden_sat = j["lstm_hidden_sat"].get<Index>();
  if (j.contains("lstm_hidden_wx")) cfg.lstm_hidden_wx = j["lstm_hidden_wx"].get<Index>();
  if (j.contains("attention_hidden")) cfg.attention_hidden = j["attention_hidden"].get<Index>();
  if (j.contains("mode")) cfg.mode = mode_from_name(j["mode"].get<std::string>());
  if (j.contains("sat_step_days")) cfg.sat_step_days = j["sat_step_days"].get<int>();
  if (j.contains("patch_px")) cfg.patch_px = j["patch_px"].get<Index>();
  return cfg;
}

json stats_to_json(const NormStats& s) {
  json j;
  j["per_band_min"] = s.per_band_min;
  j["per_band_max"] = s.per_band_max;
  return j;
}

NormStats stats_from_json(const json& j) {
  NormStats s;
  s.per_band_min = j.at("per_band_min").get<std::vector<float>>();
  s.per_band_max = j.at("per_band_max").get<std::vector<float>>();
  return s;
}

constexpr char kCkptMagic[4] = {'W', 'S', 'T', 'C'};

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt, bool with_moments) {
  json h;
  json cfg = config_to_json(ckpt.config);
  cfg["sat_stats"] = stats_to_json(ckpt.sat_stats);
  cfg["wx_stats"] = stats_to_json(ckpt.wx_stats);
  cfg["class_table"] = ckpt.class_table;
  h["config"] = cfg;
  json manifest = json::array();
  for (const auto& e : ckpt.params.entries()) {
    json m;
    m["name"] = e.name;
    m["shape"] = e.value.shape();
    manifest.push_back(m);
  }
  h["manifest"] = manifest;
  h["moments"] = with_moments;
  h["epoch"] = ckpt.epoch;
  h["seed"] = ckpt.seed;

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::Io, "cannot open for write: " + path);
  std::string htext = h.dump();
  uint32_t hlen = static_cast<uint32_t>(htext.size());
  os.write(kCkptMagic, 4);
  os.write(reinterpret_cast<const char*>(&hlen), 4);
  os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& e : ckpt.params.entries())
    os.write(reinterpret_cast<const char*>(e.value.data()),
             static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  if (with_moments) {
    for (const auto& e : ckpt.params.entries()) {
      TensorD zero;
      const TensorD& m = e.m.size() ? e.m : (zero = TensorD(e.value.shape()));
      os.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
      const TensorD& v = e.v.size() ? e.v : (zero = TensorD(e.value.shape()));
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
  }
  if (!os) fail(ErrorCode::Io, "checkpoint write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kCkptMagic, 4) != 0)
    fail(ErrorCode::BadMagic, "not a checkpoint file: " + path);
  uint32_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 4);
  std::string htext(hlen, '\0');
  is.read(htext.data(), hlen);
  if (static_cast<uint32_t>(is.gcount()) != hlen)
    fail(ErrorCode::TruncatedPayload, "truncated checkpoint header: " + path);
  json h = json::parse(htext, nullptr, false);
  if (h.is_discarded()) fail(ErrorCode::BadData, "invalid checkpoint header: " + path);

  Checkpoint ckpt;
  ckpt.config = config_from_json([&] {
    json c = h.at("config");
    c.erase("sat_stats");
    c.erase("wx_stats");
    c.erase("class_table");
    return c;
  }());
  ckpt.sat_stats = stats_from_json(h.at("config").at("sat_stats"));
  ckpt.wx_stats = stats_from_json(h.at("config").at("wx_stats"));
  ckpt.class_table = h.at("config").at("class_table").get<std::vector<std::string>>();
  ckpt.epoch = h.at("epoch").get<int>();
  ckpt.seed = h.at("seed").get<uint64_t>();
  bool moments = h.at("moments").get<bool>();

  for (const auto& m : h.at("manifest")) {
    Shape shape = m.at("shape").get<Shape>();
    auto& t = ckpt.params.add(m.at("name").get<std::string>(), shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (is.gcount() != static_cast<std::streamsize>(t.size() * sizeof(double)))
      fail(ErrorCode::TruncatedPayload, "truncated checkpoint payload: " + path);
  }
  if (moments) {
    for (auto& e : ckpt.params.entries()) {
      e.m = TensorD(e.value.shape());
      e.v = TensorD(e.value.shape());
      is.read(reinterpret_cast<char*>(e.m.data()),
              static_cast<std::streamsize>(e.m.size() * sizeof(double)));
      is.read(reinterpret_cast<char*>(e.v.data()),
              static_cast<std::streamsize>(e.v.size() * sizeof(double)));
      if (!is) fail(ErrorCode::TruncatedPayload, "truncated checkpoint moments: " + path);
    }
  }
  return ckpt;
}

}  // namespace wstatt
