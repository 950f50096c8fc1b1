#include <algorithm>
#include <cmath>

#include "wstatt/gradcheck.hpp"
#include "wstatt/model.hpp"
#include "wstatt/rng.hpp"

namespace wstatt {

namespace {

TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double dot_all(const TensorD& a, const TensorD& b) { return (a.flat() * b.flat()).sum(); }

void track(std::vector<KernelCheck>& out, const std::string& name, double err) {
  for (auto& k : out)
    if (k.name == name) {
      k.max_rel_err = std::max(k.max_rel_err, err);
      return;
    }
  out.push_back({name, err});
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.sat_channels = 3;
  cfg.weather_channels = 2;
  cfg.classes = 3;
  cfg.conv_widths = {3, 4, 5};
  cfg.lstm_hidden_sat = 4;
  cfg.lstm_hidden_wx = 3;
  cfg.mode = ModelMode::Wstatt;
  cfg.patch_px = 8;
  return cfg;
}

}  // namespace

std::vector<KernelCheck> run_gradcheck_suite(int n_seeds) {
  std::vector<KernelCheck> out;

  for (int seed = 0; seed < n_seeds; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) * 7919 + 13);

    // conv2d, strict and floor mode
    {
      Index cin = 1 + static_cast<Index>(rng.below(3));
      Index cout = 1 + static_cast<Index>(rng.below(3));
      auto x = random_tensor({1, cin, 6, 6}, rng);
      auto k = random_tensor({cout, cin, 3, 3}, rng);
      auto r = random_tensor({1, cout, 6, 6}, rng);
      auto loss = [&] { return dot_all(conv2d(x, k, 1, 1), r); };
      auto g = conv2d_backward(x, k, 1, 1, r);
      track(out, "conv2d",
            gradcheck(loss, x.data(), x.size(), g.dinput.data()).max_rel_err);
      track(out, "conv2d",
            gradcheck(loss, k.data(), k.size(), g.dkernels.data()).max_rel_err);

      auto r2 = random_tensor({1, cout, 3, 3}, rng);
      auto loss2 = [&] { return dot_all(conv2d_floor(x, k, 2, 1), r2); };
      auto g2 = conv2d_floor_backward(x, k, 2, 1, r2);
      track(out, "conv2d_floor",
            gradcheck(loss2, x.data(), x.size(), g2.dinput.data()).max_rel_err);
      track(out, "conv2d_floor",
            gradcheck(loss2, k.data(), k.size(), g2.dkernels.data()).max_rel_err);
    }

    // pointwise
    for (auto [fn, name] : {std::pair{Pointwise::Sigmoid, "sigmoid"},
                            std::pair{Pointwise::Tanh, "tanh"},
                            std::pair{Pointwise::Relu, "relu"}}) {
      auto x = random_tensor({16}, rng, 0.2, 1.5);
      for (Index i = 0; i < x.size(); i += 2) x[i] = -x[i];  // keep clear of the kink
      auto r = random_tensor({16}, rng);
      auto loss = [&, fn = fn] { return dot_all(pointwise(fn, x), r); };
      auto dx = pointwise_backward(fn, pointwise(fn, x), r);
      track(out, std::string("pointwise_") + name,
            gradcheck(loss, x.data(), x.size(), dx.data()).max_rel_err);
    }

    // linear
    {
      auto x = random_tensor({3, 4}, rng);
      auto w = random_tensor({2, 4}, rng);
      auto b = random_tensor({2}, rng);
      auto r = random_tensor({3, 2}, rng);
      auto loss = [&] { return dot_all(linear(x, w, b), r); };
      auto g = linear_backward(x, w, r);
      track(out, "linear", gradcheck(loss, x.data(), x.size(), g.dx.data()).max_rel_err);
      track(out, "linear",
            gradcheck(loss, w.data(), w.size(), g.dweight.data()).max_rel_err);
      track(out, "linear",
            gradcheck(loss, b.data(), b.size(), g.dbias.data()).max_rel_err);
    }

    // lstm cell and bilstm
    {
      Index dh = 3, din = 2;
      ParamStore store;
      const char* gates[4] = {"f", "i", "o", "g"};
      LstmView fwd_v, bwd_v;
      LstmGradView fwd_g, bwd_g;
      for (const char* dir : {"a", "b"})
        for (int g = 0; g < 4; ++g) {
          auto& wh = store.add(std::string(dir) + ".w_h_" + gates[g], {dh, dh});
          auto& wz = store.add(std::string(dir) + ".w_z_" + gates[g], {dh, din});
          for (Index i = 0; i < wh.size(); ++i) wh[i] = rng.uniform(-0.5, 0.5);
          for (Index i = 0; i < wz.size(); ++i) wz[i] = rng.uniform(-0.5, 0.5);
        }
      for (int g = 0; g < 4; ++g) {
        fwd_v.w_h[g] = &store.at(std::string("a.w_h_") + gates[g]).value;
        fwd_v.w_z[g] = &store.at(std::string("a.w_z_") + gates[g]).value;
        bwd_v.w_h[g] = &store.at(std::string("b.w_h_") + gates[g]).value;
        bwd_v.w_z[g] = &store.at(std::string("b.w_z_") + gates[g]).value;
        fwd_g.w_h[g] = &store.at(std::string("a.w_h_") + gates[g]).grad;
        fwd_g.w_z[g] = &store.at(std::string("a.w_z_") + gates[g]).grad;
        bwd_g.w_h[g] = &store.at(std::string("b.w_h_") + gates[g]).grad;
        bwd_g.w_z[g] = &store.at(std::string("b.w_z_") + gates[g]).grad;
      }

      auto z = random_tensor({2, din}, rng);
      auto h0 = random_tensor({2, dh}, rng);
      auto c0 = random_tensor({2, dh}, rng);
      auto rh = random_tensor({2, dh}, rng);
      auto rc = random_tensor({2, dh}, rng);
      auto cell_loss = [&] {
        TensorD h_t, c_t;
        lstm_cell(z, h0, c0, fwd_v, h_t, c_t, nullptr);
        return dot_all(h_t, rh) + dot_all(c_t, rc);
      };
      TensorD h_t, c_t;
      LstmCellCache cc;
      lstm_cell(z, h0, c0, fwd_v, h_t, c_t, &cc);
      store.zero_grads();
      auto cg = lstm_cell_backward(z, h0, c0, fwd_v, cc, rh, rc, fwd_g);
      track(out, "lstm_cell",
            gradcheck(cell_loss, z.data(), z.size(), cg.dz.data()).max_rel_err);
      for (int g = 0; g < 4; ++g) {
        auto& e = store.at(std::string("a.w_h_") + gates[g]);
        track(out, "lstm_cell",
              gradcheck(cell_loss, e.value.data(), e.value.size(), e.grad.data()).max_rel_err);
        auto& e2 = store.at(std::string("a.w_z_") + gates[g]);
        track(out, "lstm_cell",
              gradcheck(cell_loss, e2.value.data(), e2.value.size(), e2.grad.data())
                  .max_rel_err);
      }

      Index t_len = 3;
      auto seq = random_tensor({t_len, 2, din}, rng);
      auto rr = random_tensor({t_len, 2, 2 * dh}, rng);
      auto seq_loss = [&] { return dot_all(bilstm(seq, fwd_v, bwd_v), rr); };
      BilstmCache bc;
      bilstm(seq, fwd_v, bwd_v, &bc);
      store.zero_grads();
      auto dseq = bilstm_backward(seq, fwd_v, bwd_v, bc, rr, fwd_g, bwd_g);
      track(out, "bilstm",
            gradcheck(seq_loss, seq.data(), seq.size(), dseq.data()).max_rel_err);
      for (auto& e : store.entries())
        track(out, "bilstm",
              gradcheck(seq_loss, e.value.data(), e.value.size(), e.grad.data(), 1e-5, 6,
                        static_cast<uint64_t>(seed))
                  .max_rel_err);
    }

    // softmax
    {
      auto x = random_tensor({3, 4}, rng, -2, 2);
      auto r = random_tensor({3, 4}, rng);
      for (Index axis = 0; axis < 2; ++axis) {
        auto loss = [&] { return dot_all(softmax_axis(x, axis), r); };
        auto dx = softmax_axis_backward(softmax_axis(x, axis), r, axis);
        track(out, "softmax_axis",
              gradcheck(loss, x.data(), x.size(), dx.data()).max_rel_err);
      }
    }

    // cross entropy through softmax
    {
      auto logits = random_tensor({3, 2, 2}, rng);
      Tensor<uint16_t> target({2, 2});
      for (Index i = 0; i < 4; ++i) target[i] = static_cast<uint16_t>(rng.below(3));
      Tensor<uint8_t> mask = Tensor<uint8_t>::constant({2, 2}, 1);
      auto loss = [&] { return cross_entropy_masked(softmax_axis(logits, 0), target, mask); };
      auto dl = cross_entropy_masked_backward(softmax_axis(logits, 0), target, mask);
      track(out, "cross_entropy",
            gradcheck(loss, logits.data(), logits.size(), dl.data()).max_rel_err);
    }

    // concat + upsample through a shared projection
    {
      auto a = random_tensor({2, 2, 2, 2}, rng);
      auto b = random_tensor({2, 1, 2, 2}, rng);
      auto r = random_tensor({2, 3, 2, 2}, rng);
      auto loss = [&] { return dot_all(concat_channels(a, b), r); };
      TensorD da, db;
      concat_channels_backward(r, 2, da, db);
      track(out, "concat_channels",
            gradcheck(loss, a.data(), a.size(), da.data()).max_rel_err);
      track(out, "concat_channels",
            gradcheck(loss, b.data(), b.size(), db.data()).max_rel_err);

      auto x = random_tensor({2, 2, 3}, rng);
      auto ru = random_tensor({2, 4, 6}, rng);
      auto lossu = [&] { return dot_all(nearest_upsample(x, 4, 6), ru); };
      auto dx = nearest_upsample_backward(x.shape(), ru);
      track(out, "nearest_upsample",
            gradcheck(lossu, x.data(), x.size(), dx.data()).max_rel_err);
    }

    // end-to-end training loss on the tiny instance: T_s=4, T_w=20, V=3, 8x8
    {
      ModelConfig cfg = tiny_config();
      ParamStore params;
      init_params(cfg, static_cast<uint64_t>(seed) + 100, params);

      auto sat = random_tensor({4, cfg.sat_channels, 8, 8}, rng, 0.0, 1.0);
      auto weather = random_tensor({20, cfg.weather_channels, 1, 1}, rng, 0.0, 1.0);
      Tensor<uint16_t> target({8, 8});
      for (Index i = 0; i < target.size(); ++i)
        target[i] = static_cast<uint16_t>(rng.below(3));
      Tensor<uint8_t> mask = Tensor<uint8_t>::constant({8, 8}, 1);
      mask(0, 0) = 0;

      auto loss = [&] {
        auto res = forward(sat, weather, cfg, params);
        return cross_entropy_masked(res.probs, target, mask);
      };

      ForwardCache cache;
      forward(sat, weather, cfg, params, &cache);
      params.zero_grads();
      auto dlogits = cross_entropy_masked_backward(cache.probs, target, mask);
      backward(dlogits, cfg, params, cache);

      for (auto& e : params.entries()) {
        auto res = gradcheck(loss, e.value.data(), e.value.size(), e.grad.data(), 1e-5, 6,
                             static_cast<uint64_t>(seed) * 31 + 7);
        track(out, "end_to_end", res.max_rel_err);
      }
    }
  }
  return out;
}

}  // namespace wstatt
