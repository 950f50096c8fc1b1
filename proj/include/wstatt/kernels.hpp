#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wstatt/tensor.hpp"

namespace wstatt {

// Named parameter tensors with matching gradient buffers and lazily
// allocated Adam moments. Iteration order is insertion order, which fixes
// the checkpoint manifest order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    TensorD value;
    TensorD grad;
    TensorD m, v;  // Adam moments; empty until the first step
  };

  TensorD& add(const std::string& name, Shape shape);
  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  void zero_grads();
  Index total_coords() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

// ---- pointwise activations ----

enum class Pointwise { Sigmoid, Tanh, Relu };

TensorD pointwise(Pointwise fn, const TensorD& x);
// dx from the forward *output* y: sigmoid' = y(1-y), tanh' = 1-y^2,
// relu' = [y > 0].
TensorD pointwise_backward(Pointwise fn, const TensorD& y, const TensorD& dy);

// ---- conv2d (cross-correlation, no bias) ----

// input N x Cin x H x W, kernels Cout x Cin x k x k, odd k.
TensorD conv2d(const TensorD& input, const TensorD& kernels, int stride, int pad);

struct Conv2dGrads {
  TensorD dinput;
  TensorD dkernels;
};
Conv2dGrads conv2d_backward(const TensorD& input, const TensorD& kernels, int stride,
                            int pad, const TensorD& dout);

// Strided convolution with floor output dims, H' = floor((H+2p-k)/s)+1.
// An odd kernel with symmetric padding can never halve an even extent under
// the strict integral rule, so the encoder's stride-2 convs use this.
TensorD conv2d_floor(const TensorD& input, const TensorD& kernels, int stride, int pad);
Conv2dGrads conv2d_floor_backward(const TensorD& input, const TensorD& kernels, int stride,
                                  int pad, const TensorD& dout);

// ---- linear: y = x W^T + b ----

TensorD linear(const TensorD& x, const TensorD& weight, const TensorD& bias);

struct LinearGrads {
  TensorD dx;
  TensorD dweight;
  TensorD dbias;
};
LinearGrads linear_backward(const TensorD& x, const TensorD& weight, const TensorD& dout);

// ---- LSTM cell (bias-free gate equations) ----

// Gate order used throughout: F, I, O, G.
constexpr int kGateF = 0, kGateI = 1, kGateO = 2, kGateG = 3;

struct LstmView {
  std::array<const TensorD*, 4> w_h;  // Dh x Dh each
  std::array<const TensorD*, 4> w_z;  // Dh x Din each
  Index hidden() const { return w_h[0]->dim(0); }
  Index input() const { return w_z[0]->dim(1); }
};

struct LstmGradView {
  std::array<TensorD*, 4> w_h;
  std::array<TensorD*, 4> w_z;
};

struct LstmCellCache {
  TensorD gates[4];  // B x Dh post-activation
  TensorD tanh_c;    // tanh(c_t)
};

// z B x Din, h_prev/c_prev B x Dh. Writes h_t, c_t; fills cache when given.
void lstm_cell(const TensorD& z, const TensorD& h_prev, const TensorD& c_prev,
               const LstmView& w, TensorD& h_t, TensorD& c_t,
               LstmCellCache* cache = nullptr);

struct LstmCellGrads {
  TensorD dz, dh_prev, dc_prev;
};
// Accumulates weight gradients into grads; returns input-side gradients.
LstmCellGrads lstm_cell_backward(const TensorD& z, const TensorD& h_prev,
                                 const TensorD& c_prev, const LstmView& w,
                                 const LstmCellCache& cache, const TensorD& dh_t,
                                 const TensorD& dc_t, const LstmGradView& grads);

// ---- bidirectional LSTM over a T x B x Din sequence ----

struct BilstmCache {
  std::vector<TensorD> h_fwd, c_fwd, h_bwd, c_bwd;  // states entering step t
  std::vector<LstmCellCache> cell_fwd, cell_bwd;
};

// Output T x B x 2Dh: [h_fwd ; h_bwd] per timestamp, zero initial states.
TensorD bilstm(const TensorD& seq, const LstmView& fwd, const LstmView& bwd,
               BilstmCache* cache = nullptr);

// dout T x B x 2Dh -> dseq; weight grads accumulate into the grad views.
TensorD bilstm_backward(const TensorD& seq, const LstmView& fwd_w, const LstmView& bwd_w,
                        const BilstmCache& cache, const TensorD& dout,
                        const LstmGradView& fwd_g, const LstmGradView& bwd_g);

// ---- softmax along one axis ----

TensorD softmax_axis(const TensorD& x, Index axis);
// dx = y * (dy - sum(dy * y, axis)).
TensorD softmax_axis_backward(const TensorD& y, const TensorD& dy, Index axis);

// ---- masked pixel-wise cross entropy ----

// probs V x H x W with per-pixel columns summing to 1; loss is the mean of
// -ln p[target] over mask-one pixels.
double cross_entropy_masked(const TensorD& probs, const Tensor<uint16_t>& target_ids,
                            const Tensor<uint8_t>& mask);
// Gradient with respect to the *logits* feeding the softmax:
// (p - onehot) / masked_count on included pixels, zero elsewhere.
TensorD cross_entropy_masked_backward(const TensorD& probs,
                                      const Tensor<uint16_t>& target_ids,
                                      const Tensor<uint8_t>& mask);

// ---- channel concat on T x C x H x W ----

TensorD concat_channels(const TensorD& a, const TensorD& b);
void concat_channels_backward(const TensorD& dout, Index ca, TensorD& da, TensorD& db);

// ---- nearest-neighbor upsample on C x h x w ----

TensorD nearest_upsample(const TensorD& x, Index out_h, Index out_w);
// Sums the gradient over each replicated cell back to its source.
TensorD nearest_upsample_backward(const Shape& in_shape, const TensorD& dout);

// ---- Adam ----

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One update over every entry; step_t counts from 1 for bias correction.
void adam_step(ParamStore& params, const AdamConfig& cfg, int64_t step_t);

}  // namespace wstatt
