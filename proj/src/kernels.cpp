#include "wstatt/kernels.hpp"

#include <cmath>

namespace wstatt {

TensorD& ParamStore::add(const std::string& name, Shape shape) {
  if (index_.count(name)) fail(ErrorCode::BadConfig, "duplicate parameter '" + name + "'");
  index_[name] = entries_.size();
  Entry e;
  e.name = name;
  e.value = TensorD(shape);
  e.grad = TensorD(std::move(shape));
  entries_.push_back(std::move(e));
  return entries_.back().value;
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::BadConfig, "unknown parameter '" + name + "'");
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::BadConfig, "unknown parameter '" + name + "'");
  return entries_[it->second];
}

void ParamStore::zero_grads() {
  for (auto& e : entries_) e.grad.setZero();
}

Index ParamStore::total_coords() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

// ---- pointwise ----

TensorD pointwise(Pointwise fn, const TensorD& x) {
  TensorD y(x.shape());
  switch (fn) {
    case Pointwise::Sigmoid:
      y.flat() = 1.0 / (1.0 + (-x.flat()).exp());
      break;
    case Pointwise::Tanh:
      y.flat() = x.flat().tanh();
      break;
    case Pointwise::Relu:
      y.flat() = x.flat().max(0.0);
      break;
  }
  return y;
}

TensorD pointwise_backward(Pointwise fn, const TensorD& y, const TensorD& dy) {
  if (!y.same_shape(dy)) fail(ErrorCode::DimMismatch, "pointwise backward shape mismatch");
  TensorD dx(y.shape());
  switch (fn) {
    case Pointwise::Sigmoid:
      dx.flat() = dy.flat() * y.flat() * (1.0 - y.flat());
      break;
    case Pointwise::Tanh:
      dx.flat() = dy.flat() * (1.0 - y.flat().square());
      break;
    case Pointwise::Relu:
      dx.flat() = (y.flat() > 0.0).select(dy.flat(), 0.0);
      break;
  }
  return dx;
}

// ---- conv2d ----

namespace {

struct ConvDims {
  Index n, cin, h, w, cout, k, ho, wo;
};

ConvDims conv_dims(const TensorD& input, const TensorD& kernels, int stride, int pad,
                   bool floor_mode) {
  if (input.rank() != 4 || kernels.rank() != 4)
    fail(ErrorCode::DimMismatch, "conv2d expects 4-d input and kernels");
  ConvDims d;
  d.n = input.dim(0);
  d.cin = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.cout = kernels.dim(0);
  d.k = kernels.dim(2);
  if (kernels.dim(1) != d.cin)
    fail(ErrorCode::DimMismatch, "kernel Cin " + std::to_string(kernels.dim(1)) +
                                     " != input Cin " + std::to_string(d.cin));
  if (kernels.dim(3) != d.k || d.k % 2 == 0)
    fail(ErrorCode::DimMismatch, "kernels must be square with odd k");
  if (stride < 1 || pad < 0) fail(ErrorCode::BadConfig, "conv2d stride/pad invalid");
  Index num_h = d.h + 2 * pad - d.k;
  Index num_w = d.w + 2 * pad - d.k;
  if (num_h < 0 || num_w < 0)
    fail(ErrorCode::DimMismatch, "conv2d kernel larger than padded input");
  if (!floor_mode && (num_h % stride != 0 || num_w % stride != 0))
    fail(ErrorCode::DimMismatch, "conv2d output dims are not integral");
  d.ho = num_h / stride + 1;
  d.wo = num_w / stride + 1;
  return d;
}

// cols is (Cin*k*k) x (Ho*Wo), one column per output position.
void im2col(const double* in, const ConvDims& d, int stride, int pad, MatrixRM<double>& cols) {
  for (Index c = 0; c < d.cin; ++c) {
    const double* plane = in + c * d.h * d.w;
    for (Index ki = 0; ki < d.k; ++ki) {
      for (Index kj = 0; kj < d.k; ++kj) {
        Index row = (c * d.k + ki) * d.k + kj;
        double* dst = cols.data() + row * d.ho * d.wo;
        for (Index oi = 0; oi < d.ho; ++oi) {
          Index ii = oi * stride + ki - pad;
          for (Index oj = 0; oj < d.wo; ++oj) {
            Index jj = oj * stride + kj - pad;
            dst[oi * d.wo + oj] = (ii >= 0 && ii < d.h && jj >= 0 && jj < d.w)
                                      ? plane[ii * d.w + jj]
                                      : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const MatrixRM<double>& cols, const ConvDims& d, int stride, int pad,
                double* out) {
  for (Index c = 0; c < d.cin; ++c) {
    double* plane = out + c * d.h * d.w;
    for (Index ki = 0; ki < d.k; ++ki) {
      for (Index kj = 0; kj < d.k; ++kj) {
        Index row = (c * d.k + ki) * d.k + kj;
        const double* src = cols.data() + row * d.ho * d.wo;
        for (Index oi = 0; oi < d.ho; ++oi) {
          Index ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= d.h) continue;
          for (Index oj = 0; oj < d.wo; ++oj) {
            Index jj = oj * stride + kj - pad;
            if (jj < 0 || jj >= d.w) continue;
            plane[ii * d.w + jj] += src[oi * d.wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

namespace {

TensorD conv2d_impl(const TensorD& input, const TensorD& kernels, int stride, int pad,
                    bool floor_mode) {
  ConvDims d = conv_dims(input, kernels, stride, pad, floor_mode);
  TensorD out({d.n, d.cout, d.ho, d.wo});
  auto kmat = kernels.matrix(d.cout, d.cin * d.k * d.k);
  MatrixRM<double> cols(d.cin * d.k * d.k, d.ho * d.wo);
  for (Index n = 0; n < d.n; ++n) {
    im2col(input.data() + n * d.cin * d.h * d.w, d, stride, pad, cols);
    Eigen::Map<MatrixRM<double>> omat(out.data() + n * d.cout * d.ho * d.wo, d.cout,
                                      d.ho * d.wo);
    omat.noalias() = kmat * cols;
  }
  return out;
}

Conv2dGrads conv2d_backward_impl(const TensorD& input, const TensorD& kernels, int stride,
                                 int pad, const TensorD& dout, bool floor_mode) {
  ConvDims d = conv_dims(input, kernels, stride, pad, floor_mode);
  require_shape(dout.shape(), {d.n, d.cout, d.ho, d.wo}, "conv2d_backward dout");

  Conv2dGrads g;
  g.dinput = TensorD(input.shape());
  g.dkernels = TensorD(kernels.shape());
  auto kmat = kernels.matrix(d.cout, d.cin * d.k * d.k);
  auto dkmat = g.dkernels.matrix(d.cout, d.cin * d.k * d.k);
  MatrixRM<double> cols(d.cin * d.k * d.k, d.ho * d.wo);
  MatrixRM<double> dcols(d.cin * d.k * d.k, d.ho * d.wo);
  for (Index n = 0; n < d.n; ++n) {
    im2col(input.data() + n * d.cin * d.h * d.w, d, stride, pad, cols);
    Eigen::Map<const MatrixRM<double>> dmat(dout.data() + n * d.cout * d.ho * d.wo, d.cout,
                                            d.ho * d.wo);
    dkmat.noalias() += dmat * cols.transpose();
    dcols.noalias() = kmat.transpose() * dmat;
    col2im_add(dcols, d, stride, pad, g.dinput.data() + n * d.cin * d.h * d.w);
  }
  return g;
}

}  // namespace

TensorD conv2d(const TensorD& input, const TensorD& kernels, int stride, int pad) {
  return conv2d_impl(input, kernels, stride, pad, false);
}

Conv2dGrads conv2d_backward(const TensorD& input, const TensorD& kernels, int stride,
                            int pad, const TensorD& dout) {
  return conv2d_backward_impl(input, kernels, stride, pad, dout, false);
}

TensorD conv2d_floor(const TensorD& input, const TensorD& kernels, int stride, int pad) {
  return conv2d_impl(input, kernels, stride, pad, true);
}

Conv2dGrads conv2d_floor_backward(const TensorD& input, const TensorD& kernels, int stride,
                                  int pad, const TensorD& dout) {
  return conv2d_backward_impl(input, kernels, stride, pad, dout, true);
}

// ---- linear ----

TensorD linear(const TensorD& x, const TensorD& weight, const TensorD& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1)
    fail(ErrorCode::DimMismatch, "linear expects x (N,Din), weight (Dout,Din), bias (Dout)");
  Index n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din || bias.dim(0) != dout)
    fail(ErrorCode::DimMismatch, "linear dims disagree");
  TensorD y({n, dout});
  y.matrix(n, dout).noalias() = x.matrix(n, din) * weight.matrix(dout, din).transpose();
  y.matrix(n, dout).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(bias.data(), dout);
  return y;
}

LinearGrads linear_backward(const TensorD& x, const TensorD& weight, const TensorD& dout) {
  Index n = x.dim(0), din = x.dim(1), dd = weight.dim(0);
  require_shape(dout.shape(), {n, dd}, "linear_backward dout");
  LinearGrads g;
  g.dx = TensorD({n, din});
  g.dweight = TensorD({dd, din});
  g.dbias = TensorD({dd});
  g.dx.matrix(n, din).noalias() = dout.matrix(n, dd) * weight.matrix(dd, din);
  g.dweight.matrix(dd, din).noalias() = dout.matrix(n, dd).transpose() * x.matrix(n, din);
  Eigen::Map<Eigen::RowVectorXd>(g.dbias.data(), dd) =
      dout.matrix(n, dd).colwise().sum();
  return g;
}

// ---- LSTM cell ----

namespace {

void check_lstm_dims(const TensorD& z, const TensorD& h_prev, const TensorD& c_prev,
                     const LstmView& w) {
  Index b = z.dim(0), din = z.dim(1), dh = w.hidden();
  if (w.input() != din) fail(ErrorCode::DimMismatch, "lstm W_Z input dim mismatch");
  require_shape(h_prev.shape(), {b, dh}, "lstm h_prev");
  require_shape(c_prev.shape(), {b, dh}, "lstm c_prev");
  for (int gate = 0; gate < 4; ++gate) {
    require_shape(w.w_h[gate]->shape(), {dh, dh}, "lstm W_H");
    require_shape(w.w_z[gate]->shape(), {dh, din}, "lstm W_Z");
  }
}

}  // namespace

void lstm_cell(const TensorD& z, const TensorD& h_prev, const TensorD& c_prev,
               const LstmView& w, TensorD& h_t, TensorD& c_t, LstmCellCache* cache) {
  check_lstm_dims(z, h_prev, c_prev, w);
  Index b = z.dim(0), din = z.dim(1), dh = w.hidden();

  auto zm = z.matrix(b, din);
  auto hm = h_prev.matrix(b, dh);

  TensorD gates[4];
  for (int gate = 0; gate < 4; ++gate) {
    gates[gate] = TensorD({b, dh});
    gates[gate].matrix(b, dh).noalias() =
        hm * w.w_h[gate]->matrix(dh, dh).transpose() +
        zm * w.w_z[gate]->matrix(dh, din).transpose();
    Pointwise act = gate == kGateG ? Pointwise::Tanh : Pointwise::Sigmoid;
    gates[gate] = pointwise(act, gates[gate]);
  }

  c_t = TensorD({b, dh});
  c_t.flat() = gates[kGateF].flat() * c_prev.flat() +
               gates[kGateI].flat() * gates[kGateG].flat();
  TensorD tanh_c = pointwise(Pointwise::Tanh, c_t);
  h_t = TensorD({b, dh});
  h_t.flat() = gates[kGateO].flat() * tanh_c.flat();

  if (cache) {
    for (int gate = 0; gate < 4; ++gate) cache->gates[gate] = gates[gate];
    cache->tanh_c = std::move(tanh_c);
  }
}

LstmCellGrads lstm_cell_backward(const TensorD& z, const TensorD& h_prev,
                                 const TensorD& c_prev, const LstmView& w,
                                 const LstmCellCache& cache, const TensorD& dh_t,
                                 const TensorD& dc_t, const LstmGradView& grads) {
  Index b = z.dim(0), din = z.dim(1), dh = w.hidden();

  const TensorD& f = cache.gates[kGateF];
  const TensorD& i = cache.gates[kGateI];
  const TensorD& o = cache.gates[kGateO];
  const TensorD& g = cache.gates[kGateG];

  // dc = external + through h_t = o * tanh(c)
  TensorD dc({b, dh});
  dc.flat() = dc_t.flat() + dh_t.flat() * o.flat() * (1.0 - cache.tanh_c.flat().square());

  TensorD da[4];  // pre-activation gradients in gate order
  da[kGateF] = TensorD({b, dh});
  da[kGateF].flat() = dc.flat() * c_prev.flat() * f.flat() * (1.0 - f.flat());
  da[kGateI] = TensorD({b, dh});
  da[kGateI].flat() = dc.flat() * g.flat() * i.flat() * (1.0 - i.flat());
  da[kGateO] = TensorD({b, dh});
  da[kGateO].flat() = dh_t.flat() * cache.tanh_c.flat() * o.flat() * (1.0 - o.flat());
  da[kGateG] = TensorD({b, dh});
  da[kGateG].flat() = dc.flat() * i.flat() * (1.0 - g.flat().square());

  LstmCellGrads out;
  out.dz = TensorD({b, din});
  out.dh_prev = TensorD({b, dh});
  out.dc_prev = TensorD({b, dh});
  out.dc_prev.flat() = dc.flat() * f.flat();

  auto zm = z.matrix(b, din);
  auto hm = h_prev.matrix(b, dh);
  for (int gate = 0; gate < 4; ++gate) {
    auto dam = da[gate].matrix(b, dh);
    out.dh_prev.matrix(b, dh).noalias() += dam * w.w_h[gate]->matrix(dh, dh);
    out.dz.matrix(b, din).noalias() += dam * w.w_z[gate]->matrix(dh, din);
    grads.w_h[gate]->matrix(dh, dh).noalias() += dam.transpose() * hm;
    grads.w_z[gate]->matrix(dh, din).noalias() += dam.transpose() * zm;
  }
  return out;
}

// ---- bidirectional LSTM ----

TensorD bilstm(const TensorD& seq, const LstmView& fwd, const LstmView& bwd,
               BilstmCache* cache) {
  if (seq.rank() != 3) fail(ErrorCode::DimMismatch, "bilstm expects T x B x Din");
  Index t_len = seq.dim(0), b = seq.dim(1), din = seq.dim(2);
  Index dh = fwd.hidden();
  if (bwd.hidden() != dh) fail(ErrorCode::DimMismatch, "bilstm direction widths differ");

  TensorD out({t_len, b, 2 * dh});
  BilstmCache local;
  BilstmCache& c = cache ? *cache : local;
  c.h_fwd.assign(static_cast<size_t>(t_len), TensorD());
  c.c_fwd.assign(static_cast<size_t>(t_len), TensorD());
  c.h_bwd.assign(static_cast<size_t>(t_len), TensorD());
  c.c_bwd.assign(static_cast<size_t>(t_len), TensorD());
  c.cell_fwd.assign(static_cast<size_t>(t_len), LstmCellCache());
  c.cell_bwd.assign(static_cast<size_t>(t_len), LstmCellCache());

  TensorD h = TensorD({b, dh}), cc = TensorD({b, dh});
  for (Index t = 0; t < t_len; ++t) {
    TensorD z({b, din});
    std::copy(seq.data() + t * b * din, seq.data() + (t + 1) * b * din, z.data());
    c.h_fwd[static_cast<size_t>(t)] = h;
    c.c_fwd[static_cast<size_t>(t)] = cc;
    TensorD h_t, c_t;
    lstm_cell(z, h, cc, fwd, h_t, c_t, &c.cell_fwd[static_cast<size_t>(t)]);
    for (Index row = 0; row < b; ++row)
      std::copy(h_t.data() + row * dh, h_t.data() + (row + 1) * dh,
                out.data() + (t * b + row) * 2 * dh);
    h = std::move(h_t);
    cc = std::move(c_t);
  }

  h = TensorD({b, dh});
  cc = TensorD({b, dh});
  for (Index t = t_len - 1; t >= 0; --t) {
    TensorD z({b, din});
    std::copy(seq.data() + t * b * din, seq.data() + (t + 1) * b * din, z.data());
    c.h_bwd[static_cast<size_t>(t)] = h;
    c.c_bwd[static_cast<size_t>(t)] = cc;
    TensorD h_t, c_t;
    lstm_cell(z, h, cc, bwd, h_t, c_t, &c.cell_bwd[static_cast<size_t>(t)]);
    for (Index row = 0; row < b; ++row)
      std::copy(h_t.data() + row * dh, h_t.data() + (row + 1) * dh,
                out.data() + (t * b + row) * 2 * dh + dh);
    h = std::move(h_t);
    cc = std::move(c_t);
  }
  return out;
}

TensorD bilstm_backward(const TensorD& seq, const LstmView& fwd_w, const LstmView& bwd_w,
                        const BilstmCache& cache, const TensorD& dout,
                        const LstmGradView& fwd_g, const LstmGradView& bwd_g) {
  Index t_len = seq.dim(0), b = seq.dim(1), din = seq.dim(2);
  Index dh = fwd_w.hidden();
  require_shape(dout.shape(), {t_len, b, 2 * dh}, "bilstm_backward dout");

  TensorD dseq(seq.shape());

  // forward direction: walk t from the end, carrying dh/dc
  TensorD dh_carry({b, dh}), dc_carry({b, dh});
  for (Index t = t_len - 1; t >= 0; --t) {
    TensorD z({b, din});
    std::copy(seq.data() + t * b * din, seq.data() + (t + 1) * b * din, z.data());
    TensorD dh_t = dh_carry;
    for (Index row = 0; row < b; ++row)
      for (Index j = 0; j < dh; ++j)
        dh_t(row, j) += dout.data()[(t * b + row) * 2 * dh + j];
    auto g = lstm_cell_backward(z, cache.h_fwd[static_cast<size_t>(t)],
                                cache.c_fwd[static_cast<size_t>(t)], fwd_w,
                                cache.cell_fwd[static_cast<size_t>(t)], dh_t, dc_carry,
                                fwd_g);
    for (Index i = 0; i < b * din; ++i) dseq.data()[t * b * din + i] += g.dz[i];
    dh_carry = std::move(g.dh_prev);
    dc_carry = std::move(g.dc_prev);
  }

  // backward direction: walk t from the start
  dh_carry = TensorD({b, dh});
  dc_carry = TensorD({b, dh});
  for (Index t = 0; t < t_len; ++t) {
    TensorD z({b, din});
    std::copy(seq.data() + t * b * din, seq.data() + (t + 1) * b * din, z.data());
    TensorD dh_t = dh_carry;
    for (Index row = 0; row < b; ++row)
      for (Index j = 0; j < dh; ++j)
        dh_t(row, j) += dout.data()[(t * b + row) * 2 * dh + dh + j];
    auto g = lstm_cell_backward(z, cache.h_bwd[static_cast<size_t>(t)],
                                cache.c_bwd[static_cast<size_t>(t)], bwd_w,
                                cache.cell_bwd[static_cast<size_t>(t)], dh_t, dc_carry,
                                bwd_g);
    for (Index i = 0; i < b * din; ++i) dseq.data()[t * b * din + i] += g.dz[i];
    dh_carry = std::move(g.dh_prev);
    dc_carry = std::move(g.dc_prev);
  }
  return dseq;
}

// ---- softmax ----

namespace {

// Iterate the tensor as (outer, axis, inner) blocks.
void softmax_strides(const Shape& shape, Index axis, Index& outer, Index& len, Index& inner) {
  if (axis < 0 || axis >= static_cast<Index>(shape.size()))
    fail(ErrorCode::DimMismatch, "softmax axis out of range");
  outer = 1;
  for (Index i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  len = shape[static_cast<size_t>(axis)];
  inner = 1;
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i)
    inner *= shape[static_cast<size_t>(i)];
}

}  // namespace

TensorD softmax_axis(const TensorD& x, Index axis) {
  Index outer, len, inner;
  softmax_strides(x.shape(), axis, outer, len, inner);
  TensorD y(x.shape());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const double* src = x.data() + o * len * inner + in;
      double* dst = y.data() + o * len * inner + in;
      double m = src[0];
      for (Index t = 1; t < len; ++t) m = std::max(m, src[t * inner]);
      double sum = 0;
      for (Index t = 0; t < len; ++t) {
        double e = std::exp(src[t * inner] - m);
        dst[t * inner] = e;
        sum += e;
      }
      for (Index t = 0; t < len; ++t) dst[t * inner] /= sum;
    }
  }
  return y;
}

TensorD softmax_axis_backward(const TensorD& y, const TensorD& dy, Index axis) {
  if (!y.same_shape(dy)) fail(ErrorCode::DimMismatch, "softmax backward shape mismatch");
  Index outer, len, inner;
  softmax_strides(y.shape(), axis, outer, len, inner);
  TensorD dx(y.shape());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const double* yv = y.data() + o * len * inner + in;
      const double* dv = dy.data() + o * len * inner + in;
      double* dst = dx.data() + o * len * inner + in;
      double dot = 0;
      for (Index t = 0; t < len; ++t) dot += yv[t * inner] * dv[t * inner];
      for (Index t = 0; t < len; ++t)
        dst[t * inner] = yv[t * inner] * (dv[t * inner] - dot);
    }
  }
  return dx;
}

// ---- cross entropy ----

namespace {

Index masked_count(const Tensor<uint8_t>& mask) {
  Index n = 0;
  for (Index i = 0; i < mask.size(); ++i) n += mask[i] ? 1 : 0;
  return n;
}

}  // namespace

double cross_entropy_masked(const TensorD& probs, const Tensor<uint16_t>& target_ids,
                            const Tensor<uint8_t>& mask) {
  if (probs.rank() != 3) fail(ErrorCode::DimMismatch, "probs must be V x H x W");
  Index v = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  require_shape(target_ids.shape(), {h, w}, "cross entropy target");
  require_shape(mask.shape(), {h, w}, "cross entropy mask");
  Index count = masked_count(mask);
  if (count == 0) fail(ErrorCode::BadData, "cross entropy: zero masked-in pixels");

  double loss = 0;
  for (Index i = 0; i < h; ++i) {
    for (Index k = 0; k < w; ++k) {
      if (!mask(i, k)) continue;
      uint16_t cls = target_ids(i, k);
      if (cls >= v) fail(ErrorCode::BadData, "target id outside class dimension");
      double p = probs(cls, i, k);
      loss -= std::log(std::max(p, 1e-300));
    }
  }
  return loss / static_cast<double>(count);
}

TensorD cross_entropy_masked_backward(const TensorD& probs,
                                      const Tensor<uint16_t>& target_ids,
                                      const Tensor<uint8_t>& mask) {
  Index v = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  Index count = masked_count(mask);
  if (count == 0) fail(ErrorCode::BadData, "cross entropy: zero masked-in pixels");
  TensorD dlogits(probs.shape());
  double inv = 1.0 / static_cast<double>(count);
  for (Index i = 0; i < h; ++i) {
    for (Index k = 0; k < w; ++k) {
      if (!mask(i, k)) continue;
      uint16_t cls = target_ids(i, k);
      for (Index c = 0; c < v; ++c) {
        double y = c == cls ? 1.0 : 0.0;
        dlogits(c, i, k) = (probs(c, i, k) - y) * inv;
      }
    }
  }
  return dlogits;
}

// ---- concat / upsample ----

TensorD concat_channels(const TensorD& a, const TensorD& b) {
  if (a.rank() != 4 || b.rank() != 4)
    fail(ErrorCode::DimMismatch, "concat_channels expects 4-d tensors");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    fail(ErrorCode::DimMismatch, "concat_channels T/H/W mismatch");
  Index t = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  TensorD out({t, ca + cb, h, w});
  Index plane = h * w;
  for (Index ti = 0; ti < t; ++ti) {
    std::copy(a.data() + ti * ca * plane, a.data() + (ti + 1) * ca * plane,
              out.data() + ti * (ca + cb) * plane);
    std::copy(b.data() + ti * cb * plane, b.data() + (ti + 1) * cb * plane,
              out.data() + (ti * (ca + cb) + ca) * plane);
  }
  return out;
}

void concat_channels_backward(const TensorD& dout, Index ca, TensorD& da, TensorD& db) {
  Index t = dout.dim(0), ctot = dout.dim(1), h = dout.dim(2), w = dout.dim(3);
  Index cb = ctot - ca;
  da = TensorD({t, ca, h, w});
  db = TensorD({t, cb, h, w});
  Index plane = h * w;
  for (Index ti = 0; ti < t; ++ti) {
    std::copy(dout.data() + ti * ctot * plane, dout.data() + (ti * ctot + ca) * plane,
              da.data() + ti * ca * plane);
    std::copy(dout.data() + (ti * ctot + ca) * plane, dout.data() + (ti + 1) * ctot * plane,
              db.data() + ti * cb * plane);
  }
}

TensorD nearest_upsample(const TensorD& x, Index out_h, Index out_w) {
  if (x.rank() != 3) fail(ErrorCode::DimMismatch, "nearest_upsample expects C x h x w");
  Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < h || out_w < w)
    fail(ErrorCode::DimMismatch, "nearest_upsample only enlarges");
  TensorD out({c, out_h, out_w});
  for (Index ci = 0; ci < c; ++ci)
    for (Index i = 0; i < out_h; ++i) {
      Index si = i * h / out_h;
      for (Index j = 0; j < out_w; ++j) {
        Index sj = j * w / out_w;
        out(ci, i, j) = x(ci, si, sj);
      }
    }
  return out;
}

TensorD nearest_upsample_backward(const Shape& in_shape, const TensorD& dout) {
  Index c = in_shape[0], h = in_shape[1], w = in_shape[2];
  Index out_h = dout.dim(1), out_w = dout.dim(2);
  if (dout.dim(0) != c) fail(ErrorCode::DimMismatch, "upsample backward channel mismatch");
  TensorD dx(in_shape);
  for (Index ci = 0; ci < c; ++ci)
    for (Index i = 0; i < out_h; ++i) {
      Index si = i * h / out_h;
      for (Index j = 0; j < out_w; ++j) {
        Index sj = j * w / out_w;
        dx(ci, si, sj) += dout(ci, i, j);
      }
    }
  return dx;
}

// ---- Adam ----

void adam_step(ParamStore& params, const AdamConfig& cfg, int64_t step_t) {
  if (step_t < 1) fail(ErrorCode::BadConfig, "adam step_t counts from 1");
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_t));
  for (auto& e : params.entries()) {
    if (e.m.size() == 0) {
      e.m = TensorD(e.value.shape());
      e.v = TensorD(e.value.shape());
    }
    e.m.flat() = cfg.beta1 * e.m.flat() + (1.0 - cfg.beta1) * e.grad.flat();
    e.v.flat() = cfg.beta2 * e.v.flat() + (1.0 - cfg.beta2) * e.grad.flat().square();
    e.value.flat() -=
        cfg.lr * (e.m.flat() / bc1) / ((e.v.flat() / bc2).sqrt() + cfg.eps);
  }
}

}  // namespace wstatt
