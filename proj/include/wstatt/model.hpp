#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wstatt/kernels.hpp"
#include "wstatt/raster.hpp"

namespace wstatt {

enum class ModelMode { Wstatt, StattAblation };

std::string mode_name(ModelMode m);
ModelMode mode_from_name(const std::string& s);

struct ModelConfig {
  Index sat_channels = 10;
  Index weather_channels = 7;
  Index classes = 6;  // V, Unknown included
  std::vector<Index> conv_widths = {32, 64, 128};
  Index lstm_hidden_sat = 128;  // per direction
  Index lstm_hidden_wx = 32;    // per direction
  Index attention_hidden = 0;   // 0 = single linear layer
  ModelMode mode = ModelMode::Wstatt;
  int sat_step_days = 15;
  Index patch_px = 64;

  Index levels() const { return static_cast<Index>(conv_widths.size()); }
  Index bottleneck_px() const { return patch_px >> levels(); }
  // channel count of H_SW entering attention and aggregation
  Index fused_channels() const {
    Index c = 2 * lstm_hidden_sat;
    if (mode == ModelMode::Wstatt) c += 2 * lstm_hidden_wx;
    return c;
  }
  void validate() const;
};

// Registers every parameter tensor (fixed order) and fills it with seeded
// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) values.
void init_params(const ModelConfig& cfg, uint64_t seed, ParamStore& params);

// ---- per-stage caches (everything the hand-rolled backward needs) ----

struct SatEncoderCache {
  TensorD input;                  // T x Cs x P x P
  std::vector<TensorD> keep_out;  // per level, post-relu; these are the skips
  std::vector<TensorD> down_out;  // per level, post-relu
  TensorD z_seq;                  // T x B x C  (B = bottleneck pixels)
  BilstmCache lstm;
  TensorD h_seq;                  // T x B x 2Dh
};

struct WxEncoderCache {
  TensorD seq;  // T_w x 1 x Cw
  BilstmCache lstm;
  TensorD h_seq;  // T_w x 1 x 2Dh_wx
};

struct AttendCache {
  TensorD rows;        // (T*H'*W') x D channel vectors
  TensorD hidden_out;  // post-tanh, only when attention_hidden > 0
  TensorD logits;      // T x H' x W'
  TensorD alpha;       // T x H' x W'
};

struct DecodeCache {
  TensorD input;                 // C_SW
  std::vector<TensorD> up_out;   // per step, upsampled input
  std::vector<TensorD> cat_out;  // per step, concat with the aggregated skip
  std::vector<TensorD> conv_out; // per step, post-relu
  TensorD head_rows;             // (P*P) x w0
};

struct ForwardCache {
  SatEncoderCache sat;
  TensorD h_s;  // T x 2Dh x H' x W'
  WxEncoderCache wx;
  TensorD h_w;                  // T_w x 2Dh_wx
  std::vector<Index> align_idx; // selected weather embedding per satellite step
  TensorD hs_w;                 // T x 2Dh_wx
  TensorD h_sw;                 // T x D x H' x W'
  AttendCache attend;
  TensorD c_sw;                     // D x H' x W'
  std::vector<TensorD> skips_agg;   // per level
  DecodeCache decode;
  TensorD logits;  // V x P x P
  TensorD probs;   // V x P x P
};

struct AttentionProfile {
  TensorD alpha;  // T x H' x W'
  Index truncation_t = 0;
  std::string patch_id;
};

struct ForwardResult {
  TensorD probs;   // V x P x P
  TensorD logits;  // V x P x P
  AttentionProfile attention;
};

// ---- architecture stages ----

// Shared-weight conv stack per timestamp, then the per-pixel bidirectional
// recurrence over the bottleneck. Returns H_S as T x 2Dh x H' x W'.
TensorD encode_satellite(const TensorD& sat, const ModelConfig& cfg,
                         const ParamStore& params, SatEncoderCache& cache);
// dh_s plus per-level skip gradients -> gradient of the satellite input
// (discarded by callers); accumulates parameter gradients.
TensorD encode_satellite_backward(const TensorD& dh_s,
                                  const std::vector<TensorD>& dskips,
                                  const ModelConfig& cfg, ParamStore& params,
                                  const SatEncoderCache& cache);

// Weather is one cell per patch; a bidirectional LSTM with no convolutions.
// weather is T_w x Cw x 1 x 1; returns T_w x 2Dh_wx.
TensorD encode_weather(const TensorD& weather, const ModelConfig& cfg,
                       const ParamStore& params, WxEncoderCache& cache);
void encode_weather_backward(const TensorD& dh_w, const ModelConfig& cfg,
                             ParamStore& params, const WxEncoderCache& cache);

// Equally spaced selection: stride floor(T_w/T_s), index (t+1)*s - 1,
// clamped to the last embedding. Selection, never averaging.
std::vector<Index> align_weather_indices(Index t_w, Index t_s);
TensorD align_weather(const TensorD& h_w, Index t_s);

// Broadcast each weather embedding over the bottleneck grid and concatenate
// along channels.
TensorD fuse(const TensorD& h_s, const TensorD& hs_w);

// Per-pixel attention over time: logits from each pixel's channel vector,
// softmax across t at every (i,j).
TensorD attend(const TensorD& h_sw, const ModelConfig& cfg, const ParamStore& params,
               AttendCache& cache);
// Returns dH_SW contribution; accumulates attention parameter gradients.
TensorD attend_backward(const TensorD& dalpha, const ModelConfig& cfg,
                        ParamStore& params, const AttendCache& cache);

// C_SW(i,j) = sum_t alpha_t(i,j) H_SW^t(i,j).
TensorD aggregate(const TensorD& h_sw, const TensorD& alpha);
void aggregate_backward(const TensorD& h_sw, const TensorD& alpha, const TensorD& dc,
                        TensorD& dh_sw, TensorD& dalpha);

// Skip maps aggregated with alpha nearest-upsampled to each level.
std::vector<TensorD> aggregate_skips(const std::vector<TensorD>& skips,
                                     const TensorD& alpha);
void aggregate_skips_backward(const std::vector<TensorD>& skips, const TensorD& alpha,
                              const std::vector<TensorD>& dskips_agg,
                              std::vector<TensorD>& dskips, TensorD& dalpha);

// Upsample, concat aggregated skip, conv, relu per level; per-pixel linear
// head to V channels. Softmax is the caller's.
TensorD decode(const TensorD& c_sw, const std::vector<TensorD>& skips_agg,
               const ModelConfig& cfg, const ParamStore& params, DecodeCache& cache);
void decode_backward(const TensorD& dlogits, const ModelConfig& cfg, ParamStore& params,
                     const DecodeCache& cache, TensorD& dc_sw,
                     std::vector<TensorD>& dskips_agg);

// ---- whole pipeline ----

// sat T_s x Cs x P x P, weather T_w x Cw x 1 x 1 (ignored in ablation mode).
ForwardResult forward(const TensorD& sat, const TensorD& weather, const ModelConfig& cfg,
                      const ParamStore& params, ForwardCache* cache = nullptr);

// Backward from dlogits through every stage; accumulates all parameter
// gradients in params.
void backward(const TensorD& dlogits, const ModelConfig& cfg, ParamStore& params,
              const ForwardCache& cache);

struct EarlyPrediction {
  Tensor<uint16_t> label_map;  // P x P argmax
  ForwardResult result;
};

// Truncates both modalities to the month horizon and runs forward over the
// shortened sequences only.
EarlyPrediction predict_early(const TensorD& sat_full, int sat_origin_day,
                              const TensorD& weather_full, int wx_origin_day, int months,
                              const ModelConfig& cfg, const ParamStore& params);

Tensor<uint16_t> argmax_labels(const TensorD& probs);

// ---- checkpoint I/O (magic "WSTC") ----

struct Checkpoint {
  ModelConfig config;
  NormStats sat_stats;
  NormStats wx_stats;
  std::vector<std::string> class_table;
  int epoch = 0;
  uint64_t seed = 0;
  ParamStore params;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt, bool with_moments);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace wstatt
