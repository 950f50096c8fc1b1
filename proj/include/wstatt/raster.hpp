#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wstatt/tensor.hpp"

namespace wstatt {

// Pixel time series container for both satellite composites and daily
// weather. values is (T, C, H, W) row-major. Nodata is a sentinel value:
// a cell is nodata iff it equals nodata_value, which keeps file roundtrips
// bit-exact without a separate mask plane.
struct RasterTimeSeries {
  Tensor<float> values;  // T x C x H x W
  std::vector<std::string> band_names;
  int step_days = 1;
  int origin_day = 1;  // day-of-year of the first timestamp
  std::optional<float> nodata_value;

  Index t() const { return values.dim(0); }
  Index c() const { return values.dim(1); }
  Index h() const { return values.dim(2); }
  Index w() const { return values.dim(3); }

  bool is_nodata(float v) const { return nodata_value && v == *nodata_value; }

  void validate() const;
};

struct LabelGrid {
  Tensor<uint16_t> ids;  // H x W
  std::vector<std::string> class_table;
  uint16_t unknown_id = 0;

  Index h() const { return ids.dim(0); }
  Index w() const { return ids.dim(1); }

  void validate() const;
};

struct NormStats {
  std::vector<float> per_band_min;
  std::vector<float> per_band_max;
};

enum class Split { Train, Val, Test, Dropped };

std::string split_name(Split s);
Split split_from_name(const std::string& s);

struct GridCell {
  Index row0 = 0;
  Index col0 = 0;
  Split split = Split::Dropped;
  std::string drop_reason;  // set when split == Dropped
};

struct GridLayout {
  Index grid_px = 0;
  std::vector<GridCell> cells;
};

struct EvalMask {
  Tensor<uint8_t> valid;  // H x W, 1 = included

  Index h() const { return valid.dim(0); }
  Index w() const { return valid.dim(1); }
  Index count() const;
};

// ---- container I/O (format: magic "RTS1", u32 header length, JSON header,
// little-endian payload) ----

void write_rts(const std::string& path, const RasterTimeSeries& series);
RasterTimeSeries read_rts(const std::string& path);

void write_labels(const std::string& path, const LabelGrid& labels);
LabelGrid read_labels(const std::string& path);

void write_norm_stats(const std::string& path, const NormStats& stats);
NormStats read_norm_stats(const std::string& path);

void write_grid_layout(const std::string& path, const GridLayout& layout);
GridLayout read_grid_layout(const std::string& path);

void write_eval_mask(const std::string& path, const EvalMask& mask);
EvalMask read_eval_mask(const std::string& path);

// ---- preprocessing ----

// Per-band min/max over every non-nodata cell of every series.
NormStats compute_norm_stats(const std::vector<const RasterTimeSeries*>& collection);

// (v - min) / (max - min) per band; a degenerate band (max == min) maps to 0.
// No clamping: inputs outside the stats range leave [0,1]. Nodata untouched.
RasterTimeSeries normalize_minmax(const RasterTimeSeries& series, const NormStats& stats);

// Tiles the scene with grid_px cells. Cells that spill past the scene edge
// are dropped as "partial"; cells whose crop fraction is <= min_crop_frac
// are dropped as "low-crop" (skipped when labels == nullptr); the rest get
// assign(kept_ordinal). crop fraction counts ids in crop_ids.
GridLayout partition_grids(Index scene_h, Index scene_w, Index grid_px,
                           const LabelGrid* labels,
                           const std::vector<uint16_t>& crop_ids,
                           double min_crop_frac,
                           const std::function<Split(Index kept_ordinal)>& assign);

// Seeded train/val/test assignment over kept cells: the first
// round(train_frac*n) of a shuffled ordinal list train, then val, rest test.
std::function<Split(Index)> seeded_split_assign(Index n_kept, double train_frac,
                                                double val_frac, uint64_t seed);

// One erosion level turns a pixel Unknown when any in-bounds 8-neighbor
// carries a different non-Unknown id. Unknown itself never erodes a
// neighbor (it is background) and never recovers.
LabelGrid erode_labels(const LabelGrid& labels, int levels);

// Relabels same-id connected components (Unknown excluded) smaller than
// min_size to Unknown. connectivity is 4 or 8.
LabelGrid remove_small_components(const LabelGrid& labels, Index min_size,
                                  int connectivity = 8);

// Valid iff row in [margin, h-margin) and col in [margin, w-margin);
// all-false when the margins swallow the scene.
EvalMask boundary_exclusion_mask(Index h, Index w, Index margin);

// Keeps timestamps with day-of-year origin_day + t*step_days below
// months * 365/12 + half a day. Months are 365/12 days long by convention;
// the half-day slack makes 12 months keep a full daily year.
RasterTimeSeries truncate_months(const RasterTimeSeries& series, int months);

// Number of timestamps truncate_months would keep, without copying.
Index truncated_len(int origin_day, int step_days, Index t, int months);

}  // namespace wstatt
