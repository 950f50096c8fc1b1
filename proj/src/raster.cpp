#include "wstatt/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "wstatt/rng.hpp"

namespace wstatt {

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian");

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'R', 'T', 'S', '1'};

void write_bytes(std::ofstream& os, const void* p, size_t n, const std::string& path) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) fail(ErrorCode::Io, "write failed: " + path);
}

void read_exact(std::ifstream& is, void* p, size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    fail(ErrorCode::TruncatedPayload, "truncated payload: " + path);
}

json read_header(std::ifstream& is, const std::string& path) {
  char magic[4];
  read_exact(is, magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    if (std::memcmp(magic, kMagic, 3) == 0)
      fail(ErrorCode::VersionMismatch,
           std::string("unsupported container version '") + magic[3] + "': " + path);
    fail(ErrorCode::BadMagic, "bad magic: " + path);
  }
  uint32_t hlen = 0;
  read_exact(is, &hlen, 4, path);
  std::string htext(hlen, '\0');
  read_exact(is, htext.data(), hlen, path);
  json h = json::parse(htext, nullptr, false);
  if (h.is_discarded() || !h.is_object())
    fail(ErrorCode::DimMismatch, "header is not a JSON object: " + path);
  return h;
}

void open_and_write(const std::string& path, const json& header, const void* payload,
                    size_t payload_bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::Io, "cannot open for write: " + path);
  std::string htext = header.dump();
  uint32_t hlen = static_cast<uint32_t>(htext.size());
  write_bytes(os, kMagic, 4, path);
  write_bytes(os, &hlen, 4, path);
  write_bytes(os, htext.data(), htext.size(), path);
  write_bytes(os, payload, payload_bytes, path);
}

Shape dims_from_header(const json& h, const std::string& path) {
  if (!h.contains("dims") || !h["dims"].is_array() || h["dims"].size() != 4)
    fail(ErrorCode::DimMismatch, "header dims missing or not length 4: " + path);
  Shape dims;
  for (const auto& d : h["dims"]) {
    if (!d.is_number_integer() || d.get<int64_t>() < 1)
      fail(ErrorCode::DimMismatch, "header dims must be positive integers: " + path);
    dims.push_back(d.get<Index>());
  }
  return dims;
}

void check_keys(const json& h, const std::vector<std::string>& allowed,
                const std::string& path) {
  for (auto it = h.begin(); it != h.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      fail(ErrorCode::DimMismatch, "unexpected header key '" + it.key() + "': " + path);
  }
}

void check_remaining(std::ifstream& is, const std::string& path) {
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0)
    fail(ErrorCode::DimMismatch, "payload larger than dims imply: " + path);
}

}  // namespace

void RasterTimeSeries::validate() const {
  if (values.rank() != 4)
    fail(ErrorCode::DimMismatch, "series values must be 4-d, got rank " +
                                     std::to_string(values.rank()));
  if (t() < 1 || c() < 1) fail(ErrorCode::DimMismatch, "series needs T >= 1 and C >= 1");
  if (static_cast<Index>(band_names.size()) != c())
    fail(ErrorCode::DimMismatch, "band_names count " + std::to_string(band_names.size()) +
                                     " != C " + std::to_string(c()));
  if (step_days < 1) fail(ErrorCode::DimMismatch, "step_days must be >= 1");
  for (Index i = 0; i < values.size(); ++i) {
    float v = values[i];
    if (!std::isfinite(v) && !is_nodata(v))
      fail(ErrorCode::BadData, "non-finite value outside nodata cells");
  }
}

void LabelGrid::validate() const {
  if (ids.rank() != 2) fail(ErrorCode::DimMismatch, "label ids must be 2-d");
  if (class_table.empty()) fail(ErrorCode::DimMismatch, "empty class table");
  if (unknown_id >= class_table.size())
    fail(ErrorCode::DimMismatch, "unknown_id outside class table");
  for (Index i = 0; i < ids.size(); ++i)
    if (ids[i] >= class_table.size())
      fail(ErrorCode::BadData, "label id " + std::to_string(ids[i]) + " outside class table");
}

Index EvalMask::count() const {
  Index n = 0;
  for (Index i = 0; i < valid.size(); ++i) n += valid[i] ? 1 : 0;
  return n;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Dropped: return "dropped";
  }
  return "dropped";
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "dropped") return Split::Dropped;
  fail(ErrorCode::BadData, "unknown split tag '" + s + "'");
}

void write_rts(const std::string& path, const RasterTimeSeries& series) {
  series.validate();
  json h;
  h["dims"] = {series.t(), series.c(), series.h(), series.w()};
  h["dtype"] = "f32";
  h["band_names"] = series.band_names;
  h["step_days"] = series.step_days;
  h["origin_day"] = series.origin_day;
  if (series.nodata_value)
    h["nodata"] = *series.nodata_value;
  else
    h["nodata"] = nullptr;
  open_and_write(path, h, series.values.data(),
                 static_cast<size_t>(series.values.size()) * sizeof(float));
}

RasterTimeSeries read_rts(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open: " + path);
  json h = read_header(is, path);
  check_keys(h, {"dims", "dtype", "band_names", "step_days", "origin_day", "nodata"}, path);
  if (!h.contains("dtype") || h["dtype"] != "f32")
    fail(ErrorCode::DimMismatch, "expected dtype f32: " + path);
  Shape dims = dims_from_header(h, path);

  RasterTimeSeries out;
  out.values = Tensor<float>(dims);
  if (!h.contains("band_names") || !h["band_names"].is_array())
    fail(ErrorCode::DimMismatch, "band_names missing: " + path);
  out.band_names = h["band_names"].get<std::vector<std::string>>();
  if (!h.contains("step_days") || !h["step_days"].is_number_integer())
    fail(ErrorCode::DimMismatch, "step_days missing: " + path);
  out.step_days = h["step_days"].get<int>();
  if (!h.contains("origin_day") || !h["origin_day"].is_number_integer())
    fail(ErrorCode::DimMismatch, "origin_day missing: " + path);
  out.origin_day = h["origin_day"].get<int>();
  if (!h.contains("nodata")) fail(ErrorCode::DimMismatch, "nodata key missing: " + path);
  if (!h["nodata"].is_null()) {
    if (!h["nodata"].is_number()) fail(ErrorCode::DimMismatch, "nodata must be a number or null: " + path);
    out.nodata_value = h["nodata"].get<float>();
    if (!std::isfinite(*out.nodata_value))
      fail(ErrorCode::DimMismatch, "nodata sentinel must be finite: " + path);
  }
  read_exact(is, out.values.data(), static_cast<size_t>(out.values.size()) * sizeof(float), path);
  check_remaining(is, path);
  out.validate();
  return out;
}

void write_labels(const std::string& path, const LabelGrid& labels) {
  labels.validate();
  json h;
  h["dims"] = {1, 1, labels.h(), labels.w()};
  h["dtype"] = "u16";
  h["class_table"] = labels.class_table;
  h["unknown_id"] = labels.unknown_id;
  open_and_write(path, h, labels.ids.data(),
                 static_cast<size_t>(labels.ids.size()) * sizeof(uint16_t));
}

LabelGrid read_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open: " + path);
  json h = read_header(is, path);
  check_keys(h, {"dims", "dtype", "class_table", "unknown_id"}, path);
  if (!h.contains("dtype") || h["dtype"] != "u16")
    fail(ErrorCode::DimMismatch, "expected dtype u16: " + path);
  Shape dims = dims_from_header(h, path);
  if (dims[0] != 1 || dims[1] != 1)
    fail(ErrorCode::DimMismatch, "label dims must be [1,1,H,W]: " + path);

  LabelGrid out;
  out.ids = Tensor<uint16_t>({dims[2], dims[3]});
  if (!h.contains("class_table") || !h["class_table"].is_array())
    fail(ErrorCode::DimMismatch, "class_table missing: " + path);
  out.class_table = h["class_table"].get<std::vector<std::string>>();
  if (!h.contains("unknown_id") || !h["unknown_id"].is_number_integer())
    fail(ErrorCode::DimMismatch, "unknown_id missing: " + path);
  out.unknown_id = h["unknown_id"].get<uint16_t>();
  read_exact(is, out.ids.data(), static_cast<size_t>(out.ids.size()) * sizeof(uint16_t), path);
  check_remaining(is, path);
  out.validate();
  return out;
}

void write_norm_stats(const std::string& path, const NormStats& stats) {
  json j;
  j["per_band_min"] = stats.per_band_min;
  j["per_band_max"] = stats.per_band_max;
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorCode::Io, "cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

NormStats read_norm_stats(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::Io, "cannot open: " + path);
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::BadData, "invalid JSON: " + path);
  NormStats s;
  s.per_band_min = j.at("per_band_min").get<std::vector<float>>();
  s.per_band_max = j.at("per_band_max").get<std::vector<float>>();
  if (s.per_band_min.size() != s.per_band_max.size())
    fail(ErrorCode::DimMismatch, "norm stats min/max lengths differ: " + path);
  return s;
}

void write_grid_layout(const std::string& path, const GridLayout& layout) {
  json j;
  j["grid_px"] = layout.grid_px;
  j["cells"] = json::array();
  for (const auto& c : layout.cells) {
    json jc;
    jc["row0"] = c.row0;
    jc["col0"] = c.col0;
    jc["split"] = split_name(c.split);
    if (c.split == Split::Dropped) jc["reason"] = c.drop_reason;
    j["cells"].push_back(jc);
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorCode::Io, "cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

GridLayout read_grid_layout(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::Io, "cannot open: " + path);
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::BadData, "invalid JSON: " + path);
  GridLayout out;
  out.grid_px = j.at("grid_px").get<Index>();
  for (const auto& jc : j.at("cells")) {
    GridCell c;
    c.row0 = jc.at("row0").get<Index>();
    c.col0 = jc.at("col0").get<Index>();
    c.split = split_from_name(jc.at("split").get<std::string>());
    if (jc.contains("reason")) c.drop_reason = jc["reason"].get<std::string>();
    out.cells.push_back(c);
  }
  return out;
}

void write_eval_mask(const std::string& path, const EvalMask& mask) {
  json j;
  j["h"] = mask.h();
  j["w"] = mask.w();
  std::vector<std::string> rows;
  for (Index i = 0; i < mask.h(); ++i) {
    std::string row(static_cast<size_t>(mask.w()), '0');
    for (Index k = 0; k < mask.w(); ++k)
      if (mask.valid(i, k)) row[static_cast<size_t>(k)] = '1';
    rows.push_back(std::move(row));
  }
  j["rows"] = rows;
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorCode::Io, "cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

EvalMask read_eval_mask(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::Io, "cannot open: " + path);
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::BadData, "invalid JSON: " + path);
  Index h = j.at("h").get<Index>();
  Index w = j.at("w").get<Index>();
  EvalMask mask;
  mask.valid = Tensor<uint8_t>({h, w});
  auto rows = j.at("rows").get<std::vector<std::string>>();
  if (static_cast<Index>(rows.size()) != h)
    fail(ErrorCode::DimMismatch, "mask rows do not match h: " + path);
  for (Index i = 0; i < h; ++i) {
    if (static_cast<Index>(rows[static_cast<size_t>(i)].size()) != w)
      fail(ErrorCode::DimMismatch, "mask row width mismatch: " + path);
    for (Index k = 0; k < w; ++k)
      mask.valid(i, k) = rows[static_cast<size_t>(i)][static_cast<size_t>(k)] == '1' ? 1 : 0;
  }
  return mask;
}

NormStats compute_norm_stats(const std::vector<const RasterTimeSeries*>& collection) {
  if (collection.empty()) fail(ErrorCode::BadData, "empty series collection");
  Index c = collection[0]->c();
  for (const auto* s : collection)
    if (s->c() != c) fail(ErrorCode::DimMismatch, "inconsistent band count across series");

  NormStats stats;
  stats.per_band_min.assign(static_cast<size_t>(c), std::numeric_limits<float>::max());
  stats.per_band_max.assign(static_cast<size_t>(c), std::numeric_limits<float>::lowest());
  std::vector<bool> seen(static_cast<size_t>(c), false);

  for (const auto* s : collection) {
    Index plane = s->h() * s->w();
    for (Index t = 0; t < s->t(); ++t) {
      for (Index b = 0; b < c; ++b) {
        const float* p = s->values.data() + (t * c + b) * plane;
        for (Index i = 0; i < plane; ++i) {
          float v = p[i];
          if (s->is_nodata(v)) continue;
          seen[static_cast<size_t>(b)] = true;
          auto& mn = stats.per_band_min[static_cast<size_t>(b)];
          auto& mx = stats.per_band_max[static_cast<size_t>(b)];
          mn = std::min(mn, v);
          mx = std::max(mx, v);
        }
      }
    }
  }
  for (Index b = 0; b < c; ++b) {
    if (!seen[static_cast<size_t>(b)]) {
      std::string name = static_cast<size_t>(b) < collection[0]->band_names.size()
                             ? collection[0]->band_names[static_cast<size_t>(b)]
                             : std::to_string(b);
      fail(ErrorCode::BadData, "band '" + name + "' has no valid (non-nodata) cells");
    }
  }
  return stats;
}

RasterTimeSeries normalize_minmax(const RasterTimeSeries& series, const NormStats& stats) {
  if (static_cast<Index>(stats.per_band_min.size()) != series.c())
    fail(ErrorCode::DimMismatch, "norm stats band count " +
                                     std::to_string(stats.per_band_min.size()) +
                                     " != series C " + std::to_string(series.c()));
  RasterTimeSeries out = series;
  Index plane = series.h() * series.w();
  for (Index t = 0; t < series.t(); ++t) {
    for (Index b = 0; b < series.c(); ++b) {
      float mn = stats.per_band_min[static_cast<size_t>(b)];
      float mx = stats.per_band_max[static_cast<size_t>(b)];
      float range = mx - mn;
      float* p = out.values.data() + (t * series.c() + b) * plane;
      for (Index i = 0; i < plane; ++i) {
        if (series.is_nodata(p[i])) continue;
        p[i] = range > 0.0f ? (p[i] - mn) / range : 0.0f;
      }
    }
  }
  return out;
}

GridLayout partition_grids(Index scene_h, Index scene_w, Index grid_px,
                           const LabelGrid* labels,
                           const std::vector<uint16_t>& crop_ids,
                           double min_crop_frac,
                           const std::function<Split(Index kept_ordinal)>& assign) {
  if (grid_px <= 0 || grid_px > scene_h || grid_px > scene_w)
    fail(ErrorCode::BadConfig, "grid_px " + std::to_string(grid_px) +
                                   " invalid for scene " + std::to_string(scene_h) + "x" +
                                   std::to_string(scene_w));
  if (labels && (labels->h() != scene_h || labels->w() != scene_w))
    fail(ErrorCode::DimMismatch, "labels do not match scene dims");

  GridLayout layout;
  layout.grid_px = grid_px;
  Index kept = 0;
  for (Index r0 = 0; r0 < scene_h; r0 += grid_px) {
    for (Index c0 = 0; c0 < scene_w; c0 += grid_px) {
      GridCell cell;
      cell.row0 = r0;
      cell.col0 = c0;
      if (r0 + grid_px > scene_h || c0 + grid_px > scene_w) {
        cell.split = Split::Dropped;
        cell.drop_reason = "partial";
      } else if (labels) {
        Index crop = 0;
        for (Index i = r0; i < r0 + grid_px; ++i)
          for (Index k = c0; k < c0 + grid_px; ++k) {
            uint16_t id = labels->ids(i, k);
            if (std::find(crop_ids.begin(), crop_ids.end(), id) != crop_ids.end()) ++crop;
          }
        double frac = static_cast<double>(crop) / static_cast<double>(grid_px * grid_px);
        if (frac <= min_crop_frac) {
          cell.split = Split::Dropped;
          cell.drop_reason = "low-crop";
        } else {
          cell.split = assign(kept++);
        }
      } else {
        cell.split = assign(kept++);
      }
      layout.cells.push_back(cell);
    }
  }
  return layout;
}

std::function<Split(Index)> seeded_split_assign(Index n_kept, double train_frac,
                                                double val_frac, uint64_t seed) {
  std::vector<Index> order(static_cast<size_t>(n_kept));
  for (Index i = 0; i < n_kept; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);
  auto n_train = static_cast<Index>(std::llround(train_frac * static_cast<double>(n_kept)));
  auto n_val = static_cast<Index>(std::llround(val_frac * static_cast<double>(n_kept)));
  std::vector<Split> tags(static_cast<size_t>(n_kept), Split::Test);
  for (Index i = 0; i < n_kept; ++i) {
    Split s = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    tags[static_cast<size_t>(order[static_cast<size_t>(i)])] = s;
  }
  return [tags](Index ordinal) {
    if (ordinal < 0 || ordinal >= static_cast<Index>(tags.size()))
      fail(ErrorCode::BadData, "split ordinal out of range");
    return tags[static_cast<size_t>(ordinal)];
  };
}

LabelGrid erode_labels(const LabelGrid& labels, int levels) {
  if (levels < 0) fail(ErrorCode::BadConfig, "erosion levels must be >= 0");
  LabelGrid cur = labels;
  Index h = labels.h(), w = labels.w();
  for (int lvl = 0; lvl < levels; ++lvl) {
    LabelGrid next = cur;
    for (Index i = 0; i < h; ++i) {
      for (Index k = 0; k < w; ++k) {
        uint16_t id = cur.ids(i, k);
        if (id == cur.unknown_id) continue;
        bool boundary = false;
        for (Index di = -1; di <= 1 && !boundary; ++di)
          for (Index dk = -1; dk <= 1 && !boundary; ++dk) {
            if (di == 0 && dk == 0) continue;
            Index ni = i + di, nk = k + dk;
            if (ni < 0 || nk < 0 || ni >= h || nk >= w) continue;
            uint16_t nid = cur.ids(ni, nk);
            if (nid != id && nid != cur.unknown_id) boundary = true;
          }
        if (boundary) next.ids(i, k) = cur.unknown_id;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

LabelGrid remove_small_components(const LabelGrid& labels, Index min_size, int connectivity) {
  if (min_size < 1) fail(ErrorCode::BadConfig, "min_size must be >= 1");
  if (connectivity != 4 && connectivity != 8)
    fail(ErrorCode::BadConfig, "connectivity must be 4 or 8");

  Index h = labels.h(), w = labels.w();
  LabelGrid out = labels;
  std::vector<int32_t> comp(static_cast<size_t>(h * w), -1);
  std::vector<Index> stack;

  auto idx = [w](Index i, Index k) { return i * w + k; };
  int32_t n_comp = 0;
  std::vector<Index> sizes;
  std::vector<Index> seeds;

  for (Index i = 0; i < h; ++i) {
    for (Index k = 0; k < w; ++k) {
      if (comp[static_cast<size_t>(idx(i, k))] >= 0) continue;
      uint16_t id = labels.ids(i, k);
      if (id == labels.unknown_id) continue;
      int32_t c = n_comp++;
      Index size = 0;
      stack.clear();
      stack.push_back(idx(i, k));
      comp[static_cast<size_t>(idx(i, k))] = c;
      while (!stack.empty()) {
        Index p = stack.back();
        stack.pop_back();
        ++size;
        Index pi = p / w, pk = p % w;
        for (Index di = -1; di <= 1; ++di) {
          for (Index dk = -1; dk <= 1; ++dk) {
            if (di == 0 && dk == 0) continue;
            if (connectivity == 4 && di != 0 && dk != 0) continue;
            Index ni = pi + di, nk = pk + dk;
            if (ni < 0 || nk < 0 || ni >= h || nk >= w) continue;
            Index q = idx(ni, nk);
            if (comp[static_cast<size_t>(q)] >= 0) continue;
            if (labels.ids(ni, nk) != id) continue;
            comp[static_cast<size_t>(q)] = c;
            stack.push_back(q);
          }
        }
      }
      sizes.push_back(size);
      seeds.push_back(idx(i, k));
    }
  }

  for (Index i = 0; i < h; ++i)
    for (Index k = 0; k < w; ++k) {
      int32_t c = comp[static_cast<size_t>(idx(i, k))];
      if (c >= 0 && sizes[static_cast<size_t>(c)] < min_size)
        out.ids(i, k) = labels.unknown_id;
    }
  return out;
}

EvalMask boundary_exclusion_mask(Index h, Index w, Index margin) {
  EvalMask mask;
  mask.valid = Tensor<uint8_t>({h, w});
  if (margin < 0) fail(ErrorCode::BadConfig, "margin must be >= 0");
  if (2 * margin >= std::min(h, w)) return mask;  // all false
  for (Index i = margin; i < h - margin; ++i)
    for (Index k = margin; k < w - margin; ++k) mask.valid(i, k) = 1;
  return mask;
}

Index truncated_len(int origin_day, int step_days, Index t, int months) {
  if (months < 1 || months > 12) fail(ErrorCode::BadConfig, "months must be in [1,12]");
  // Half-day rounding on the cutoff so a 12-month truncation keeps the
  // whole year (day 365 vs cutoff 365.0 exactly).
  double cutoff = static_cast<double>(months) * (365.0 / 12.0) + 0.5;
  Index keep = 0;
  while (keep < t && static_cast<double>(origin_day) + static_cast<double>(keep) * step_days < cutoff)
    ++keep;
  return keep;
}

RasterTimeSeries truncate_months(const RasterTimeSeries& series, int months) {
  Index keep = truncated_len(series.origin_day, series.step_days, series.t(), months);
  if (keep == 0)
    fail(ErrorCode::BadData, "truncation to " + std::to_string(months) +
                                 " months keeps no timestamps (origin_day " +
                                 std::to_string(series.origin_day) + ", step_days " +
                                 std::to_string(series.step_days) + ")");
  if (keep == series.t()) return series;
  RasterTimeSeries out = series;
  out.values = Tensor<float>({keep, series.c(), series.h(), series.w()});
  std::copy(series.values.data(), series.values.data() + out.values.size(),
            out.values.data());
  return out;
}

}  // namespace wstatt
