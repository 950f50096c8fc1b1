#include "wstatt/phenology.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "wstatt/rng.hpp"

namespace wstatt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {
constexpr double kTwoPi = 6.28318530717958647692;

double mean_temp(const MeanTempCurve& c, double day) {
  return c.offset_c + c.amplitude_c * std::sin(kTwoPi * (day - c.phase_day) / 365.0);
}

// Magnus form, Pa
double sat_vapor_pressure(double temp_c) {
  return 610.78 * std::exp(17.27 * temp_c / (temp_c + 237.3));
}
}  // namespace

void CropSpec::validate() const {
  if (!(gdd_plant < gdd_peak && gdd_peak < gdd_harvest))
    fail(ErrorCode::BadConfig, "crop '" + name + "' needs gdd_plant < gdd_peak < gdd_harvest");
  for (double v : peak_signature)
    if (v < 0.0 || v > 1.0) fail(ErrorCode::BadConfig, "crop '" + name + "' peak signature outside [0,1]");
  for (double v : bare_signature)
    if (v < 0.0 || v > 1.0) fail(ErrorCode::BadConfig, "crop '" + name + "' bare signature outside [0,1]");
  if (peak_signature.size() != bare_signature.size())
    fail(ErrorCode::BadConfig, "crop '" + name + "' signature lengths differ");
}

void SceneSpec::validate() const {
  if (h < 1 || w < 1 || field_size < 1) fail(ErrorCode::BadConfig, "scene dims must be positive");
  if (crop_mix.empty()) fail(ErrorCode::BadConfig, "crop_mix is empty");
  double total = 0;
  for (const auto& [crop, frac] : crop_mix) {
    crop.validate();
    if (static_cast<Index>(crop.peak_signature.size()) != sat_bands)
      fail(ErrorCode::BadConfig, "crop '" + crop.name + "' signature length != sat_bands");
    if (crop.class_id == 0) fail(ErrorCode::BadConfig, "class id 0 is reserved for Unknown");
    total += frac;
  }
  if (std::abs(total - 1.0) > 1e-9) fail(ErrorCode::BadConfig, "crop_mix fractions must sum to 1");
  if (cloud_prob < 0.0 || cloud_prob >= 1.0) fail(ErrorCode::BadConfig, "cloud_prob must be in [0,1)");
  if (noise_sd < 0.0) fail(ErrorCode::BadConfig, "noise_sd must be >= 0");
}

RasterTimeSeries gen_weather(const WeatherParams& params) {
  if (params.days < 1) fail(ErrorCode::BadConfig, "weather days must be >= 1");
  Index t = params.days, c = 7, h = params.h, w = params.w;
  RasterTimeSeries out;
  out.values = Tensor<float>({t, c, h, w});
  out.band_names = daymet_band_roles();
  out.step_days = 1;
  out.origin_day = 1;

  Rng base(params.seed);
  Rng temp_rng = base.fork(0);
  Rng prcp_rng = base.fork(1);

  for (Index d = 0; d < t; ++d) {
    double day = static_cast<double>(d + 1);
    double mean = mean_temp(params.mean_temp_curve, day);
    double half = params.temp_spread_c / 2.0;
    double a = mean + half + temp_rng.normal(0.0, params.temp_noise_sd);
    double b = mean - half + temp_rng.normal(0.0, params.temp_noise_sd);
    double tmax = std::max(a, b), tmin = std::min(a, b);

    double dayl = 43200.0 + 14400.0 * std::sin(kTwoPi * (day - 80.0) / 365.0);
    double prcp = prcp_rng.exponential(params.precip_rate_mm);
    double srad = 250.0 + 150.0 * std::sin(kTwoPi * (day - 80.0) / 365.0);
    double swe = tmin < 0.0 ? -10.0 * tmin : 0.0;
    double vp = sat_vapor_pressure(tmin);

    const double bands[7] = {dayl, prcp, srad, swe, tmax, tmin, vp};
    for (Index b2 = 0; b2 < c; ++b2)
      for (Index i = 0; i < h; ++i)
        for (Index k = 0; k < w; ++k)
          out.values(d, b2, i, k) = static_cast<float>(bands[b2]);
  }
  return out;
}

std::vector<double> gdd_accumulate(const std::vector<double>& tmin,
                                   const std::vector<double>& tmax, double base_temp) {
  if (tmin.size() != tmax.size())
    fail(ErrorCode::DimMismatch, "tmin/tmax length mismatch");
  std::vector<double> out(tmin.size());
  double acc = 0.0;
  for (size_t d = 0; d < tmin.size(); ++d) {
    acc += std::max(0.0, (tmin[d] + tmax[d]) / 2.0 - base_temp);
    out[d] = acc;
  }
  return out;
}

Index gdd_crossing_day(const std::vector<double>& gdd, double threshold) {
  for (size_t d = 0; d < gdd.size(); ++d)
    if (gdd[d] > threshold) return static_cast<Index>(d);
  return -1;
}

double phenology_profile(const CropSpec& crop, const std::vector<double>& gdd,
                         Index day_index) {
  double g = gdd[static_cast<size_t>(day_index)];
  double canopy;
  if (g < crop.gdd_plant)
    canopy = 0.0;
  else if (g < crop.gdd_peak)
    canopy = (g - crop.gdd_plant) / (crop.gdd_peak - crop.gdd_plant);
  else if (g <= crop.gdd_harvest)
    canopy = 1.0;
  else
    canopy = 0.0;
  if (crop.evergreen) canopy = std::max(canopy, kEvergreenFloor);
  return canopy;
}

std::vector<double> crop_canopy_daily(const CropSpec& crop,
                                      const RasterTimeSeries& weather,
                                      double base_temp) {
  std::vector<double> tmin(static_cast<size_t>(weather.t()));
  std::vector<double> tmax(static_cast<size_t>(weather.t()));
  for (Index d = 0; d < weather.t(); ++d) {
    tmax[static_cast<size_t>(d)] = weather.values(d, kBandTmax, 0, 0);
    tmin[static_cast<size_t>(d)] = weather.values(d, kBandTmin, 0, 0);
  }
  auto gdd = gdd_accumulate(tmin, tmax, base_temp);
  std::vector<double> canopy(tmin.size());
  for (Index d = 0; d < weather.t(); ++d)
    canopy[static_cast<size_t>(d)] = phenology_profile(crop, gdd, d);
  return canopy;
}

std::vector<std::string> scene_class_table(const SceneSpec& scene) {
  uint16_t max_id = 0;
  for (const auto& [crop, frac] : scene.crop_mix) max_id = std::max(max_id, crop.class_id);
  std::vector<std::string> table(static_cast<size_t>(max_id) + 1, "unused");
  table[0] = "unknown";
  for (const auto& [crop, frac] : scene.crop_mix) table[crop.class_id] = crop.name;
  return table;
}

RenderedScene render_scene(const SceneSpec& scene, const RasterTimeSeries& weather,
                           uint64_t seed) {
  scene.validate();
  if (weather.step_days != 1) fail(ErrorCode::BadConfig, "scene weather must be daily");
  Index n_composites = weather.t() / scene.composite_days;
  if (n_composites < 1) fail(ErrorCode::BadData, "weather too short for one composite");

  Rng base(seed);
  Rng field_rng = base.fork(0);
  Rng noise_rng = base.fork(1);
  Rng cloud_rng = base.fork(2);

  // balanced field assignment: largest-remainder quotas, then a shuffle
  Index field_rows = (scene.h + scene.field_size - 1) / scene.field_size;
  Index field_cols = (scene.w + scene.field_size - 1) / scene.field_size;
  Index n_fields = field_rows * field_cols;
  std::vector<size_t> field_crop;
  {
    size_t n_crops = scene.crop_mix.size();
    std::vector<Index> quota(n_crops);
    std::vector<std::pair<double, size_t>> rema;
    Index assigned = 0;
    for (size_t ci = 0; ci < n_crops; ++ci) {
      double exact = scene.crop_mix[ci].second * static_cast<double>(n_fields);
      quota[ci] = static_cast<Index>(std::floor(exact));
      assigned += quota[ci];
      rema.push_back({exact - std::floor(exact), ci});
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (Index i = 0; assigned < n_fields; ++i, ++assigned) quota[rema[static_cast<size_t>(i) % rema.size()].second]++;
    for (size_t ci = 0; ci < n_crops; ++ci)
      for (Index q = 0; q < quota[ci]; ++q) field_crop.push_back(ci);
    field_rng.shuffle(field_crop);
  }

  // per-crop canopy, averaged into composite windows
  size_t n_crops = scene.crop_mix.size();
  std::vector<std::vector<double>> comp_canopy(n_crops,
                                               std::vector<double>(static_cast<size_t>(n_composites)));
  for (size_t ci = 0; ci < n_crops; ++ci) {
    auto daily = crop_canopy_daily(scene.crop_mix[ci].first, weather, scene.gdd_base_temp);
    for (Index t = 0; t < n_composites; ++t) {
      double acc = 0;
      for (int d = 0; d < scene.composite_days; ++d)
        acc += daily[static_cast<size_t>(t * scene.composite_days + d)];
      comp_canopy[ci][static_cast<size_t>(t)] = acc / scene.composite_days;
    }
  }

  RenderedScene out;
  out.labels.ids = Tensor<uint16_t>({scene.h, scene.w});
  out.labels.class_table = scene_class_table(scene);
  out.labels.unknown_id = 0;
  out.satellite.values = Tensor<float>({n_composites, scene.sat_bands, scene.h, scene.w});
  for (Index b = 0; b < scene.sat_bands; ++b)
    out.satellite.band_names.push_back("b" + std::to_string(b));
  out.satellite.step_days = scene.composite_days;
  out.satellite.origin_day = scene.composite_days;

  // labels: field crop id, Unknown ring at field borders
  std::vector<size_t> pixel_crop(static_cast<size_t>(scene.h * scene.w));
  for (Index i = 0; i < scene.h; ++i) {
    for (Index k = 0; k < scene.w; ++k) {
      Index fr = i / scene.field_size, fc = k / scene.field_size;
      size_t ci = field_crop[static_cast<size_t>(fr * field_cols + fc)];
      pixel_crop[static_cast<size_t>(i * scene.w + k)] = ci;
      Index li = i % scene.field_size, lk = k % scene.field_size;
      Index r_end = std::min(scene.field_size, scene.h - fr * scene.field_size);
      Index c_end = std::min(scene.field_size, scene.w - fc * scene.field_size);
      bool border = li < scene.border_px || lk < scene.border_px ||
                    li >= r_end - scene.border_px || lk >= c_end - scene.border_px;
      out.labels.ids(i, k) = border ? 0 : scene.crop_mix[ci].first.class_id;
    }
  }

  for (Index t = 0; t < n_composites; ++t) {
    bool cloudy = t > 0 && cloud_rng.bernoulli(scene.cloud_prob);
    for (Index b = 0; b < scene.sat_bands; ++b) {
      for (Index i = 0; i < scene.h; ++i) {
        for (Index k = 0; k < scene.w; ++k) {
          if (cloudy) {  // forward-fill the previous composite
            out.satellite.values(t, b, i, k) = out.satellite.values(t - 1, b, i, k);
            continue;
          }
          size_t ci = pixel_crop[static_cast<size_t>(i * scene.w + k)];
          const CropSpec& crop = scene.crop_mix[ci].first;
          double canopy = comp_canopy[ci][static_cast<size_t>(t)];
          double v = canopy * crop.peak_signature[static_cast<size_t>(b)] +
                     (1.0 - canopy) * crop.bare_signature[static_cast<size_t>(b)];
          if (scene.noise_sd > 0) v += noise_rng.normal(0.0, scene.noise_sd);
          out.satellite.values(t, b, i, k) = static_cast<float>(v);
        }
      }
    }
  }
  return out;
}

void gen_benchmark(const BenchmarkSpec& spec, const std::string& out_dir) {
  spec.scene.validate();
  fs::create_directories(out_dir);
  Rng master(spec.seed);

  json manifest;
  manifest["seed"] = spec.seed;
  manifest["weather_shift"] = spec.weather_shift_days;
  manifest["scenes"] = json::array();

  int total = spec.n_train + spec.n_val + spec.n_test;
  for (int i = 0; i < total; ++i) {
    std::string split = i < spec.n_train ? "train"
                        : i < spec.n_train + spec.n_val ? "val"
                                                        : "test";
    uint64_t weather_seed = master.next_u64();
    uint64_t render_seed = master.next_u64();

    WeatherParams wp = spec.weather;
    wp.seed = weather_seed;
    if (split == "test") wp.mean_temp_curve.phase_day += spec.weather_shift_days;
    auto weather = gen_weather(wp);
    auto rendered = render_scene(spec.scene, weather, render_seed);

    char id[32];
    std::snprintf(id, sizeof(id), "scene_%03d", i);
    std::string sat_file = std::string(id) + "_sat.rts";
    std::string weather_file = std::string(id) + "_weather.rts";
    std::string labels_file = std::string(id) + "_labels.rts";
    write_rts((fs::path(out_dir) / sat_file).string(), rendered.satellite);
    write_rts((fs::path(out_dir) / weather_file).string(), weather);
    write_labels((fs::path(out_dir) / labels_file).string(), rendered.labels);

    json entry;
    entry["id"] = id;
    entry["split"] = split;
    entry["weather_seed"] = weather_seed;
    entry["render_seed"] = render_seed;
    entry["satellite"] = sat_file;
    entry["weather"] = weather_file;
    entry["labels"] = labels_file;
    manifest["scenes"].push_back(entry);
  }

  std::ofstream os(fs::path(out_dir) / "manifest.json", std::ios::trunc);
  if (!os) fail(ErrorCode::Io, "cannot write manifest under " + out_dir);
  os << manifest.dump(2) << "\n";
}

std::vector<std::pair<CropSpec, double>> benchmark_crop_mix() {
  // Shared bare-soil endmember.
  std::vector<double> bare = {0.30, 0.28, 0.26, 0.24, 0.22, 0.21, 0.20, 0.19, 0.18, 0.17};
  // Distinct canopy endmembers. sig_a is shared by the two green-up twins,
  // sig_d by the two harvest twins, so timing is their only separator.
  std::vector<double> sig_orchard = {0.08, 0.09, 0.08, 0.12, 0.22, 0.30, 0.33, 0.35, 0.25, 0.12};
  std::vector<double> sig_a = {0.05, 0.07, 0.06, 0.10, 0.25, 0.40, 0.45, 0.48, 0.30, 0.15};
  std::vector<double> sig_d = {0.04, 0.06, 0.08, 0.15, 0.30, 0.35, 0.38, 0.36, 0.22, 0.10};

  CropSpec orchard{1, "orchard", 50, 400, 2200, sig_orchard, bare, true};
  CropSpec spring_annual{2, "spring_annual", 150, 450, 2400, sig_a, bare, false};
  CropSpec summer_annual{3, "summer_annual", 500, 800, 3050, sig_a, bare, false};
  CropSpec early_harvest{4, "early_harvest", 120, 300, 550, sig_d, bare, false};
  CropSpec late_harvest{5, "late_harvest", 120, 300, 1400, sig_d, bare, false};

  return {{orchard, 0.2},
          {spring_annual, 0.2},
          {summer_annual, 0.2},
          {early_harvest, 0.2},
          {late_harvest, 0.2}};
}

}  // namespace wstatt
