#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wstatt/raster.hpp"

namespace wstatt {

// Growth-stage thresholds in cumulative growing degree days, plus the
// spectral endmembers the pixel blends between.
struct CropSpec {
  uint16_t class_id = 0;
  std::string name;
  double gdd_plant = 0;
  double gdd_peak = 0;
  double gdd_harvest = 0;
  std::vector<double> peak_signature;  // per satellite band, in [0,1]
  std::vector<double> bare_signature;
  bool evergreen = false;

  void validate() const;
};

struct MeanTempCurve {
  double amplitude_c = 12.0;
  double phase_day = 105.0;  // day-of-year where the sinusoid crosses upward
  double offset_c = 15.0;
};

// Daymet's seven bands, in this order, is the fixed weather layout.
inline const std::vector<std::string>& daymet_band_roles() {
  static const std::vector<std::string> roles = {"dayl", "prcp", "srad", "swe",
                                                 "tmax", "tmin", "vp"};
  return roles;
}
constexpr Index kBandTmax = 4;
constexpr Index kBandTmin = 5;

struct WeatherParams {
  uint64_t seed = 0;
  int days = 365;
  MeanTempCurve mean_temp_curve;
  double temp_spread_c = 10.0;  // tmax - tmin when noise-free
  double temp_noise_sd = 1.5;
  double precip_rate_mm = 2.0;  // daily mean
  Index h = 1, w = 1;           // one reading per scene is the default
};

struct SceneSpec {
  Index h = 64, w = 64;
  Index field_size = 16;
  Index border_px = 1;  // Unknown ring at field boundaries
  std::vector<std::pair<CropSpec, double>> crop_mix;
  double noise_sd = 0.0;   // reflectance noise per composite cell
  double cloud_prob = 0.0; // per-composite chance of forward-filling
  double gdd_base_temp = 10.0;
  Index sat_bands = 10;
  int composite_days = 15;

  void validate() const;
};

struct BenchmarkSpec {
  uint64_t seed = 0;
  int n_train = 8;
  int n_val = 0;
  int n_test = 4;
  double weather_shift_days = 0.0;  // phase offset applied to test-year weather
  SceneSpec scene;
  WeatherParams weather;
};

// Daily 7-band weather raster; deterministic in params.seed.
RasterTimeSeries gen_weather(const WeatherParams& params);

// Cumulative sum of max(0, (tmin+tmax)/2 - base) per day.
std::vector<double> gdd_accumulate(const std::vector<double>& tmin,
                                   const std::vector<double>& tmax, double base_temp);

// First day index whose cumulative GDD exceeds the threshold, or -1.
Index gdd_crossing_day(const std::vector<double>& gdd, double threshold);

// Canopy fraction at one day given the cumulative GDD track: 0 before
// gdd_plant, linear ramp to 1 at gdd_peak, 1 through gdd_harvest, then 0.
// Evergreen crops never fall below the winter floor of 0.8.
double phenology_profile(const CropSpec& crop, const std::vector<double>& gdd,
                         Index day_index);
constexpr double kEvergreenFloor = 0.8;

// Per-day canopy track for a crop under the given scene weather.
std::vector<double> crop_canopy_daily(const CropSpec& crop,
                                      const RasterTimeSeries& weather,
                                      double base_temp);

struct RenderedScene {
  RasterTimeSeries satellite;
  LabelGrid labels;
};

// Lays out field_size fields, assigns crops by crop_mix (largest-remainder
// balanced, then seeded shuffle) and composites daily reflectance to
// 15-day windows. Cloudy composites repeat the previous window.
RenderedScene render_scene(const SceneSpec& scene, const RasterTimeSeries& weather,
                           uint64_t seed);

// Class table implied by a scene spec: "unknown" then each crop by class_id.
std::vector<std::string> scene_class_table(const SceneSpec& scene);

// Writes train/val/test scenes plus manifest.json under out_dir. Test
// scenes draw weather with mean_temp_curve.phase_day shifted by
// weather_shift_days, the cross-year analog.
void gen_benchmark(const BenchmarkSpec& spec, const std::string& out_dir);

// The five illustrative crops used by the stock benchmark configs.
std::vector<std::pair<CropSpec, double>> benchmark_crop_mix();

}  // namespace wstatt
