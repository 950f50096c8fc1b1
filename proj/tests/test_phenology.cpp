#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "wstatt/phenology.hpp"
#include "wstatt/rng.hpp"

using namespace wstatt;
namespace fs = std::filesystem;

namespace {

CropSpec test_crop(double plant, double peak, double harvest, bool evergreen = false) {
  CropSpec c;
  c.class_id = 1;
  c.name = "t";
  c.gdd_plant = plant;
  c.gdd_peak = peak;
  c.gdd_harvest = harvest;
  c.peak_signature = {0.1, 0.5};
  c.bare_signature = {0.3, 0.2};
  c.evergreen = evergreen;
  return c;
}

}  // namespace

TEST_CASE("gen_weather shape, determinism, spread") {
  WeatherParams p;
  p.seed = 11;
  p.days = 365;
  auto w = gen_weather(p);
  CHECK(w.values.shape() == Shape{365, 7, 1, 1});
  CHECK(w.band_names == daymet_band_roles());
  CHECK(w.step_days == 1);
  CHECK(w.origin_day == 1);

  auto w2 = gen_weather(p);
  bool identical = true;
  for (Index i = 0; i < w.values.size(); ++i)
    identical = identical && w.values[i] == w2.values[i];
  CHECK(identical);

  for (Index d = 0; d < 365; ++d)
    CHECK(w.values(d, kBandTmax, 0, 0) >= w.values(d, kBandTmin, 0, 0));

  WeatherParams quiet = p;
  quiet.temp_noise_sd = 0.0;
  auto wq = gen_weather(quiet);
  for (Index d = 0; d < 365; ++d) {
    double spread = wq.values(d, kBandTmax, 0, 0) - wq.values(d, kBandTmin, 0, 0);
    CHECK(spread == doctest::Approx(quiet.temp_spread_c).epsilon(1e-6));
  }
}

TEST_CASE("gdd_accumulate hand cases") {
  // constant (8,16) with base 10: daily mean 12, increment 2
  std::vector<double> tmin(5, 8.0), tmax(5, 16.0);
  auto g = gdd_accumulate(tmin, tmax, 10.0);
  for (size_t d = 0; d < 5; ++d) CHECK(g[d] == doctest::Approx(2.0 * (d + 1)));

  // all below base -> zeros
  auto zero = gdd_accumulate({0, 1, 2}, {4, 5, 6}, 10.0);
  for (double v : zero) CHECK(v == 0.0);

  // days with means 10, 8, 20 at base 10 -> [0, 0, 10]
  auto mixed = gdd_accumulate({8, 8, 15}, {12, 8, 25}, 10.0);
  CHECK(mixed[0] == 0.0);
  CHECK(mixed[1] == 0.0);
  CHECK(mixed[2] == doctest::Approx(10.0));

  CHECK_THROWS_AS(gdd_accumulate({1, 2}, {1}, 10.0), Error);
}

TEST_CASE("gdd_accumulate is nondecreasing for any input") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    size_t n = 1 + rng.below(40);
    std::vector<double> tmin(n), tmax(n);
    for (size_t d = 0; d < n; ++d) {
      tmin[d] = rng.uniform(-30, 30);
      tmax[d] = tmin[d] + rng.uniform(0, 20);
    }
    auto g = gdd_accumulate(tmin, tmax, rng.uniform(0, 15));
    for (size_t d = 1; d < n; ++d) CHECK(g[d] >= g[d - 1]);
  }
}

TEST_CASE("phenology_profile stages") {
  auto crop = test_crop(100, 200, 500);
  std::vector<double> gdd = {50, 100, 150, 200, 350, 500, 501, 600};
  CHECK(phenology_profile(crop, gdd, 0) == 0.0);                    // below plant
  CHECK(phenology_profile(crop, gdd, 2) == doctest::Approx(0.5));   // ramp midpoint
  CHECK(phenology_profile(crop, gdd, 3) == doctest::Approx(1.0));   // peak
  CHECK(phenology_profile(crop, gdd, 5) == doctest::Approx(1.0));   // still standing
  CHECK(phenology_profile(crop, gdd, 6) == 0.0);                    // after harvest
  CHECK(phenology_profile(crop, gdd, 7) == 0.0);

  auto tree = test_crop(100, 200, 500, true);
  CHECK(phenology_profile(tree, gdd, 0) == doctest::Approx(kEvergreenFloor));
  CHECK(phenology_profile(tree, gdd, 6) == doctest::Approx(kEvergreenFloor));
  CHECK(phenology_profile(tree, gdd, 3) == doctest::Approx(1.0));
}

TEST_CASE("phenology_profile stays in [0,1] on random tracks") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto crop = test_crop(rng.uniform(0, 300), 300 + rng.uniform(1, 300),
                          700 + rng.uniform(1, 1000), rng.bernoulli(0.3));
    std::vector<double> gdd(60);
    double acc = 0;
    for (size_t d = 0; d < gdd.size(); ++d) {
      acc += rng.uniform(0, 40);
      gdd[d] = acc;
    }
    for (size_t d = 0; d < gdd.size(); ++d) {
      double v = phenology_profile(crop, gdd, static_cast<Index>(d));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("render_scene produces the composite shape convention") {
  SceneSpec scene;
  scene.h = 64;
  scene.w = 64;
  scene.field_size = 16;
  scene.crop_mix = benchmark_crop_mix();
  WeatherParams wp;
  wp.seed = 3;
  auto weather = gen_weather(wp);
  auto r = render_scene(scene, weather, 99);
  CHECK(r.satellite.values.shape() == Shape{24, 10, 64, 64});
  CHECK(r.satellite.step_days == 15);
  CHECK(r.satellite.origin_day == 15);
  CHECK(r.labels.ids.shape() == Shape{64, 64});
  CHECK(r.labels.unknown_id == 0);

  // every field interior carries a crop id, the ring is Unknown
  CHECK(r.labels.ids(0, 0) == 0);
  CHECK(r.labels.ids(8, 8) != 0);
}

TEST_CASE("render_scene: single evergreen crop is temporally near-constant") {
  SceneSpec scene;
  scene.h = 8;
  scene.w = 8;
  scene.field_size = 8;
  scene.border_px = 1;
  scene.noise_sd = 0.0;
  scene.cloud_prob = 0.0;
  scene.sat_bands = 2;
  CropSpec tree = test_crop(50, 300, 5000, true);
  scene.crop_mix = {{tree, 1.0}};
  WeatherParams wp;
  wp.seed = 4;
  auto weather = gen_weather(wp);
  auto r = render_scene(scene, weather, 1);
  // canopy >= 0.8 all year bounds the temporal excursion of each band
  for (Index b = 0; b < 2; ++b) {
    double span = std::abs(tree.peak_signature[b] - tree.bare_signature[b]);
    for (Index i = 0; i < 8; ++i)
      for (Index k = 0; k < 8; ++k) {
        float lo = 1e9f, hi = -1e9f;
        for (Index t = 0; t < r.satellite.t(); ++t) {
          lo = std::min(lo, r.satellite.values(t, b, i, k));
          hi = std::max(hi, r.satellite.values(t, b, i, k));
        }
        CHECK(hi - lo <= doctest::Approx(0.2 * span + 1e-6));
      }
  }
}

TEST_CASE("render_scene noise-free equals the analytic mixture per pixel") {
  SceneSpec scene;
  scene.h = 12;
  scene.w = 12;
  scene.field_size = 6;
  scene.border_px = 1;
  scene.noise_sd = 0.0;
  scene.cloud_prob = 0.0;
  scene.sat_bands = 2;
  auto a = test_crop(100, 400, 1200);
  auto b = test_crop(100, 400, 1200);
  b.class_id = 2;
  b.name = "u";
  b.peak_signature = {0.6, 0.9};
  scene.crop_mix = {{a, 0.5}, {b, 0.5}};
  WeatherParams wp;
  wp.seed = 21;
  auto weather = gen_weather(wp);
  auto r = render_scene(scene, weather, 17);

  // oracle: recompute window-mean canopy directly and form the mixture
  auto canopy_a = crop_canopy_daily(a, weather, scene.gdd_base_temp);
  auto canopy_b = crop_canopy_daily(b, weather, scene.gdd_base_temp);
  for (Index t = 0; t < r.satellite.t(); ++t) {
    double ca = 0, cb = 0;
    for (int d = 0; d < 15; ++d) {
      ca += canopy_a[static_cast<size_t>(t * 15 + d)];
      cb += canopy_b[static_cast<size_t>(t * 15 + d)];
    }
    ca /= 15;
    cb /= 15;
    for (Index i = 0; i < 12; ++i) {
      for (Index k = 0; k < 12; ++k) {
        uint16_t id = r.labels.ids(i, k);
        if (id == 0) continue;
        const CropSpec& crop = id == 1 ? a : b;
        double canopy = id == 1 ? ca : cb;
        for (Index band = 0; band < 2; ++band) {
          double want = canopy * crop.peak_signature[static_cast<size_t>(band)] +
                        (1 - canopy) * crop.bare_signature[static_cast<size_t>(band)];
          CHECK(r.satellite.values(t, band, i, k) == doctest::Approx(want).epsilon(1e-6));
        }
      }
    }
  }
}

TEST_CASE("twin crops diverge only after the earlier harvest") {
  WeatherParams wp;
  wp.seed = 2;
  auto weather = gen_weather(wp);

  auto a = test_crop(100, 400, 900);
  auto b = test_crop(100, 400, 1300);  // 400 GDD later harvest

  // composite index of the earlier harvest, from the accumulation oracle
  std::vector<double> tmin(365), tmax(365);
  for (Index d = 0; d < 365; ++d) {
    tmax[static_cast<size_t>(d)] = weather.values(d, kBandTmax, 0, 0);
    tmin[static_cast<size_t>(d)] = weather.values(d, kBandTmin, 0, 0);
  }
  auto gdd = gdd_accumulate(tmin, tmax, 10.0);
  Index drop_day = gdd_crossing_day(gdd, a.gdd_harvest);
  REQUIRE(drop_day > 0);
  Index drop_comp = drop_day / 15;

  auto canopy_a = crop_canopy_daily(a, weather, 10.0);
  auto canopy_b = crop_canopy_daily(b, weather, 10.0);
  for (Index t = 0; t < 24; ++t) {
    double ca = 0, cb = 0;
    for (int d = 0; d < 15; ++d) {
      ca += canopy_a[static_cast<size_t>(t * 15 + d)];
      cb += canopy_b[static_cast<size_t>(t * 15 + d)];
    }
    if (t < drop_comp) CHECK(ca == doctest::Approx(cb));
  }
  // divergence in the window straddling the earlier harvest
  double ca = 0, cb = 0;
  for (int d = 0; d < 15; ++d) {
    ca += canopy_a[static_cast<size_t>(drop_comp * 15 + d)];
    cb += canopy_b[static_cast<size_t>(drop_comp * 15 + d)];
  }
  CHECK(cb > ca);
}

TEST_CASE("cloudy composites forward-fill the previous window") {
  SceneSpec scene;
  scene.h = 4;
  scene.w = 4;
  scene.field_size = 4;
  scene.border_px = 0;
  scene.noise_sd = 0.05;
  scene.cloud_prob = 0.9;  // most windows cloudy
  scene.sat_bands = 2;
  scene.crop_mix = {{test_crop(100, 400, 1200), 1.0}};
  WeatherParams wp;
  wp.seed = 6;
  auto weather = gen_weather(wp);
  auto r = render_scene(scene, weather, 31);
  // with p=0.9 over 23 windows at this seed, at least one is filled
  Index filled = 0;
  for (Index t = 1; t < r.satellite.t(); ++t) {
    bool same = true;
    for (Index b = 0; b < 2 && same; ++b)
      for (Index i = 0; i < 4 && same; ++i)
        for (Index k = 0; k < 4 && same; ++k)
          same = r.satellite.values(t, b, i, k) == r.satellite.values(t - 1, b, i, k);
    if (same) ++filled;
  }
  CHECK(filled > 0);
}

TEST_CASE("gen_benchmark writes the expected files and is bit-deterministic") {
  BenchmarkSpec spec;
  spec.seed = 77;
  spec.n_train = 8;
  spec.n_val = 0;
  spec.n_test = 4;
  spec.weather_shift_days = 0.0;
  spec.scene.h = 8;
  spec.scene.w = 8;
  spec.scene.field_size = 4;
  spec.scene.crop_mix = benchmark_crop_mix();
  spec.weather.seed = 5;

  auto dir1 = fs::temp_directory_path() / "wstatt_bench_a";
  auto dir2 = fs::temp_directory_path() / "wstatt_bench_b";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  gen_benchmark(spec, dir1.string());
  gen_benchmark(spec, dir2.string());

  Index sat = 0, wea = 0, lab = 0;
  for (const auto& e : fs::directory_iterator(dir1)) {
    auto name = e.path().filename().string();
    if (name.find("_sat.rts") != std::string::npos) ++sat;
    if (name.find("_weather.rts") != std::string::npos) ++wea;
    if (name.find("_labels.rts") != std::string::npos) ++lab;
  }
  CHECK(sat == 12);
  CHECK(wea == 12);
  CHECK(lab == 12);

  for (const auto& e : fs::directory_iterator(dir1)) {
    auto other = dir2 / e.path().filename();
    std::ifstream f1(e.path(), std::ios::binary), f2(other, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
  }
}

TEST_CASE("weather shift moves the harvest composite by one or two windows") {
  BenchmarkSpec spec;
  spec.weather.seed = 40;
  spec.weather_shift_days = 20.0;

  auto base_weather = gen_weather(spec.weather);
  WeatherParams shifted = spec.weather;
  shifted.mean_temp_curve.phase_day += spec.weather_shift_days;
  auto shift_weather = gen_weather(shifted);

  auto crop = test_crop(120, 300, 550);
  auto day_of = [&](const RasterTimeSeries& w) {
    std::vector<double> tmin(365), tmax(365);
    for (Index d = 0; d < 365; ++d) {
      tmax[static_cast<size_t>(d)] = w.values(d, kBandTmax, 0, 0);
      tmin[static_cast<size_t>(d)] = w.values(d, kBandTmin, 0, 0);
    }
    return gdd_crossing_day(gdd_accumulate(tmin, tmax, 10.0), crop.gdd_harvest);
  };
  Index base_comp = day_of(base_weather) / 15;
  Index shift_comp = day_of(shift_weather) / 15;
  CHECK(shift_comp - base_comp >= 1);
  CHECK(shift_comp - base_comp <= 2);
}

TEST_CASE("benchmark crop presets are valid and timed inside the year") {
  auto mix = benchmark_crop_mix();
  double total = 0;
  for (const auto& [crop, frac] : mix) {
    crop.validate();
    total += frac;
  }
  CHECK(total == doctest::Approx(1.0));

  WeatherParams wp;
  wp.seed = 123;
  auto weather = gen_weather(wp);
  std::vector<double> tmin(365), tmax(365);
  for (Index d = 0; d < 365; ++d) {
    tmax[static_cast<size_t>(d)] = weather.values(d, kBandTmax, 0, 0);
    tmin[static_cast<size_t>(d)] = weather.values(d, kBandTmin, 0, 0);
  }
  auto gdd = gdd_accumulate(tmin, tmax, 10.0);
  for (const auto& [crop, frac] : mix) {
    // every crop emerges within the calendar year
    CHECK(gdd_crossing_day(gdd, crop.gdd_plant) > 0);
  }
  // the harvest twins both drop before the 8-month horizon, 20-day shift included
  auto early = mix[3].first, late = mix[4].first;
  CHECK(gdd_crossing_day(gdd, early.gdd_harvest) > 0);
  CHECK(gdd_crossing_day(gdd, late.gdd_harvest) + 20 < 243);
}
