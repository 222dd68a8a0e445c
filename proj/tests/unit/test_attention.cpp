#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support/attention_oracle.hpp"
#include "vitprune/attention.hpp"
#include "vitprune/random.hpp"

using namespace vp;
using namespace vp::testing;

// ---------------------------------------------------------------------------
// Distance oracles

TEST_CASE("uniform attention on a 2x2 grid with patch size 16") {
  const double expected = (0.0 + 16.0 + 16.0 + 16.0 * std::sqrt(2.0)) / 4.0;
  CHECK(expected == doctest::Approx(13.657).epsilon(1e-4));
  CHECK(std::abs(attention_distance(uniform_matrix(4), 2, 16, false) - expected) <= 1e-6);
  CHECK(std::abs(attention_distance(uniform_matrix(5), 2, 16, true) - expected) <= 1e-6);
  const auto c = grid_config(2, 16, true);
  const auto table = mean_attention_distance(
      std::vector{make_record(c, 3, [&](auto, auto, auto) { return uniform_matrix(5); })}, c);
  for (const auto& row : table.distance) {
    for (double v : row) CHECK(std::abs(v - expected) <= 1e-6);
  }
  CHECK(table.n_images[1][1] == 3);
}

TEST_CASE("identity attention has zero distance") {
  for (bool cls : {false, true}) {
    const std::int64_t grid = 3, t = 9 + (cls ? 1 : 0);
    std::vector<double> m(t * t, 0.0);
    for (std::int64_t i = 0; i < t; ++i) m[i * t + i] = 1.0;
    CHECK(attention_distance(m, grid, 8, cls) == 0.0);
  }
}

TEST_CASE("attention concentrated on one patch gives its geometric distance") {
  const std::int64_t grid = 4, patch = 8, n = 16;
  for (std::int64_t p = 0; p < n; ++p) {
    std::vector<double> m(n * n, 0.0);
    double expected = 0.0;
    for (std::int64_t q = 0; q < n; ++q) {
      m[q * n + p] = 1.0;
      expected += patch * std::hypot(double(q / grid - p / grid), double(q % grid - p % grid));
    }
    CHECK(attention_distance(m, grid, patch, false) == doctest::Approx(expected / n).epsilon(1e-14));
  }
}

TEST_CASE("production distance matches the pair-enumeration oracle on 50 random records") {
  Rng rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t grid = 2 + static_cast<std::int64_t>(rng.below(4));
    const std::int64_t patch = 1 + static_cast<std::int64_t>(rng.below(16));
    const bool cls = rng.bernoulli(0.5);
    const auto c = grid_config(grid, patch, cls);
    const std::int64_t batch = 1 + static_cast<std::int64_t>(rng.below(3));
    std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, std::vector<double>> mats;
    const auto rec = make_record(c, batch, [&](auto l, auto b, auto h) {
      return mats[{l, b, h}] = random_attention(rng, c.num_tokens());
    });
    const auto table = mean_attention_distance(std::span(&rec, 1), c);
    for (std::int64_t l = 0; l < c.num_layers; ++l) {
      for (std::int64_t h = 0; h < c.num_heads[l]; ++h) {
        double sum = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) sum += oracle_distance(mats[{l, b, h}], grid, patch, cls);
        worst = std::max(worst, std::abs(table.distance[l][h] - sum / batch));
        CHECK(table.distance[l][h] >= 0.0);
        CHECK(table.distance[l][h] <= table.max_distance() + 1e-12);
        CHECK(table.n_images[l][h] == batch);
      }
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("head permutation permutes table rows") {
  Rng rng(3);
  const auto c = grid_config(3, 4, true, 4, 1);
  std::vector<std::vector<double>> mats;
  for (int h = 0; h < 4; ++h) mats.push_back(random_attention(rng, c.num_tokens()));
  const std::vector<int> perm{2, 0, 3, 1};
  const auto a = mean_attention_distance(std::vector{make_record(c, 1, [&](auto, auto, auto h) { return mats[h]; })}, c);
  const auto b =
      mean_attention_distance(std::vector{make_record(c, 1, [&](auto, auto, auto h) { return mats[perm[h]]; })}, c);
  for (int h = 0; h < 4; ++h) CHECK(b.distance[0][h] == a.distance[0][perm[h]]);
}

TEST_CASE("dataset table is the count-weighted mean of per-batch tables") {
  Rng rng(8);
  const auto c = grid_config(4, 2, true);
  const auto r1 = make_record(c, 3, [&](auto, auto, auto) { return random_attention(rng, c.num_tokens()); });
  const auto r2 = make_record(c, 5, [&](auto, auto, auto) { return random_attention(rng, c.num_tokens(), 0.5); });
  const auto t1 = mean_attention_distance(std::vector{r1}, c);
  const auto t2 = mean_attention_distance(std::vector{r2}, c);
  const auto all = mean_attention_distance(std::vector{r1, r2}, c);
  for (std::int64_t l = 0; l < 2; ++l) {
    for (std::int64_t h = 0; h < 2; ++h) {
      CHECK(std::abs(all.distance[l][h] - (3 * t1.distance[l][h] + 5 * t2.distance[l][h]) / 8) <= 1e-9);
      CHECK(all.n_images[l][h] == 8);
    }
  }
}

TEST_CASE("records inconsistent with the grid are rejected") {
  const auto c = grid_config(2, 4, true);
  SUBCASE("token count") {
    auto r = make_record(grid_config(3, 4, true), 1, [](auto, auto, auto) { return uniform_matrix(10); });
    CHECK_THROWS_AS(mean_attention_distance(std::vector{r}, c), std::invalid_argument);
  }
  SUBCASE("head count") {
    auto r = make_record(grid_config(2, 4, true, 4), 1, [](auto, auto, auto) { return uniform_matrix(5); });
    CHECK_THROWS_AS(mean_attention_distance(std::vector{r}, c), std::invalid_argument);
  }
  SUBCASE("layer count") {
    auto r = make_record(grid_config(2, 4, true, 2, 1), 1, [](auto, auto, auto) { return uniform_matrix(5); });
    CHECK_THROWS_AS(mean_attention_distance(std::vector{r}, c), std::invalid_argument);
  }
  SUBCASE("flat matrix") { CHECK_THROWS_AS(attention_distance(uniform_matrix(4), 2, 4, true), std::invalid_argument); }
}

TEST_CASE("distance table CSV") {
  const auto c = grid_config(2, 16, false, 2, 2);
  const auto t = mean_attention_distance(std::vector{make_record(c, 2, [](auto, auto, auto) { return uniform_matrix(4); })}, c);
  const auto csv = t.to_csv();
  CHECK(csv.rfind("layer,head,mean_distance_px,n_images\n0,0,13.65685424949238", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(csv.find("\n1,1,") != std::string::npos);
  CHECK(t.to_json()["n_images"][1][0].get<int>() == 2);
  CHECK(t.max_distance() == doctest::Approx(16 * std::sqrt(2.0)));
}

TEST_CASE("model forward feeds the accumulator") {
  const auto c = ModelConfig::toy();
  const auto model = init_model(c, 2);
  const auto data = synth_generate({7, 2, 14, 32}, 1);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto table = mean_attention_distance(model, data, idx, 5);
  AttentionRecord rec;
  model.forward(data.images(idx), &rec);
  const auto direct = mean_attention_distance(std::vector{rec}, c);
  for (std::int64_t l = 0; l < c.num_layers; ++l) {
    REQUIRE(table.distance[l].size() == 4);
    for (std::int64_t h = 0; h < 4; ++h) {
      CHECK(std::abs(table.distance[l][h] - direct.distance[l][h]) <= 1e-9);
      CHECK(table.n_images[l][h] == 28);
      CHECK(table.distance[l][h] > 0.0);
      CHECK(table.distance[l][h] <= table.max_distance());
    }
  }
}

// ---------------------------------------------------------------------------
// Maps

TEST_CASE("cls saliency and token masks") {
  const std::int64_t grid = 3, t = 10;
  SUBCASE("uniform attention is flat and keeps every patch") {
    const auto a = Tensor::from_data({1, 2, t, t}, std::vector<double>(2 * t * t, 1.0 / t));
    const auto s = cls_saliency(a, 0, grid);
    for (double v : s) CHECK(v == doctest::Approx(1.0 / 9).epsilon(1e-15));
    const auto m = token_mask(s);
    CHECK(std::accumulate(m.begin(), m.end(), 0) == 9);
  }
  SUBCASE("one-hot attention keeps exactly that patch") {
    std::vector<double> d(2 * t * t, 0.0);
    for (int h = 0; h < 2; ++h) d[h * t * t + 5] = 1.0;  // cls row, token 5 = patch 4
    const auto s = cls_saliency(Tensor::from_data({1, 2, t, t}, d), 0, grid);
    for (int p = 0; p < 9; ++p) CHECK(s[p] == (p == 4 ? 1.0 : 0.0));
    const auto m = token_mask(s);
    for (int p = 0; p < 9; ++p) CHECK(m[p] == (p == 4 ? 1 : 0));
  }
  SUBCASE("random attention renormalizes to one") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> d;
      for (int b = 0; b < 2; ++b) {
        for (int h = 0; h < 3; ++h) {
          const auto m = random_attention(rng, t);
          d.insert(d.end(), m.begin(), m.end());
        }
      }
      const auto a = Tensor::from_data({2, 3, t, t}, d);
      const auto s = cls_saliency(a, 1, grid);
      CHECK(std::abs(std::accumulate(s.begin(), s.end(), 0.0) - 1.0) <= 1e-9);
      const auto m = token_mask(s);
      double kept = 0.0, dropped_max = 0.0, kept_min = 1.0;
      for (int p = 0; p < 9; ++p) {
        if (m[p]) {
          kept += s[p];
          kept_min = std::min(kept_min, s[p]);
        } else {
          dropped_max = std::max(dropped_max, s[p]);
        }
      }
      CHECK(kept >= 0.9 - 1e-12);
      CHECK(kept - kept_min < 0.9);  // minimal
      CHECK(dropped_max <= kept_min);
    }
  }
  CHECK_THROWS_AS(cls_saliency(Tensor::from_data({1, 1, 9, 9}, std::vector<double>(81, 1.0 / 9)), 0, grid),
                  std::invalid_argument);
}

TEST_CASE("token mask on distinct values is the strict smallest set") {
  const std::vector<double> s{0.05, 0.5, 0.15, 0.3};
  CHECK(token_mask(s) == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(token_mask(s, 0.5) == std::vector<std::uint8_t>{0, 1, 0, 0});
  CHECK(token_mask(s, 1.0) == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK_THROWS_AS(token_mask(s, 0.0), std::invalid_argument);
}

TEST_CASE("nearest-neighbor upsampling and blending") {
  const std::vector<double> g{0.0, 1.0, 2.0, 3.0};
  const auto up = upsample_nearest(g, 2, 4);
  const std::vector<double> expected{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3};
  CHECK(up == expected);
  const auto odd = upsample_nearest(g, 2, 3);
  CHECK(odd == std::vector<double>{0, 0, 1, 0, 0, 1, 2, 2, 3});

  const std::vector<double> rgb{1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0};  // 2x2: red
  const std::vector<double> overlay{0, 1, 0, 1};
  const auto a0 = blend_overlay(rgb, 3, 2, overlay, 0.0);
  CHECK(a0.pixels == std::vector<std::uint8_t>(4, static_cast<std::uint8_t>(std::lround(0.299 * 255))));
  const auto a1 = blend_overlay(rgb, 3, 2, overlay, 1.0);
  CHECK(a1.pixels == std::vector<std::uint8_t>{0, 255, 0, 255});
  CHECK(a1.channels == 1);
  CHECK_THROWS_AS(blend_overlay(rgb, 3, 3, overlay), std::invalid_argument);
}

TEST_CASE("attention map from a model") {
  const auto c = ModelConfig::toy();
  const auto model = init_model(c, 4);
  const auto data = synth_generate({7, 2, 14, 32}, 1);
  const auto m = attention_map(model, data, 3, 1, MapMode::kClsQuery);
  CHECK(m.saliency.size() == 16);
  CHECK(std::abs(std::accumulate(m.saliency.begin(), m.saliency.end(), 0.0) - 1.0) <= 1e-9);
  CHECK(m.mask.empty());
  CHECK(m.heatmap.width == 32);
  CHECK(m.heatmap.height == 32);
  CHECK(m.heatmap.pixels.size() == 32 * 32);
  // Nearest-neighbor: every 8x8 block of the overlay is constant, so the
  // heatmap equals a re-blend of the upsampled grid.
  const double peak = *std::max_element(m.saliency.begin(), m.saliency.end());
  std::vector<double> ov;
  for (double v : m.saliency) ov.push_back(v / peak);
  CHECK(blend_overlay(data.samples[3].pixels, 3, 32, upsample_nearest(ov, 4, 32)).pixels == m.heatmap.pixels);

  const auto again = attention_map(model, data, 3, 1, MapMode::kClsQuery);
  CHECK(again.heatmap.pixels == m.heatmap.pixels);

  const auto tm = attention_map(model, data, 3, 0, MapMode::kTokenMask);
  REQUIRE(tm.mask.size() == 16);
  CHECK(tm.mask == token_mask(tm.saliency));

  CHECK_THROWS_AS(attention_map(model, data, 3, 2, MapMode::kClsQuery), std::out_of_range);
  CHECK(map_mode_from_string("token_mask") == MapMode::kTokenMask);
  CHECK_THROWS_AS(map_mode_from_string("rollout"), std::invalid_argument);
}

TEST_CASE("cls query on a cls-free model is rejected") {
  auto c = ModelConfig::toy();
  c.pooling = Pooling::kMean;
  c.use_cls_token = false;
  const auto model = init_model(c, 1);
  const auto data = synth_generate({7, 2, 14, 32}, 1);
  CHECK_THROWS_AS(attention_map(model, data, 0, 0, MapMode::kClsQuery), std::invalid_argument);
  CHECK_THROWS_AS(attention_map(model, data, 0, 0, MapMode::kTokenMask), std::invalid_argument);
  std::vector<std::size_t> idx{0, 1};
  const auto t = mean_attention_distance(model, data, idx);
  CHECK(t.n_images[0][0] == 2);
}
