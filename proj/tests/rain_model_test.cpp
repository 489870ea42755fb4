#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "derain/rain_model.hpp"
#include "derain/rng.hpp"

using namespace derain;

namespace {

Image random_image(int h, int w, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
  Image im(h, w);
  for (auto& v : im.data) v = float(rng.uniform(lo, hi));
  return im;
}

TransmissionMap random_map(int h, int w, Rng& rng, float lo, float hi) {
  TransmissionMap t(h, w);
  for (auto& v : t.data) v = float(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("composition") {
  SECTION("full transmission passes the background through") {
    Image j(4, 5, 0.5f);
    TransmissionMap ts(4, 5, 0.6f), tv(4, 5, 0.4f);
    Image i = compose(j, ts, tv, {1.0f, 1.0f, 1.0f});
    for (float v : i.data) REQUIRE(v == 0.5f);
  }

  SECTION("zero transmission yields the atmosphere color exactly") {
    Rng rng(7);
    Image j = random_image(6, 6, rng);
    TransmissionMap zero(6, 6, 0.0f);
    Image i = compose(j, zero, zero, {0.8f, 0.8f, 0.8f});
    for (float v : i.data) REQUIRE(v == 0.8f);
  }

  SECTION("per-pixel arithmetic") {
    Image j(1, 1, 0.2f);
    TransmissionMap ts(1, 1, 0.25f), tv(1, 1, 0.0f);
    Image i = compose(j, ts, tv, {1.0f, 1.0f, 1.0f});
    for (int c = 0; c < 3; ++c)
      REQUIRE(i.at(0, 0, c) == Catch::Approx(0.8).margin(1e-6));
  }

  SECTION("rejects mismatched dimensions and over-unit transmission") {
    Image j(4, 4, 0.5f);
    TransmissionMap ts(4, 4, 0.5f), tv43(4, 3, 0.1f), tv(4, 4, 0.6f);
    REQUIRE_THROWS_AS(compose(j, ts, tv43, {1, 1, 1}), DimensionMismatch);
    REQUIRE_THROWS_AS(compose(j, ts, tv, {1, 1, 1}), TransmissionRangeViolation);
  }

  SECTION("affine in the background for fixed maps") {
    Rng rng(9);
    Image j1 = random_image(8, 7, rng), j2 = random_image(8, 7, rng);
    TransmissionMap ts = random_map(8, 7, rng, 0.0f, 0.5f);
    TransmissionMap tv = random_map(8, 7, rng, 0.0f, 0.5f);
    AtmosphereLight a{0.9f, 0.85f, 0.8f};
    const float alpha = 0.3f;
    Image jmix(8, 7);
    for (size_t k = 0; k < jmix.data.size(); ++k)
      jmix.data[k] = alpha * j1.data[k] + (1 - alpha) * j2.data[k];
    Image lhs = compose(jmix, ts, tv, a);
    Image i1 = compose(j1, ts, tv, a), i2 = compose(j2, ts, tv, a);
    for (size_t k = 0; k < lhs.data.size(); ++k)
      REQUIRE(lhs.data[k] ==
              Catch::Approx(alpha * i1.data[k] + (1 - alpha) * i2.data[k]).margin(1e-6));
  }
}

TEST_CASE("background recovery") {
  SECTION("unit transmission is the identity") {
    Rng rng(11);
    Image i = random_image(5, 5, rng);
    TransmissionMap ts(5, 5, 0.3f), tv(5, 5, 0.7f);
    Image j = recover_background(i, ts, tv, {0.5f, 0.5f, 0.5f});
    REQUIRE(j.data == i.data);
  }

  SECTION("inverts the composition example") {
    Image i(1, 1, 0.8f);
    TransmissionMap ts(1, 1, 0.25f), tv(1, 1, 0.0f);
    Image j = recover_background(i, ts, tv, {1, 1, 1});
    for (int c = 0; c < 3; ++c)
      REQUIRE(j.at(0, 0, c) == Catch::Approx(0.2).margin(1e-6));
  }

  SECTION("atmosphere-colored input stays fixed under the clamped denominator") {
    Image i(3, 3);
    AtmosphereLight a{0.6f, 0.7f, 0.5f};
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x)
        for (int c = 0; c < 3; ++c) i.at(y, x, c) = a[c];
    TransmissionMap zero(3, 3, 0.0f);
    Image j = recover_background(i, zero, zero, a, 0.05f);
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x)
        for (int c = 0; c < 3; ++c) REQUIRE(j.at(y, x, c) == Catch::Approx(a[c]).margin(2e-6));
  }

  SECTION("validates eps and dimensions") {
    Image i(4, 4, 0.5f);
    TransmissionMap t(4, 4, 0.5f), t34(3, 4, 0.5f);
    REQUIRE_THROWS_AS(recover_background(i, t, t34, {1, 1, 1}), DimensionMismatch);
    REQUIRE_THROWS_AS(recover_background(i, t, t, {1, 1, 1}, 0.0f), InvalidParams);
    REQUIRE_THROWS_AS(recover_background(i, t, t, {1, 1, 1}, 0.6f), InvalidParams);
  }

  SECTION("outputs stay in range even for inconsistent inputs") {
    Rng rng(13);
    Image i = random_image(6, 6, rng);
    TransmissionMap ts = random_map(6, 6, rng, 0.0f, 0.5f);
    TransmissionMap tv = random_map(6, 6, rng, 0.0f, 0.4f);
    Image j = recover_background(i, ts, tv, {0.95f, 0.9f, 1.0f});
    for (float v : j.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
}

TEST_CASE("effective transmission") {
  TransmissionMap a(2, 2, 0.3f), b(2, 2, 0.4f);
  SECTION("in-range sums pass through") {
    TransmissionMap t = effective_transmission(a, b, 0.05f);
    for (float v : t.data) REQUIRE(v == Catch::Approx(0.7).margin(1e-7));
  }
  SECTION("clamps both ends") {
    TransmissionMap zero(2, 2, 0.0f), big(2, 2, 0.8f);
    TransmissionMap lo = effective_transmission(zero, zero, 0.05f);
    for (float v : lo.data) REQUIRE(v == 0.05f);
    TransmissionMap hi = effective_transmission(big, big, 0.05f);
    for (float v : hi.data) REQUIRE(v == 1.0f);
  }
  SECTION("rejects mismatched dimensions") {
    TransmissionMap c(2, 3, 0.1f);
    REQUIRE_THROWS_AS(effective_transmission(a, c, 0.05f), DimensionMismatch);
  }
}

TEST_CASE("compose/recover round trip") {
  Rng rng(17);
  const float eps = 0.05f;
  for (int trial = 0; trial < 5; ++trial) {
    Image j = random_image(16, 12, rng);
    // Ts+Tv in [eps, 1]: split a total in [0.1, 1.0] between the two maps
    TransmissionMap ts(16, 12), tv(16, 12);
    for (size_t k = 0; k < ts.data.size(); ++k) {
      const float total = float(rng.uniform(0.1, 1.0));
      const float split = float(rng.uniform(0.0, 1.0));
      ts.data[k] = total * split;
      tv.data[k] = total * (1.0f - split);
    }
    AtmosphereLight a{float(rng.uniform(0.7, 1.0)), float(rng.uniform(0.7, 1.0)),
                      float(rng.uniform(0.7, 1.0))};
    Image i = compose(j, ts, tv, a);
    for (float v : i.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    Image back = recover_background(i, ts, tv, a, eps);
    for (size_t k = 0; k < j.data.size(); ++k)
      REQUIRE(back.data[k] == Catch::Approx(j.data[k]).margin(1e-5));
  }
}
