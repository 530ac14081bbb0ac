#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "xs/metrics.hpp"

using namespace xs;

namespace {

Tensor<uint8_t> cube_mask(int64_t n, int64_t lo, int64_t hi) {
  Tensor<uint8_t> m({n, n, n});
  for (int64_t z = lo; z < hi; ++z)
    for (int64_t y = lo; y < hi; ++y)
      for (int64_t x = lo; x < hi; ++x) m[(z * n + y) * n + x] = 1;
  return m;
}

Tensor<uint8_t> random_blob(Rng& rng, int64_t n, double p) {
  Tensor<uint8_t> m({n, n, n});
  for (int64_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform() < p ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("dsc basics") {
  Tensor<uint8_t> full = cube_mask(8, 0, 8);
  SUBCASE("identical masks give 1") { CHECK(dsc(full, full, 1) == 1.0); }
  SUBCASE("disjoint masks give 0") {
    Tensor<uint8_t> a({4, 4, 4}), b({4, 4, 4});
    a[0] = 1;
    b[63] = 1;
    CHECK(dsc(a, b, 1) == 0.0);
  }
  SUBCASE("half cube vs full cube gives 2/3") {
    Tensor<uint8_t> half({8, 8, 8});
    for (int64_t z = 0; z < 8; ++z)
      for (int64_t y = 0; y < 8; ++y)
        for (int64_t x = 0; x < 4; ++x) half[(z * 8 + y) * 8 + x] = 1;
    CHECK(dsc(half, full, 1) == doctest::Approx(2.0 * 256 / (256 + 512)));
  }
  SUBCASE("both empty is 1 and flagged") {
    Tensor<uint8_t> e({4, 4, 4});
    bool both = false;
    CHECK(dsc(e, e, 1, &both) == 1.0);
    CHECK(both);
  }
}

TEST_CASE("surface extraction counts") {
  SUBCASE("single voxel is its own surface") {
    Tensor<uint8_t> m({3, 3, 3});
    m[13] = 1;
    CHECK(extract_surface(m, 1).size() == 1);
  }
  SUBCASE("solid 3-cube has 26 surface voxels") {
    // center voxel of a 3x3x3 solid has all 6 neighbors inside
    Tensor<uint8_t> m = cube_mask(5, 1, 4);
    CHECK(extract_surface(m, 1).size() == 26);
  }
  SUBCASE("solid 5-cube has 5^3 - 3^3 = 98 surface voxels") {
    Tensor<uint8_t> m = cube_mask(7, 1, 6);
    CHECK(extract_surface(m, 1).size() == 98);
  }
  SUBCASE("the volume border counts as outside") {
    Tensor<uint8_t> m = cube_mask(3, 0, 3);  // fills the whole volume
    CHECK(extract_surface(m, 1).size() == 26);
  }
  SUBCASE("empty mask raises") {
    Tensor<uint8_t> m({3, 3, 3});
    CHECK_THROWS_AS(extract_surface(m, 1), EmptyStructureError);
  }
}

TEST_CASE("mean surface distance") {
  SUBCASE("identical masks give 0") {
    Tensor<uint8_t> m = cube_mask(8, 2, 6);
    CHECK(mean_surface_distance(m, m, 1, {1, 1, 1}) == 0.0);
  }
  SUBCASE("two single voxels 3 apart at 1mm give 3mm") {
    Tensor<uint8_t> a({8, 8, 8}), b({8, 8, 8});
    a[(4 * 8 + 4) * 8 + 1] = 1;
    b[(4 * 8 + 4) * 8 + 4] = 1;
    CHECK(mean_surface_distance(a, b, 1, {1, 1, 1}) == doctest::Approx(3.0));
  }
  SUBCASE("spacing scales distances") {
    Tensor<uint8_t> a({4, 4, 4}), b({4, 4, 4});
    a[0] = 1;
    b[(1 * 4 + 0) * 4 + 0] = 1;  // 1 voxel along z
    CHECK(mean_surface_distance(a, b, 1, {2.5, 1, 1}) == doctest::Approx(2.5));
  }
  SUBCASE("empty structure raises") {
    Tensor<uint8_t> a({4, 4, 4}), b({4, 4, 4});
    a[0] = 1;
    CHECK_THROWS_AS(mean_surface_distance(a, b, 1, {1, 1, 1}), EmptyStructureError);
  }
}

TEST_CASE("hd95 percentile definition") {
  SUBCASE("pooled distances 1..100 interpolate to 95.05") {
    std::vector<double> v;
    for (int i = 1; i <= 100; ++i) v.push_back(double(i));
    CHECK(percentile_linear(v, 0.95) == doctest::Approx(95.05));
  }
  SUBCASE("identical masks give 0") {
    Tensor<uint8_t> m = cube_mask(8, 2, 6);
    CHECK(hd95(m, m, 1, {1, 1, 1}) == 0.0);
  }
  SUBCASE("hd95 never exceeds the max directed Hausdorff, 100 cases") {
    Rng rng(4);
    int done = 0;
    while (done < 100) {
      Tensor<uint8_t> a = random_blob(rng, 8, 0.2);
      Tensor<uint8_t> b = random_blob(rng, 8, 0.2);
      try {
        auto sa = extract_surface(a, 1);
        auto sb = extract_surface(b, 1);
        auto dab = surface_distances_brute(sa, sb, {1, 1, 1});
        auto dba = surface_distances_brute(sb, sa, {1, 1, 1});
        double mx = 0;
        for (double d : dab) mx = std::max(mx, d);
        for (double d : dba) mx = std::max(mx, d);
        CHECK(hd95(a, b, 1, {1, 1, 1}) <= mx + 1e-12);
        ++done;
      } catch (const EmptyStructureError&) {
      }
    }
  }
}

TEST_CASE("distance transform equals brute force on random cases") {
  Rng rng(9);
  int done = 0;
  while (done < 100) {
    const int64_t n = 6 + int64_t(rng.uniform_index(11));  // up to 16^3
    Tensor<uint8_t> a = random_blob(rng, n, 0.15);
    Tensor<uint8_t> b = random_blob(rng, n, 0.15);
    const std::array<double, 3> spacing{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0),
                                        rng.uniform(0.5, 2.0)};
    try {
      auto sa = extract_surface(a, 1);
      auto sb = extract_surface(b, 1);
      auto brute = surface_distances_brute(sa, sb, spacing);
      auto edt = surface_distances_edt(sa, sb, spacing, a.shape());
      REQUIRE(brute.size() == edt.size());
      for (size_t i = 0; i < brute.size(); ++i)
        CHECK(std::abs(brute[i] - edt[i]) <= 1e-9);
      ++done;
    } catch (const EmptyStructureError&) {
    }
  }
}

TEST_CASE("symmetry and translation invariance") {
  Rng rng(12);
  int done = 0;
  while (done < 100) {
    Tensor<uint8_t> a = random_blob(rng, 10, 0.1);
    Tensor<uint8_t> b = random_blob(rng, 10, 0.1);
    try {
      const std::array<double, 3> sp{1, 1, 1};
      CHECK(mean_surface_distance(a, b, 1, sp) == doctest::Approx(mean_surface_distance(b, a, 1, sp)));
      CHECK(hd95(a, b, 1, sp) == doctest::Approx(hd95(b, a, 1, sp)));
      // shift both volumes by (2,1,3) inside a larger canvas
      Tensor<uint8_t> as({16, 16, 16}), bs({16, 16, 16});
      for (int64_t z = 0; z < 10; ++z)
        for (int64_t y = 0; y < 10; ++y)
          for (int64_t x = 0; x < 10; ++x) {
            as[((z + 2) * 16 + (y + 1)) * 16 + (x + 3)] = a[(z * 10 + y) * 10 + x];
            bs[((z + 2) * 16 + (y + 1)) * 16 + (x + 3)] = b[(z * 10 + y) * 10 + x];
          }
      CHECK(mean_surface_distance(as, bs, 1, sp) ==
            doctest::Approx(mean_surface_distance(a, b, 1, sp)));
      CHECK(hd95(as, bs, 1, sp) == doctest::Approx(hd95(a, b, 1, sp)));
      CHECK(dsc(as, bs, 1) == doctest::Approx(dsc(a, b, 1)));
      ++done;
    } catch (const EmptyStructureError&) {
    }
  }
}

TEST_CASE("dilating the prediction toward a distant truth shrinks MSD") {
  Tensor<uint8_t> pred({16, 16, 16}), truth({16, 16, 16});
  pred[(2 * 16 + 8) * 16 + 8] = 1;
  for (int64_t z = 12; z < 15; ++z)
    for (int64_t y = 7; y < 10; ++y)
      for (int64_t x = 7; x < 10; ++x) truth[(z * 16 + y) * 16 + x] = 1;
  const double before = mean_surface_distance(pred, truth, 1, {1, 1, 1});
  // grow the prediction along +z toward the truth
  for (int64_t z = 2; z <= 6; ++z) pred[(z * 16 + 8) * 16 + 8] = 1;
  const double after = mean_surface_distance(pred, truth, 1, {1, 1, 1});
  CHECK(after < before);
}

TEST_CASE("aggregate statistics") {
  SUBCASE("single case") {
    Aggregate a = aggregate_values({2.5});
    CHECK(a.mean == 2.5);
    CHECK(a.median == 2.5);
    CHECK(a.stddev == 0.0);
  }
  SUBCASE("population stddev of {1,2,3}") {
    Aggregate a = aggregate_values({1, 2, 3});
    CHECK(a.mean == doctest::Approx(2.0));
    CHECK(a.stddev == doctest::Approx(0.8164965809));
    CHECK(a.median == doctest::Approx(2.0));
  }
  SUBCASE("failures are excluded and counted") {
    MetricsRow row{"m", "p", "s", {0.9, 0.8}, {1.0, 3.0}, {2.0, 4.0}, 1};
    CHECK(row.msd().mean == doctest::Approx(2.0));
    CHECK(row.msd().cases == 2);
    CHECK(row.failures == 1);
  }
}

TEST_CASE("report round-trips") {
  MetricsReport rep;
  rep.structures = {"bladder", "prostate"};
  rep.rows.push_back({"cross_stitch", "Segmentation", "bladder",
                      {0.91, 0.93}, {1.25, 0.75}, {3.5, 2.5}, 0});
  rep.rows.push_back({"cross_stitch", "Segmentation", "prostate",
                      {0.85, 0.8}, {1.5}, {4.0}, 1});
  rep.rows.push_back({"cross_stitch", "Registration", "bladder",
                      {0.7, 0.72}, {2.5, 2.7}, {6.0, 6.5}, 0});

  SUBCASE("delimited form is exact") {
    MetricsReport back = parse_report_delimited(format_report_delimited(rep));
    REQUIRE(back.rows.size() == rep.rows.size());
    for (size_t i = 0; i < rep.rows.size(); ++i) {
      CHECK(back.rows[i].method == rep.rows[i].method);
      CHECK(back.rows[i].path == rep.rows[i].path);
      CHECK(back.rows[i].structure == rep.rows[i].structure);
      CHECK(back.rows[i].dsc_values == rep.rows[i].dsc_values);
      CHECK(back.rows[i].msd_values == rep.rows[i].msd_values);
      CHECK(back.rows[i].hd95_values == rep.rows[i].hd95_values);
      CHECK(back.rows[i].failures == rep.rows[i].failures);
    }
  }
  SUBCASE("text table parses back to the printed aggregates") {
    const std::string table = format_report_table(rep);
    auto entries = parse_report_table(table);
    bool found = false;
    for (const auto& e : entries) {
      if (e.metric == "MSD (mm)" && e.structure == "bladder" && e.path == "Segmentation") {
        found = true;
        CHECK(e.mean == doctest::Approx(1.0).epsilon(0.005));
        CHECK(e.median == doctest::Approx(1.0).epsilon(0.005));
        CHECK(e.stddev == doctest::Approx(0.25).epsilon(0.005));
      }
    }
    CHECK(found);
    // the layout carries the table-1 column structure
    CHECK(table.find("Output Path") != std::string::npos);
    CHECK(table.find("u+-s") != std::string::npos);
    CHECK(table.find("Median") != std::string::npos);
  }
}
