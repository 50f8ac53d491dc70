#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "roadfuse/error.hpp"
#include "roadfuse/grid.hpp"
#include "support.hpp"

using namespace roadfuse;

namespace {

// Percentile by sorting and linear interpolation between closest ranks.
double sorted_percentile(std::vector<double> v, double pct) {
    std::sort(v.begin(), v.end());
    const double rank = pct / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (rank - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

RasterGrid ramp(int w, int h, double a, double b, double c) {
    RasterGrid g(w, h, 0.0, 100.0, 10.0);
    for (int r = 0; r < h; ++r) {
        for (int col = 0; col < w; ++col) g.at(col, r) = static_cast<float>(a * col + b * r + c);
    }
    return g;
}

}  // namespace

TEST_SUITE("grid") {
    TEST_CASE("world_to_pixel follows the half-open convention") {
        RasterGrid g(4, 4, 0.0, 100.0, 2.5);
        CHECK(world_to_pixel(g, 0.0, 100.0) == CellIndex{0, 0});
        CHECK(world_to_pixel(g, 2.5, 100.0) == CellIndex{1, 0});
        CHECK(world_to_pixel(g, 2.4999, 97.5001) == CellIndex{0, 0});
        CHECK(world_to_pixel(g, 1.0, 97.5) == CellIndex{0, 1});
        CHECK(world_to_pixel(g, -0.1, 100.5) == CellIndex{-1, -1});
        const WorldPoint p = pixel_to_world(g, 0, 0);
        CHECK(p.x == doctest::Approx(1.25));
        CHECK(p.y == doctest::Approx(98.75));
    }

    TEST_CASE("pixel centers map back to their own cell") {
        RasterGrid g(37, 23, 512345.5, 4541234.25, 2.5);
        for (int r = 0; r < g.height(); ++r) {
            for (int c = 0; c < g.width(); ++c) {
                const WorldPoint p = pixel_to_world(g, c, r);
                REQUIRE(world_to_pixel(g, p.x, p.y) == CellIndex{c, r});
            }
        }
    }

    TEST_CASE("constructor rejects invalid geometry") {
        CHECK_THROWS_AS(RasterGrid(0, 3, 0, 0, 1), DataError);
        CHECK_THROWS_AS(RasterGrid(3, 3, 0, 0, 0.0), DataError);
        CHECK_THROWS_AS(RasterGrid(2, 2, 0, 0, 1, -9999.0f, std::vector<float>{1, 2, 3}), DataError);
        CHECK_THROWS_AS(RasterGrid(1, 1, 0, 0, 1, -9999.0f, std::vector<float>{NAN}), DataError);
    }

    TEST_CASE("grd roundtrip is bit exact") {
        test::TempDir dir;
        RasterGrid small(2, 2, 10.0, 20.0, 2.5, -9999.0f, std::vector<float>{0, 1, 2, 3});
        write_grd(small, dir / "a.grd");
        CHECK(read_grd(dir / "a.grd") == small);
        CHECK(std::filesystem::file_size(dir / "a.grd") > 16);

        RasterGrid with_nodata = small;
        with_nodata.at(1, 0) = with_nodata.nodata();
        write_grd(with_nodata, dir / "b.grd");
        const RasterGrid back = read_grd(dir / "b.grd");
        CHECK(back.is_nodata(back.at(1, 0)));
        CHECK(back == with_nodata);

        std::mt19937_64 rng(3);
        std::normal_distribution<float> n(0.0f, 1000.0f);
        RasterGrid big(512, 512, 0.1, 0.2, 0.3);
        for (auto& v : big.data()) v = n(rng);
        write_grd(big, dir / "c.grd");
        CHECK(read_grd(dir / "c.grd") == big);
    }

    TEST_CASE("grd reader rejects malformed files") {
        test::TempDir dir;
        RasterGrid g(3, 2, 0, 0, 1);
        write_grd(g, dir / "ok.grd");
        std::string bytes;
        {
            std::ifstream in(dir / "ok.grd", std::ios::binary);
            bytes.assign(std::istreambuf_iterator<char>(in), {});
        }
        auto write = [&](const std::string& name, const std::string& content) {
            std::ofstream(dir / name, std::ios::binary) << content;
            return dir / name;
        };
        CHECK_THROWS_AS(read_grd(write("magic.grd", "GRD9" + bytes.substr(4))), DataError);
        CHECK_THROWS_AS(read_grd(write("short.grd", bytes.substr(0, bytes.size() - 3))), DataError);
        CHECK_THROWS_AS(read_grd(write("long.grd", bytes + "abcd")), DataError);
        CHECK_THROWS_AS(read_grd(dir / "missing.grd"), DataError);
    }

    TEST_CASE("keys kernel values") {
        CHECK(keys_kernel(0.0) == doctest::Approx(1.0));
        CHECK(keys_kernel(1.0) == doctest::Approx(0.0));
        CHECK(keys_kernel(2.0) == doctest::Approx(0.0));
        CHECK(keys_kernel(-0.5) == doctest::Approx(keys_kernel(0.5)));
        // Partition of unity at any phase.
        for (double t : {0.0, 0.125, 0.3, 0.5, 0.875}) {
            const double s = keys_kernel(t + 1) + keys_kernel(t) + keys_kernel(1 - t) + keys_kernel(2 - t);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }

    TEST_CASE("cubic upscaling of constant and linear fields") {
        RasterGrid constant(6, 5, 0.0, 50.0, 10.0, -9999.0f, 7.0f);
        const RasterGrid up = upscale_cubic(constant, 4);
        CHECK(up.width() == 24);
        CHECK(up.height() == 20);
        CHECK(up.pixel_size() == doctest::Approx(2.5));
        CHECK(up.origin_x() == constant.origin_x());
        CHECK(up.origin_y() == constant.origin_y());
        for (float v : up.data()) CHECK(std::abs(v - 7.0f) <= 1e-5f);

        CHECK(upscale_cubic(constant, 1) == constant);

        const RasterGrid lin = ramp(8, 7, 2.0, 3.0, 0.0);
        const RasterGrid fine = upscale_cubic(lin, 4);
        double worst = 0.0;
        for (int r = 0; r < fine.height(); ++r) {
            for (int c = 0; c < fine.width(); ++c) {
                const double x = (c + 0.5) / 4.0 - 0.5;
                const double y = (r + 0.5) / 4.0 - 0.5;
                worst = std::max(worst, std::abs(fine.at(c, r) - (2.0 * x + 3.0 * y)));
            }
        }
        CHECK(worst < 1e-5);
    }

    TEST_CASE("cubic upscaling commutes with affine value maps") {
        std::mt19937_64 rng(9);
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        RasterGrid g(9, 6, 0, 0, 10);
        for (auto& v : g.data()) v = u(rng);
        RasterGrid h = g.like();
        for (std::size_t i = 0; i < g.size(); ++i) h.data()[i] = 3.0f * g.data()[i] - 2.0f;
        const RasterGrid ug = upscale_cubic(g, 4), uh = upscale_cubic(h, 4);
        for (std::size_t i = 0; i < ug.size(); ++i) CHECK(std::abs(uh.data()[i] - (3.0f * ug.data()[i] - 2.0f)) <= 1e-5f);
    }

    TEST_CASE("cubic upscaling errors") {
        RasterGrid g(5, 5, 0, 0, 10);
        CHECK_THROWS_AS(upscale_cubic(g, 0), ConfigError);
        CHECK_THROWS_AS(upscale_cubic(RasterGrid(3, 5, 0, 0, 10), 2), DataError);
    }

    TEST_CASE("normalize_minmax") {
        std::vector<float> values(101);
        for (int i = 0; i <= 100; ++i) values[static_cast<std::size_t>(i)] = static_cast<float>(i);
        RasterGrid g(101, 1, 0, 0, 1, -9999.0f, values);
        const auto full = normalize_minmax(g, 0.0, 100.0);
        CHECK_FALSE(full.degenerate);
        for (int i = 0; i <= 100; ++i) CHECK(full.grid.at(i, 0) == doctest::Approx(i / 100.0).epsilon(1e-6));

        const auto flat = normalize_minmax(RasterGrid(4, 4, 0, 0, 1, -9999.0f, 3.0f));
        CHECK(flat.degenerate);
        for (float v : flat.grid.data()) CHECK(v == 0.0f);

        std::vector<float> big(1000);
        std::vector<double> as_double(1000);
        for (int i = 0; i < 1000; ++i) {
            big[static_cast<std::size_t>(i)] = static_cast<float>(i);
            as_double[static_cast<std::size_t>(i)] = i;
        }
        std::shuffle(big.begin(), big.end(), std::mt19937_64(1));
        RasterGrid g2(50, 20, 0, 0, 1, -9999.0f, big);
        const double lo = sorted_percentile(as_double, 2), hi = sorted_percentile(as_double, 98);
        const auto clipped = normalize_minmax(g2, 2, 98);
        for (std::size_t i = 0; i < big.size(); ++i) {
            const double expect = (std::clamp<double>(big[i], lo, hi) - lo) / (hi - lo);
            CHECK(clipped.grid.data()[i] == doctest::Approx(expect).epsilon(1e-6));
        }
    }

    TEST_CASE("normalize_minmax passes nodata through and is idempotent on unit data") {
        RasterGrid g(3, 1, 0, 0, 1, -1.0f, std::vector<float>{0.0f, -1.0f, 1.0f});
        const auto out = normalize_minmax(g, 0, 100);
        CHECK(out.grid.at(1, 0) == -1.0f);
        CHECK(out.grid.at(0, 0) == 0.0f);
        CHECK(out.grid.at(2, 0) == 1.0f);
        CHECK_THROWS_AS(normalize_minmax(RasterGrid(2, 1, 0, 0, 1, -1.0f, -1.0f)), DataError);

        std::mt19937_64 rng(4);
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        RasterGrid unit(16, 16, 0, 0, 1);
        for (auto& v : unit.data()) v = u(rng);
        unit.data()[0] = 0.0f;
        unit.data()[1] = 1.0f;
        const auto again = normalize_minmax(unit, 0, 100);
        for (std::size_t i = 0; i < unit.size(); ++i) CHECK(std::abs(again.grid.data()[i] - unit.data()[i]) <= 1e-6f);
    }

    TEST_CASE("percentile matches the sort-based oracle") {
        std::mt19937_64 rng(5);
        std::exponential_distribution<double> e(0.1);
        std::vector<double> v(777);
        for (auto& x : v) x = e(rng);
        for (double p : {0.0, 1.0, 2.0, 50.0, 97.5, 99.0, 100.0}) {
            CHECK(percentile(v, p) == doctest::Approx(sorted_percentile(v, p)).epsilon(1e-12));
        }
    }

    TEST_CASE("grid stack alignment and roundtrip") {
        GridStack s;
        s.push_back(RasterGrid(4, 3, 0, 0, 1), "a");
        CHECK_THROWS_AS(s.push_back(RasterGrid(4, 3, 1, 0, 1), "b"), DataError);
        s.push_back(RasterGrid(4, 3, 0, 0, 1, -9999.0f, 2.0f), "b");
        CHECK(s.band("b").at(0, 0) == 2.0f);
        CHECK_THROWS(s.band("zzz"));
        test::TempDir dir;
        write_stack(s, dir / "stack");
        const GridStack back = read_stack(dir / "stack");
        CHECK(back.band_names() == s.band_names());
        CHECK(back[1] == s[1]);
    }
}
