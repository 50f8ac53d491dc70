#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "roadfuse/complexity.hpp"
#include "roadfuse/error.hpp"
#include "support.hpp"

using namespace roadfuse;

namespace {

GrayPatch make(int w, int h, std::vector<double> v) { return GrayPatch{w, h, std::move(v)}; }

GrayPatch random_patch(int w, int h, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0, 1);
    GrayPatch p{w, h, std::vector<double>(static_cast<std::size_t>(w) * h)};
    for (auto& v : p.values) v = u(rng);
    return p;
}

GrayPatch checkerboard(int n) {
    GrayPatch p{n, n, std::vector<double>(static_cast<std::size_t>(n) * n)};
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) p.values[static_cast<std::size_t>(r) * n + c] = (r + c) % 2 ? 1.0 : 0.0;
    return p;
}

// Straight counting over both directions of every offset.
std::vector<double> glcm_oracle(const GrayPatch& p, int levels, const std::vector<GlcmOffset>& offsets) {
    std::vector<double> m(static_cast<std::size_t>(levels) * levels, 0.0);
    double total = 0;
    for (auto [dr, dc] : offsets) {
        for (int r = 0; r < p.height; ++r) {
            for (int c = 0; c < p.width; ++c) {
                const int r2 = r + dr, c2 = c + dc;
                if (r2 < 0 || c2 < 0 || r2 >= p.height || c2 >= p.width) continue;
                const int a = quantize(p.at(c, r), levels), b = quantize(p.at(c2, r2), levels);
                m[static_cast<std::size_t>(a) * levels + b] += 1;
                m[static_cast<std::size_t>(b) * levels + a] += 1;
                total += 2;
            }
        }
    }
    for (auto& v : m) v /= total;
    return m;
}

}  // namespace

TEST_SUITE("complexity") {
    TEST_CASE("quantize") {
        CHECK(quantize(0.0, 64) == 0);
        CHECK(quantize(1.0, 64) == 63);
        CHECK(quantize(0.5, 2) == 1);
        CHECK(quantize(-3.0, 8) == 0);
        CHECK(quantize(7.0, 8) == 7);
    }

    TEST_CASE("entropy examples") {
        CHECK(shannon_entropy(make(4, 4, std::vector<double>(16, 0.3))) == 0.0);
        std::vector<double> half(16, 0.0);
        for (int i = 8; i < 16; ++i) half[static_cast<std::size_t>(i)] = 1.0;
        CHECK(shannon_entropy(make(4, 4, half)) == doctest::Approx(1.0).epsilon(1e-15));
        std::vector<double> counts;
        for (int i = 0; i < 8; ++i) counts.push_back(0.0);
        for (int i = 0; i < 4; ++i) counts.push_back(0.25);
        for (int i = 0; i < 2; ++i) counts.push_back(0.5);
        for (int i = 0; i < 2; ++i) counts.push_back(1.0);
        CHECK(shannon_entropy(make(4, 4, counts)) == doctest::Approx(1.75).epsilon(1e-15));
        CHECK_THROWS_AS(shannon_entropy(make(0, 0, {})), DataError);
    }

    TEST_CASE("entropy bounds and permutation invariance") {
        std::mt19937_64 rng(1);
        for (int t = 0; t < 10; ++t) {
            GrayPatch p = random_patch(16, 16, rng);
            const double e = shannon_entropy(p);
            CHECK(e >= 0.0);
            CHECK(e <= 8.0);
            std::shuffle(p.values.begin(), p.values.end(), rng);
            CHECK(shannon_entropy(p) == doctest::Approx(e).epsilon(1e-12));
        }
    }

    TEST_CASE("glcm examples") {
        const Glcm pair = glcm(make(2, 1, {0.0, 1.0}), 64, {{0, 1}});
        CHECK(pair.at(0, 63) == 0.5);
        CHECK(pair.at(63, 0) == 0.5);
        const Glcm flat = glcm(make(4, 4, std::vector<double>(16, 0.5)));
        CHECK(flat.at(32, 32) == doctest::Approx(1.0));
        CHECK(homogeneity(flat) == doctest::Approx(1.0));
        CHECK(homogeneity(glcm(checkerboard(8), 2, {{0, 1}})) == doctest::Approx(0.5));
        CHECK_THROWS_AS(glcm(make(1, 1, {0.5})), ShapeError);
    }

    TEST_CASE("glcm matches the counting oracle") {
        std::mt19937_64 rng(2);
        for (int t = 0; t < 5; ++t) {
            const GrayPatch p = random_patch(8, 8, rng);
            const Glcm m = glcm(p, 64);
            CHECK(m.p == glcm_oracle(p, 64, default_glcm_offsets()));
            double total = 0;
            for (int i = 0; i < 64; ++i)
                for (int j = 0; j < 64; ++j) {
                    total += m.at(i, j);
                    REQUIRE(m.at(i, j) == m.at(j, i));
                }
            CHECK(std::abs(total - 1.0) < 1e-9);
        }
    }

    TEST_CASE("homogeneity oracle and validation") {
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> u(0, 1);
        Glcm m{16, std::vector<double>(256)};
        double total = 0;
        for (auto& v : m.p) total += (v = u(rng));
        for (auto& v : m.p) v /= total;
        double want = 0;
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j) want += m.at(i, j) / (1.0 + std::abs(i - j));
        CHECK(std::abs(homogeneity(m) - want) < 1e-12);
        m.p[0] += 1e-3;
        CHECK_THROWS_AS(homogeneity(m), DataError);
    }

    TEST_CASE("homogeneity is texture sensitive") {
        GrayPatch board = checkerboard(8);
        GrayPatch sorted = board;
        std::sort(sorted.values.begin(), sorted.values.end());
        CHECK(shannon_entropy(board) == shannon_entropy(sorted));
        CHECK(homogeneity(glcm(sorted)) > homogeneity(glcm(board)));
    }

    TEST_CASE("area report summaries") {
        SynthOptions flat;
        flat.noise_sigma = 0.0;
        flat.road_density = 0.0;
        SynthOptions noisy;
        noisy.noise_sigma = 0.5;
        const PatchDataset a = test::toy_dataset("flat", 1, 4, 16, flat, {0});
        const PatchDataset b = test::toy_dataset("noisy", 2, 4, 16, noisy, {0});
        const ComplexityReport rep = area_report({&a, &b});
        REQUIRE(rep.summaries.size() == 2);
        CHECK(rep.rows.size() == a.manifest().records.size() + b.manifest().records.size());
        std::map<std::string, std::pair<double, double>> sums;
        std::map<std::string, int> counts;
        for (const auto& r : rep.rows) {
            sums[r.area].first += r.entropy;
            sums[r.area].second += r.homogeneity;
            counts[r.area]++;
            CHECK(r.homogeneity > 0.0);
            CHECK(r.homogeneity <= 1.0 + 1e-12);
        }
        for (const auto& s : rep.summaries) {
            CHECK(s.n == static_cast<std::size_t>(counts[s.area]));
            CHECK(std::abs(s.entropy_mean - sums[s.area].first / counts[s.area]) < 1e-12);
            CHECK(std::abs(s.homogeneity_mean - sums[s.area].second / counts[s.area]) < 1e-12);
        }
        CHECK(rep.summaries[0].area == "flat");
        CHECK(rep.summaries[1].entropy_mean > rep.summaries[0].entropy_mean);
        CHECK(rep.summaries[1].homogeneity_mean < rep.summaries[0].homogeneity_mean);

        const std::vector<ComplexityRow> twins{{1, "x", 2.0, 0.5}, {2, "x", 2.0, 0.5}};
        const auto s = summarize(twins);
        CHECK(s[0].entropy_var == 0.0);
        CHECK(s[0].homogeneity_var == 0.0);

        test::TempDir dir;
        write_complexity_csv(rep.rows, dir / "c.csv");
        write_complexity_histogram(rep.rows, ComplexityOptions{}, dir / "h.csv");
        std::ifstream in(dir / "c.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "patch_id,area,entropy,homogeneity");
        std::ifstream hin(dir / "h.csv");
        std::getline(hin, header);
        CHECK(header == "area,metric,bin_lo,bin_hi,count");
        int lines = 0;
        for (std::string l; std::getline(hin, l);) ++lines;
        CHECK(lines == 2 * 2 * 20);
        const auto j = to_json(rep.summaries);
        CHECK(j.contains("flat"));
    }
}
