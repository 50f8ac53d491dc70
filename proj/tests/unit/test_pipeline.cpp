#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "roadfuse/error.hpp"
#include "roadfuse/pipeline.hpp"
#include "roadfuse/report.hpp"
#include "roadfuse/synth.hpp"
#include "support.hpp"

using namespace roadfuse;
using nlohmann::json;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

json toy_experiment() {
    return json::parse(R"({
      "seed": 3,
      "work_dir": "work",
      "areas": [{"name": "A", "source": "A/area.json"}, {"name": "B", "source": "B/area.json"}],
      "prep": {"upscale_factor": 1},
      "patches": {"size": 16, "overlap": 0.2, "angles": [0, 90], "seed": 3},
      "models": [{"backbone": {"kind": "unet", "depth": 2, "base_width": 2}, "fusion": {"stage": "early"}}],
      "losses": ["mse"],
      "train": {"batch_size": 2, "epochs": 1, "batches_per_epoch": 2, "val_batches": 1},
      "eval": {"n": 4},
      "cross": {"train": [["A"], ["A", "B"]], "test": [["A"], ["B"], ["A", "B"]]},
      "benchmarks": [{"label": "U-Net + Bicubic x4 Overall", "iou": 0.6894, "source": "published"}]
    })");
}

EvalRow row(std::string train, std::string model, std::string test, std::string stage, std::string op,
            std::string loss, double miou) {
    EvalRow r;
    r.train_area = std::move(train);
    r.model = std::move(model);
    r.test_area = std::move(test);
    r.stage = std::move(stage);
    r.op = std::move(op);
    r.loss = std::move(loss);
    r.miou = miou;
    r.mboundary_iou = miou / 2;
    return r;
}

}  // namespace

TEST_SUITE("pipeline") {
    TEST_CASE("synthetic areas are deterministic") {
        const SynthArea a = synth_area(9, 4, 32), b = synth_area(9, 4, 32), c = synth_area(10, 4, 32);
        CHECK(a.labels == b.labels);
        for (std::size_t i = 0; i < 4; ++i) CHECK(a.satellite[i] == b.satellite[i]);
        CHECK(a.points.size() == b.points.size());
        CHECK_FALSE(a.labels == c.labels);

        test::TempDir d1, d2;
        synth_dataset(9, 4, 32, d1.path());
        synth_dataset(9, 4, 32, d2.path());
        for (const char* f : {"spec.json", "roads.csv", "gps.csv", "sat_b0.grd", "sat_b3.grd", "area.json"}) {
            CHECK(slurp(d1 / f) == slurp(d2 / f));
        }
    }

    TEST_CASE("synthetic label fraction stays within 2 to 40 percent") {
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const SynthArea a = synth_area(seed, 8, 64);
            double ones = 0;
            for (float v : a.labels.data()) ones += v;
            const double frac = ones / static_cast<double>(a.labels.size());
            INFO("seed " << seed);
            CHECK(frac >= 0.02);
            CHECK(frac <= 0.40);
        }
    }

    TEST_CASE("gps points fall on labeled cells") {
        const SynthArea a = synth_area(4, 8, 32);
        const RasterGrid counts = rasterize_gps(a.points, a.spec).grid;
        std::size_t on_road = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            if (counts.data()[i] > 0) REQUIRE(a.labels.data()[i] == 1.0f);
            on_road += a.labels.data()[i] == 1.0f;
        }
        CHECK(a.points.size() > on_road);  // about 3 points per road cell
        const GridSpec ext = synth_extent(32, 64);
        CHECK(ext.width == 421);
        CHECK(ext.height == 217);
    }

    TEST_CASE("config errors name the field") {
        json j = toy_experiment();
        j["areas"] = json::array({{{"name", "A"}, {"satellite", {"a.grd", "b.grd", "c.grd", "d.grd"}}, {"gps", "g.csv"}, {"spec", "s.json"}}});
        try {
            experiment_config_from_json(j);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("areas[0].labels") != std::string::npos);
        }
        json k = toy_experiment();
        k["losses"] = {"hinge"};
        CHECK_THROWS_AS(experiment_config_from_json(k), ConfigError);
        CHECK(area_set_name({"A", "B"}) == "A+B");
    }

    TEST_CASE("hashes") {
        CHECK(content_hash("") == "cbf29ce484222325");
        CHECK(content_hash("a") == "af63dc4c8601ec8c");
        CHECK(content_hash("abc") != content_hash("abd"));
    }

    TEST_CASE("end to end run is cached on rerun") {
        test::TempDir dir;
        synth_dataset(1, 6, 16, dir / "A");
        synth_dataset(2, 6, 16, dir / "B");
        {
            std::ofstream(dir / "exp.json") << toy_experiment().dump(2);
        }
        const ExperimentConfig cfg = read_experiment_config(dir / "exp.json");
        const auto first = run_pipeline(cfg);
        CHECK(std::none_of(first.begin(), first.end(), [](const StageStatus& s) { return s.cached; }));
        const auto rows = read_eval_csv(dir / "work" / "matrix.csv");
        CHECK(rows.size() == 6);
        const std::string report = slurp(dir / "work" / "report.md");
        CHECK(report.find("U-Net + Bicubic x4 Overall, IoU 0.6894") != std::string::npos);

        const auto second = run_pipeline(cfg);
        REQUIRE(second.size() == first.size());
        for (const auto& s : second) CHECK_MESSAGE(s.cached, s.name);
        CHECK(read_eval_csv(dir / "work" / "matrix.csv") == rows);

        // Touching a label file invalidates the label-dependent stages only.
        {
            std::ofstream(dir / "B" / "roads.csv", std::ios::app) << "footway,\"LINESTRING (1000 1010, 1020 1010)\"\n";
        }
        const auto third = run_pipeline(cfg);
        bool a_cached = false, b_rerun = false;
        for (const auto& s : third) {
            if (s.name == "ingest:A") a_cached = s.cached;
            if (s.name == "ingest:B") b_rerun = !s.cached;
        }
        CHECK(a_cached);
        CHECK(b_rerun);
    }

    TEST_CASE("report layout") {
        std::vector<EvalRow> rows;
        for (const char* tr : {"A", "B", "A+B"})
            for (const char* te : {"A", "B", "A+B"})
                for (const char* loss : {"mse", "bce", "focal"}) rows.push_back(row(tr, "unet", te, "none", "", loss, 0.5));
        const Report r = emit_report(rows);
        std::istringstream csv(r.csv);
        std::string header;
        std::getline(csv, header);
        CHECK(std::count(header.begin(), header.end(), ',') == 3 + 2 * 3 - 1);
        int lines = 0;
        for (std::string l; std::getline(csv, l);) lines += !l.empty();
        CHECK(lines == 9);

        const std::vector<EvalRow> one{row("A", "unet", "A", "late2", "multiply", "mse", 0.75)};
        const Report single = emit_report(one);
        CHECK(single.layout.variants == std::vector<std::string>{"late2/multiply"});
        CHECK(single.markdown.find("0.750") != std::string::npos);

        rows.pop_back();
        try {
            emit_report(rows, r.layout);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("focal") != std::string::npos);
        }

        std::vector<EvalRow> best{row("A", "unet", "A", "none", "", "mse", 0.4), row("A", "unet", "B", "none", "", "mse", 0.6)};
        CHECK(emit_report(best).markdown.find("**0.600**") != std::string::npos);

        const auto marks = benchmarks_from_json(json::parse(R"([{"label":"U-Net + Bicubic x4 Overall","iou":0.6894,"source":"s"}])"));
        const Report withb = emit_report(one, {}, marks);
        CHECK(withb.markdown.find("U-Net + Bicubic x4 Overall, IoU 0.6894") != std::string::npos);
    }
}
