#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "roadfuse/complexity.hpp"
#include "roadfuse/error.hpp"
#include "roadfuse/ingest.hpp"
#include "roadfuse/parallel.hpp"
#include "roadfuse/pipeline.hpp"
#include "roadfuse/synth.hpp"
#include "roadfuse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace roadfuse;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    int threads = 0;
    bool verbose = false;
};

void say(const Globals& g, const std::string& msg) {
    if (g.verbose) std::cerr << msg << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

// Path of p as seen from dir (both made absolute first).
std::string relative_to(const std::string& p, const fs::path& dir) {
    return fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(dir).lexically_normal()).string();
}

int boundary_d_from(const std::string& d) {
    if (d == "auto") return 0;
    try {
        const int v = std::stoi(d);
        if (v >= 1) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("--d must be a positive integer or \"auto\"");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"roadfuse: road extraction from imagery and GPS trajectories"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "Seed overriding the one in the config");
    app.add_option("--threads", g.threads, "Worker threads (0 = hardware concurrency)");
    app.add_flag("--verbose,-v", g.verbose, "Log progress to stderr");

    // ingest-gps
    std::string gps_in, gps_spec, gps_out;
    double clip_pct = 99.0;
    bool skip_bad = false, raw_counts = false;
    auto* ingest_gps = app.add_subcommand("ingest-gps", "Rasterize GPS points into a normalized frequency grid");
    ingest_gps->add_option("--in", gps_in, "Points CSV (traj_id,t,x,y)")->required();
    ingest_gps->add_option("--spec", gps_spec, "GridSpec JSON")->required();
    ingest_gps->add_option("--out", gps_out, "Output .grd")->required();
    ingest_gps->add_option("--clip-pct", clip_pct, "Percentile the frequencies are clipped at");
    ingest_gps->add_flag("--skip-bad", skip_bad, "Count and skip malformed lines instead of failing");
    ingest_gps->add_flag("--raw", raw_counts, "Write raw counts without normalization");

    // ingest-roads
    std::string roads_in, roads_spec, roads_out;
    auto* ingest_roads = app.add_subcommand("ingest-roads", "Buffer road polylines into a binary label grid");
    ingest_roads->add_option("--in", roads_in, "Roads CSV (fclass,wkt)")->required();
    ingest_roads->add_option("--spec", roads_spec, "GridSpec JSON")->required();
    ingest_roads->add_option("--out", roads_out, "Output .grd")->required();

    // prep-sentinel
    std::vector<std::string> bands_in;
    std::string prep_out, prep_spec;
    int factor = 4;
    double lo = 2.0, hi = 98.0;
    auto* prep = app.add_subcommand("prep-sentinel", "Upscale and normalize satellite bands into a grid stack");
    prep->add_option("--in", bands_in, "Band .grd files (R G B NIR)")->required();
    prep->add_option("--out", prep_out, "Output stack directory")->required();
    prep->add_option("--factor", factor, "Integer upscale factor");
    prep->add_option("--lo", lo, "Lower clip percentile");
    prep->add_option("--hi", hi, "Upper clip percentile");
    prep->add_option("--spec", prep_spec, "GridSpec the upscaled bands must match");

    // make-patches
    std::string patches_cfg, patches_out;
    auto* make_patches = app.add_subcommand("make-patches", "Tile, augment and split an area into a manifest");
    make_patches->add_option("--config", patches_cfg, "Patch config JSON")->required();
    make_patches->add_option("--out", patches_out, "Output manifest JSON")->required();

    // train
    std::string train_cfg, train_out;
    auto* train_cmd = app.add_subcommand("train", "Train one model");
    train_cmd->add_option("--config", train_cfg, "Train config JSON")->required();
    train_cmd->add_option("--out", train_out, "Output directory (overrides out_dir)");

    // eval
    std::string eval_ckpt, eval_manifest, eval_split = "test", eval_out, eval_d = "auto";
    std::size_t eval_n = 1000;
    double eval_tau = kDefaultThreshold;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
    eval_cmd->add_option("--model", eval_ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--manifest", eval_manifest, "Manifest JSON")->required();
    eval_cmd->add_option("--split", eval_split, "train, val or test");
    eval_cmd->add_option("--n", eval_n, "Number of sampled patches");
    eval_cmd->add_option("--d", eval_d, "Boundary distance in pixels or auto");
    eval_cmd->add_option("--tau", eval_tau, "Binarization threshold");
    eval_cmd->add_option("--out", eval_out, "EvalRow CSV")->required();

    // cross-eval
    std::string cross_cfg, cross_out;
    auto* cross_cmd = app.add_subcommand("cross-eval", "Train-area x test-area evaluation matrix");
    cross_cmd->add_option("--config", cross_cfg, "Cross-evaluation config JSON")->required();
    cross_cmd->add_option("--out", cross_out, "EvalRow CSV")->required();

    // complexity
    std::vector<std::string> cx_manifests;
    std::string cx_out;
    auto* cx_cmd = app.add_subcommand("complexity", "Per-patch entropy and GLCM homogeneity per area");
    cx_cmd->add_option("--manifest", cx_manifests, "Manifest JSON (repeatable)")->required();
    cx_cmd->add_option("--out", cx_out, "Per-patch CSV; summary.json and histogram.csv go next to it")->required();

    // synth
    std::string synth_out;
    int synth_n = 32, synth_size = 64;
    SynthOptions synth_opts;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic area");
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();
    synth_cmd->add_option("--n", synth_n, "Number of base patches");
    synth_cmd->add_option("--size", synth_size, "Patch size in pixels");
    synth_cmd->add_option("--noise", synth_opts.noise_sigma, "Satellite noise sigma");
    synth_cmd->add_option("--density", synth_opts.road_density, "Roads per patch-sized area");
    synth_cmd->add_option("--hidden", synth_opts.hidden_fraction, "Fraction of roads missing from the imagery");
    synth_cmd->add_option("--distractors", synth_opts.distractors, "Road-like lines in the imagery only");
    synth_cmd->add_option("--overlap", synth_opts.overlap, "Tiling overlap the extent is laid out for");

    // report
    std::vector<std::string> report_rows;
    std::string report_out, report_bench;
    auto* report_cmd = app.add_subcommand("report", "Render EvalRow CSVs as CSV and Markdown tables");
    report_cmd->add_option("--rows", report_rows, "EvalRow CSV (repeatable)")->required();
    report_cmd->add_option("--out", report_out, "Output directory")->required();
    report_cmd->add_option("--benchmarks", report_bench, "JSON list of external results to quote");

    // run
    std::string run_cfg;
    auto* run_cmd = app.add_subcommand("run", "Run the full pipeline with stage caching");
    run_cmd->add_option("--config", run_cfg, "Experiment config JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (*seed_opt) g.seed = seed_value;

    try {
        set_num_threads(g.threads);

        if (*ingest_gps) {
            const GridSpec spec = read_grid_spec(gps_spec);
            std::ifstream in(gps_in);
            if (!in) throw DataError("cannot open " + gps_in);
            const GpsRaster r = rasterize_gps_csv(in, spec, skip_bad);
            write_grd(raw_counts ? r.grid : normalize_gps(r.grid, clip_pct), gps_out);
            say(g, "points outside extent: " + std::to_string(r.skipped) + ", bad lines: " + std::to_string(r.bad_lines));
        } else if (*ingest_roads) {
            const GridSpec spec = read_grid_spec(roads_spec);
            std::ifstream in(roads_in);
            if (!in) throw DataError("cannot open " + roads_in);
            const auto roads = read_roads_csv(in);
            write_grd(rasterize_labels(roads, spec), roads_out);
            say(g, "roads: " + std::to_string(roads.size()));
        } else if (*prep) {
            GridStack stack;
            for (std::size_t b = 0; b < bands_in.size(); ++b) {
                RasterGrid band = upscale_cubic(read_grd(bands_in[b]), factor);
                if (!prep_spec.empty() && grid_spec_of(band) != read_grid_spec(prep_spec)) {
                    throw DataError(bands_in[b] + ": upscaled band does not match " + prep_spec);
                }
                auto norm = normalize_minmax(band, lo, hi);
                if (norm.degenerate) std::cerr << "warning: " << bands_in[b] << " is constant after clipping\n";
                stack.push_back(std::move(norm.grid), "sat" + std::to_string(b));
            }
            write_stack(stack, prep_out);
        } else if (*make_patches) {
            const fs::path base = fs::path(patches_cfg).parent_path();
            const json j = read_json(patches_cfg);
            const fs::path out_dir = fs::absolute(patches_out).parent_path();
            ManifestConfig mc;
            PatchSources sources;
            std::string area;
            try {
                area = j.at("area").get<std::string>();
                const auto& s = j.at("sources");
                for (const auto& p : s.at("satellite")) {
                    sources.satellite.push_back(relative_to(resolve(base, p.get<std::string>()), out_dir));
                }
                sources.gps = relative_to(resolve(base, s.at("gps").get<std::string>()), out_dir);
                sources.labels = relative_to(resolve(base, s.at("labels").get<std::string>()), out_dir);
                mc.patch_size = j.value("size", mc.patch_size);
                mc.overlap = j.value("overlap", mc.overlap);
                mc.angles = j.value("angles", mc.angles);
                const auto ratios = j.value("ratios", std::vector<double>{0.6, 0.2, 0.2});
                if (ratios.size() != 3) throw ConfigError("ratios: expected [train, val, test]");
                mc.ratios = {ratios[0], ratios[1], ratios[2]};
                mc.seed = j.value("seed", std::uint64_t{0});
            } catch (const json::exception& e) {
                throw ConfigError(patches_cfg + ": " + e.what());
            }
            if (g.seed) mc.seed = *g.seed;
            fs::create_directories(out_dir);
            GridStack stack = load_sources(sources, out_dir);
            const PatchManifest m = build_manifest(area, sources, stack, mc);
            write_manifest(m, patches_out);
            say(g, "records: " + std::to_string(m.records.size()));
        } else if (*train_cmd) {
            TrainConfig tc = read_train_config(train_cfg);
            if (g.seed) tc.seed = *g.seed;
            if (!train_out.empty()) tc.out_dir = train_out;
            if (tc.out_dir.empty()) throw ConfigError("train: no out_dir in the config and no --out given");
            const auto result = train(tc, [&](const HistoryRow& r, Model<float>&) {
                say(g, "epoch " + std::to_string(r.epoch) + " train_loss " + format_number(r.train_loss) +
                           " val_miou " + format_number(r.val_miou));
                return true;
            });
            say(g, "epochs: " + std::to_string(result.history.size()));
        } else if (*eval_cmd) {
            EvalOptions opts;
            opts.n = eval_n;
            opts.tau = eval_tau;
            opts.boundary_d = boundary_d_from(eval_d);
            if (g.seed) opts.seed = *g.seed;
            const Checkpoint ckpt = load_checkpoint(eval_ckpt);
            const PatchDataset ds = PatchDataset::open(eval_manifest);
            const EvalRow row = evaluate(ckpt, ds, parse_split(eval_split), opts);
            write_eval_csv(std::span<const EvalRow>(&row, 1), eval_out);
            std::cout << "mIoU " << format_number(row.miou) << " mBoundary-IoU " << format_number(row.mboundary_iou)
                      << " n " << row.n_samples << '\n';
        } else if (*cross_cmd) {
            const fs::path base = fs::path(cross_cfg).parent_path();
            const json j = read_json(cross_cfg);
            std::map<std::string, PatchDataset> datasets;
            std::vector<Checkpoint> ckpts;
            std::vector<TrainedArea> trained;
            std::vector<TestArea> tests;
            EvalOptions opts;
            Split split = Split::test;
            try {
                for (const auto& [name, path] : j.at("areas").items()) {
                    datasets.emplace(name, PatchDataset::open(resolve(base, path.get<std::string>())));
                }
                const auto& tr = j.at("trained");
                ckpts.reserve(tr.size());
                for (const auto& t : tr) ckpts.push_back(load_checkpoint(resolve(base, t.at("checkpoint").get<std::string>())));
                for (std::size_t i = 0; i < tr.size(); ++i) {
                    trained.push_back({tr[i].at("name").get<std::string>(), &ckpts[i], tr[i].value("loss", std::string())});
                }
                for (const auto& t : j.at("tests")) {
                    const auto names = t.is_string() ? std::vector<std::string>{t.get<std::string>()}
                                                     : t.get<std::vector<std::string>>();
                    TestArea area{area_set_name(names), {}};
                    for (const auto& n : names) {
                        auto it = datasets.find(n);
                        if (it == datasets.end()) throw ConfigError("tests: unknown area '" + n + "'");
                        area.parts.push_back(&it->second);
                    }
                    tests.push_back(std::move(area));
                }
                opts.n = j.value("n", opts.n);
                opts.tau = j.value("tau", opts.tau);
                if (j.contains("d") && j.at("d").is_number_integer()) opts.boundary_d = j.at("d").get<int>();
                opts.seed = j.value("seed", std::uint64_t{0});
                split = parse_split(j.value("split", std::string("test")));
            } catch (const json::exception& e) {
                throw ConfigError(cross_cfg + ": " + e.what());
            }
            if (g.seed) opts.seed = *g.seed;
            const auto rows = cross_evaluate(trained, tests, split, opts);
            write_eval_csv(rows, cross_out);
            say(g, "rows: " + std::to_string(rows.size()));
        } else if (*cx_cmd) {
            std::vector<PatchDataset> datasets;
            for (const auto& m : cx_manifests) datasets.push_back(PatchDataset::open(m));
            std::vector<const PatchDataset*> ptrs;
            for (const auto& d : datasets) ptrs.push_back(&d);
            const ComplexityOptions options;
            const auto report = area_report(ptrs, options);
            const fs::path dir = fs::absolute(cx_out).parent_path();
            fs::create_directories(dir);
            write_complexity_csv(report.rows, cx_out);
            write_complexity_histogram(report.rows, options, dir / "histogram.csv");
            std::ofstream(dir / "summary.json", std::ios::trunc) << to_json(report.summaries).dump(2) << '\n';
            for (const auto& s : report.summaries) {
                std::cout << s.area << ": entropy mean " << format_number(s.entropy_mean) << " var "
                          << format_number(s.entropy_var) << ", homogeneity mean " << format_number(s.homogeneity_mean)
                          << " var " << format_number(s.homogeneity_var) << '\n';
            }
        } else if (*synth_cmd) {
            const auto area = synth_dataset(g.seed.value_or(0), synth_n, synth_size, synth_out, synth_opts);
            say(g, "extent " + std::to_string(area.spec.width) + "x" + std::to_string(area.spec.height) + ", roads " +
                       std::to_string(area.roads.size()) + ", points " + std::to_string(area.points.size()));
        } else if (*report_cmd) {
            std::vector<EvalRow> rows;
            for (const auto& p : report_rows) {
                const auto r = read_eval_csv(p);
                rows.insert(rows.end(), r.begin(), r.end());
            }
            std::vector<Benchmark> bench;
            if (!report_bench.empty()) bench = benchmarks_from_json(read_json(report_bench));
            const Report report = emit_report(rows, {}, bench);
            write_report(report, report_out);
            std::cout << report.markdown;
        } else if (*run_cmd) {
            ExperimentConfig cfg = read_experiment_config(run_cfg);
            if (g.seed) {
                cfg.seed = *g.seed;
                cfg.train.seed = *g.seed;
                cfg.patches.seed = *g.seed;
                cfg.eval.seed = *g.seed;
            }
            const auto status = run_pipeline(cfg, [&](const std::string& m) { say(g, m); });
            for (const auto& s : status) std::cout << s.name << ": " << (s.cached ? "cached" : "ran") << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
