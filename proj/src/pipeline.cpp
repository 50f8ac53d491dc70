#include "roadfuse/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "roadfuse/complexity.hpp"
#include "roadfuse/error.hpp"
#include "roadfuse/ingest.hpp"

namespace roadfuse {

namespace fs = std::filesystem;
using nlohmann::json;

std::string content_hash(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return content_hash(ss.str());
}

std::string area_set_name(const std::vector<std::string>& areas) {
    std::string out;
    for (const auto& a : areas) out += (out.empty() ? "" : "+") + a;
    return out;
}

namespace {

// Field accessors that name the full path of whatever is missing or mistyped.
const json& field(const json& j, const std::string& name, const std::string& where) {
    const std::string path = where.empty() ? name : where + "." + name;
    if (!j.is_object() || !j.contains(name)) throw ConfigError(path + ": missing required field");
    return j.at(name);
}

template <class T>
T get_as(const json& j, const std::string& path) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + ": wrong type (" + std::string(j.type_name()) + ")");
    }
}

template <class T>
T optional_field(const json& j, const std::string& name, const std::string& where, T fallback) {
    if (!j.is_object() || !j.contains(name)) return fallback;
    return get_as<T>(j.at(name), where.empty() ? name : where + "." + name);
}

std::string resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return (path.is_absolute() || base.empty() ? path : base / path).lexically_normal().string();
}

AreaConfig parse_area(const json& j, const std::string& where, const fs::path& base) {
    AreaConfig a;
    a.name = get_as<std::string>(field(j, "name", where), where + ".name");
    if (a.name.empty() || a.name.find_first_of("+/,") != std::string::npos) {
        throw ConfigError(where + ".name: must be non-empty without '+', '/' or ','");
    }
    json doc = j;
    fs::path doc_base = base;
    if (j.contains("source")) {
        const fs::path src = resolve(base, get_as<std::string>(j.at("source"), where + ".source"));
        std::ifstream in(src);
        if (!in) throw ConfigError(where + ".source: cannot open " + src.string());
        try {
            in >> doc;
        } catch (const json::exception& e) {
            throw ConfigError(where + ".source: " + e.what());
        }
        doc_base = src.parent_path();
    }
    for (const auto& s : get_as<std::vector<std::string>>(field(doc, "satellite", where), where + ".satellite")) {
        a.satellite.push_back(resolve(doc_base, s));
    }
    if (a.satellite.size() != static_cast<std::size_t>(kSatelliteBands)) {
        throw ConfigError(where + ".satellite: expected " + std::to_string(kSatelliteBands) + " band files");
    }
    a.gps = resolve(doc_base, get_as<std::string>(field(doc, "gps", where), where + ".gps"));
    a.labels = resolve(doc_base, get_as<std::string>(field(doc, "labels", where), where + ".labels"));
    a.spec = resolve(doc_base, get_as<std::string>(field(doc, "spec", where), where + ".spec"));
    return a;
}

std::vector<std::vector<std::string>> parse_sets(const json& j, const std::string& where,
                                                 const std::vector<AreaConfig>& areas, std::size_t max_parts) {
    std::vector<std::vector<std::string>> sets;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string path = where + "[" + std::to_string(i) + "]";
        const auto names = j[i].is_string() ? std::vector<std::string>{j[i].get<std::string>()}
                                            : get_as<std::vector<std::string>>(j[i], path);
        if (names.empty() || names.size() > max_parts) {
            throw ConfigError(path + ": expected 1.." + std::to_string(max_parts) + " area names");
        }
        for (const auto& n : names) {
            if (std::none_of(areas.begin(), areas.end(), [&](const AreaConfig& a) { return a.name == n; })) {
                throw ConfigError(path + ": unknown area '" + n + "'");
            }
        }
        sets.push_back(names);
    }
    return sets;
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    ExperimentConfig c;
    c.seed = optional_field<std::uint64_t>(j, "seed", "", 0);
    c.work_dir = resolve(base_dir, optional_field<std::string>(j, "work_dir", "", "work"));

    const json& areas = field(j, "areas", "");
    if (!areas.is_array() || areas.empty()) throw ConfigError("areas: expected a non-empty array");
    for (std::size_t i = 0; i < areas.size(); ++i) {
        c.areas.push_back(parse_area(areas[i], "areas[" + std::to_string(i) + "]", base_dir));
        for (std::size_t k = 0; k < i; ++k) {
            if (c.areas[k].name == c.areas[i].name) throw ConfigError("areas: duplicate name '" + c.areas[i].name + "'");
        }
    }

    const json prep = j.value("prep", json::object());
    c.prep.upscale_factor = optional_field<int>(prep, "upscale_factor", "prep", 4);
    c.prep.lo_pct = optional_field<double>(prep, "lo_pct", "prep", 2.0);
    c.prep.hi_pct = optional_field<double>(prep, "hi_pct", "prep", 98.0);
    c.prep.gps_clip_pct = optional_field<double>(prep, "gps_clip_pct", "prep", 99.0);
    c.prep.skip_bad = optional_field<bool>(prep, "skip_bad", "prep", false);
    if (c.prep.upscale_factor < 1) throw ConfigError("prep.upscale_factor: must be >= 1");
    if (!(c.prep.lo_pct >= 0 && c.prep.lo_pct < c.prep.hi_pct && c.prep.hi_pct <= 100)) {
        throw ConfigError("prep: need 0 <= lo_pct < hi_pct <= 100");
    }

    const json patches = j.value("patches", json::object());
    c.patches.patch_size = optional_field<int>(patches, "size", "patches", 512);
    c.patches.overlap = optional_field<double>(patches, "overlap", "patches", 0.2);
    c.patches.angles = optional_field<std::vector<int>>(patches, "angles", "patches", c.patches.angles);
    const auto ratios = optional_field<std::vector<double>>(patches, "ratios", "patches", {0.6, 0.2, 0.2});
    if (ratios.size() != 3) throw ConfigError("patches.ratios: expected [train, val, test]");
    c.patches.ratios = {ratios[0], ratios[1], ratios[2]};
    c.patches.seed = optional_field<std::uint64_t>(patches, "seed", "patches", c.seed);

    try {
        if (j.contains("models")) {
            for (const auto& m : j.at("models")) c.models.push_back(model_spec_from_json(m));
        } else {
            c.models.push_back(model_spec_from_json(field(j, "model", "")));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("models: ") + e.what());
    }
    if (c.models.empty()) throw ConfigError("models: expected at least one model");

    if (j.contains("losses")) {
        c.losses.clear();
        for (const auto& l : get_as<std::vector<std::string>>(j.at("losses"), "losses")) c.losses.push_back(parse_loss(l));
        if (c.losses.empty()) throw ConfigError("losses: expected at least one loss");
    } else if (j.contains("loss")) {
        c.losses = {parse_loss(get_as<std::string>(j.at("loss"), "loss"))};
    }

    json train = j.value("train", json::object());
    c.train_preset = optional_field<bool>(train, "preset", "train", false);
    train["model"] = to_json(c.models.front());
    train.erase("manifests");
    train.erase("out_dir");
    train.erase("preset");
    if (!train.contains("seed")) train["seed"] = c.seed;
    c.train = train_config_from_json(train);

    const json eval = j.value("eval", json::object());
    c.eval.n = optional_field<std::size_t>(eval, "n", "eval", 1000);
    c.eval.tau = optional_field<double>(eval, "tau", "eval", kDefaultThreshold);
    c.eval.seed = optional_field<std::uint64_t>(eval, "seed", "eval", c.seed);
    if (eval.contains("d") && !(eval.at("d").is_string() && eval.at("d").get<std::string>() == "auto")) {
        c.eval.boundary_d = get_as<int>(eval.at("d"), "eval.d");
        if (c.eval.boundary_d < 1) throw ConfigError("eval.d: must be >= 1 or \"auto\"");
    }
    c.eval_split = parse_split(optional_field<std::string>(eval, "split", "eval", "test"));
    const auto which = optional_field<std::string>(eval, "checkpoint", "eval", "best");
    if (which != "best" && which != "final") throw ConfigError("eval.checkpoint: expected \"best\" or \"final\"");
    c.eval_best = which == "best";

    const json cross = j.value("cross", json::object());
    if (cross.contains("train")) c.train_sets = parse_sets(cross.at("train"), "cross.train", c.areas, c.areas.size());
    if (cross.contains("test")) c.test_sets = parse_sets(cross.at("test"), "cross.test", c.areas, 2);
    if (c.train_sets.empty()) {
        for (const auto& a : c.areas) c.train_sets.push_back({a.name});
    }
    if (c.test_sets.empty()) {
        for (const auto& a : c.areas) c.test_sets.push_back({a.name});
    }
    if (j.contains("benchmarks")) c.benchmarks = benchmarks_from_json(j.at("benchmarks"));
    c.complexity = optional_field<bool>(j, "complexity", "", false);
    return c;
}

ExperimentConfig read_experiment_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open experiment config " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j, path.parent_path());
}

namespace {

class StageRunner {
public:
    StageRunner(const fs::path& work_dir, const PipelineLog& log) : cache_dir_(work_dir / ".cache"), log_(log) {
        fs::create_directories(cache_dir_);
    }

    // Runs body unless the stored key matches and every output exists.
    void run(const std::string& name, const std::string& key, const std::vector<fs::path>& outputs,
             const std::function<void()>& body) {
        const fs::path stamp = cache_dir_ / (content_hash(name) + ".key");
        bool cached = fs::exists(stamp);
        if (cached) {
            std::ifstream in(stamp);
            std::string stored;
            std::getline(in, stored);
            cached = stored == key;
        }
        cached = cached && std::all_of(outputs.begin(), outputs.end(), [](const fs::path& p) { return fs::exists(p); });
        if (!cached) {
            fs::remove(stamp);
            try {
                body();
            } catch (const ConfigError& e) {
                throw ConfigError("stage " + name + ": " + e.what());
            } catch (const NumericError& e) {
                throw NumericError("stage " + name + ": " + e.what());
            } catch (const Error& e) {
                throw DataError("stage " + name + ": " + e.what());
            } catch (const std::exception& e) {
                throw DataError("stage " + name + ": " + e.what());
            }
            std::ofstream(stamp, std::ios::trunc) << key << '\n';
        }
        status_.push_back({name, cached});
        if (log_) log_("stage " + name + ": " + (cached ? "cached" : "ran"));
    }

    std::vector<StageStatus> status() && { return std::move(status_); }

private:
    fs::path cache_dir_;
    PipelineLog log_;
    std::vector<StageStatus> status_;
};

std::string key_of(std::initializer_list<std::string> parts) {
    std::string all;
    for (const auto& p : parts) all += p + '\x1f';
    return content_hash(all);
}

std::string run_dir_name(const std::string& train_set, const ModelSpec& m, LossKind loss) {
    std::string label = m.label();
    std::replace(label.begin(), label.end(), '/', '-');
    return train_set + "__" + label + "__" + to_string(loss);
}

}  // namespace

std::vector<StageStatus> run_pipeline(const ExperimentConfig& config, const PipelineLog& log) {
    fs::create_directories(config.work_dir);
    StageRunner runner(config.work_dir, log);
    std::map<std::string, std::string> manifest_key;
    std::map<std::string, fs::path> manifest_path;

    for (const auto& area : config.areas) {
        const fs::path dir = config.work_dir / "areas" / area.name;
        const json prep_params = {{"factor", config.prep.upscale_factor},
                                  {"lo", config.prep.lo_pct},
                                  {"hi", config.prep.hi_pct},
                                  {"clip", config.prep.gps_clip_pct},
                                  {"skip_bad", config.prep.skip_bad}};
        const std::string spec_hash = file_hash(area.spec);

        const std::string ingest_key =
            key_of({"ingest", spec_hash, file_hash(area.gps), file_hash(area.labels), prep_params.dump()});
        runner.run("ingest:" + area.name, ingest_key, {dir / "gps.grd", dir / "labels.grd"}, [&] {
            fs::create_directories(dir);
            const GridSpec spec = read_grid_spec(area.spec);
            std::ifstream gps_in(area.gps);
            if (!gps_in) throw DataError("cannot open " + area.gps);
            const GpsRaster raster = rasterize_gps_csv(gps_in, spec, config.prep.skip_bad);
            write_grd(normalize_gps(raster.grid, config.prep.gps_clip_pct), dir / "gps.grd");
            std::ifstream roads_in(area.labels);
            if (!roads_in) throw DataError("cannot open " + area.labels);
            write_grd(rasterize_labels(read_roads_csv(roads_in), spec), dir / "labels.grd");
        });

        std::string prep_inputs;
        for (const auto& s : area.satellite) prep_inputs += file_hash(s);
        const std::string prep_key = key_of({"prep", spec_hash, prep_inputs, prep_params.dump()});
        std::vector<fs::path> sat_out;
        std::vector<std::string> sat_names;
        for (std::size_t b = 0; b < area.satellite.size(); ++b) {
            sat_names.push_back("sat_b" + std::to_string(b) + ".grd");
            sat_out.push_back(dir / sat_names.back());
        }
        runner.run("prep:" + area.name, prep_key, sat_out, [&] {
            fs::create_directories(dir);
            const GridSpec spec = read_grid_spec(area.spec);
            for (std::size_t b = 0; b < area.satellite.size(); ++b) {
                RasterGrid band = upscale_cubic(read_grd(area.satellite[b]), config.prep.upscale_factor);
                if (grid_spec_of(band) != spec) {
                    throw DataError(area.satellite[b] + ": upscaled band does not match the target grid spec");
                }
                const auto norm = normalize_minmax(band, config.prep.lo_pct, config.prep.hi_pct);
                if (norm.degenerate && log) log("warning: " + area.satellite[b] + " is constant after clipping");
                write_grd(norm.grid, sat_out[b]);
            }
        });

        const json patch_params = {{"size", config.patches.patch_size},
                                   {"overlap", config.patches.overlap},
                                   {"angles", config.patches.angles},
                                   {"ratios", config.patches.ratios},
                                   {"seed", config.patches.seed}};
        const std::string patches_key = key_of({"patches", area.name, ingest_key, prep_key, patch_params.dump()});
        manifest_path[area.name] = dir / "manifest.json";
        manifest_key[area.name] = patches_key;
        runner.run("patches:" + area.name, patches_key, {dir / "manifest.json"}, [&] {
            const PatchSources sources{sat_names, "gps.grd", "labels.grd"};
            GridStack stack = load_sources(sources, dir);
            const PatchManifest m = build_manifest(area.name, sources, stack, config.patches);
            write_manifest(m, dir / "manifest.json");
        });
    }

    struct Run {
        std::string train_set;
        ModelSpec model;
        LossKind loss;
        fs::path dir;
        std::string key;
    };
    std::vector<Run> runs;
    for (const auto& set : config.train_sets) {
        const std::string set_name = area_set_name(set);
        for (const auto& model : config.models) {
            for (LossKind loss : config.losses) {
                TrainConfig tc = config.train;
                tc.model = model;
                tc.loss = loss;
                if (config.train_preset) apply_regime_preset(tc);
                std::string inputs;
                for (const auto& a : set) {
                    tc.manifests.push_back(manifest_path.at(a).string());
                    inputs += manifest_key.at(a);
                }
                Run run{set_name, model, loss, config.work_dir / "runs" / run_dir_name(set_name, model, loss), ""};
                json params = to_json(tc);
                params.erase("manifests");
                run.key = key_of({"train", inputs, params.dump()});
                tc.out_dir = run.dir.string();
                runner.run("train:" + run.dir.filename().string(), run.key,
                           {run.dir / "final.ckpt", run.dir / "best.ckpt", run.dir / "history.csv"},
                           [&] { train(tc); });
                runs.push_back(std::move(run));
            }
        }
    }

    std::string eval_inputs;
    for (const auto& r : runs) eval_inputs += r.key;
    for (const auto& [name, key] : manifest_key) eval_inputs += name + key;
    json test_sets = config.test_sets;
    const json eval_params = {{"n", config.eval.n},          {"tau", config.eval.tau},
                              {"d", config.eval.boundary_d}, {"seed", config.eval.seed},
                              {"split", to_string(config.eval_split)}, {"best", config.eval_best},
                              {"tests", test_sets}};
    const std::string eval_key = key_of({"eval", eval_inputs, eval_params.dump()});
    const fs::path matrix = config.work_dir / "matrix.csv";
    runner.run("eval", eval_key, {matrix}, [&] {
        std::map<std::string, PatchDataset> datasets;
        for (const auto& [name, path] : manifest_path) datasets.emplace(name, PatchDataset::open(path));
        std::vector<Checkpoint> ckpts;
        ckpts.reserve(runs.size());
        for (const auto& r : runs) ckpts.push_back(load_checkpoint(r.dir / (config.eval_best ? "best.ckpt" : "final.ckpt")));
        std::vector<TrainedArea> trained;
        for (std::size_t i = 0; i < runs.size(); ++i) trained.push_back({runs[i].train_set, &ckpts[i], to_string(runs[i].loss)});
        std::vector<TestArea> tests;
        for (const auto& set : config.test_sets) {
            TestArea t{area_set_name(set), {}};
            for (const auto& a : set) t.parts.push_back(&datasets.at(a));
            tests.push_back(std::move(t));
        }
        write_eval_csv(cross_evaluate(trained, tests, config.eval_split, config.eval), matrix);
    });

    json bench = json::array();
    for (const auto& b : config.benchmarks) bench.push_back({b.label, b.iou, b.boundary_iou, b.source});
    const std::string report_key = key_of({"report", eval_key, bench.dump()});
    runner.run("report", report_key, {config.work_dir / "report.csv", config.work_dir / "report.md"}, [&] {
        const auto rows = read_eval_csv(matrix);
        write_report(emit_report(rows, {}, config.benchmarks), config.work_dir);
    });

    if (config.complexity) {
        std::string inputs;
        for (const auto& [name, key] : manifest_key) inputs += name + key;
        const fs::path cdir = config.work_dir / "complexity";
        runner.run("complexity", key_of({"complexity", inputs}),
                   {cdir / "complexity.csv", cdir / "histogram.csv", cdir / "summary.json"}, [&] {
                       fs::create_directories(cdir);
                       std::vector<PatchDataset> datasets;
                       for (const auto& area : config.areas) datasets.push_back(PatchDataset::open(manifest_path.at(area.name)));
                       std::vector<const PatchDataset*> ptrs;
                       for (const auto& d : datasets) ptrs.push_back(&d);
                       const ComplexityOptions options;
                       const auto report = area_report(ptrs, options);
                       write_complexity_csv(report.rows, cdir / "complexity.csv");
                       write_complexity_histogram(report.rows, options, cdir / "histogram.csv");
                       std::ofstream(cdir / "summary.json", std::ios::trunc) << to_json(report.summaries).dump(2) << '\n';
                   });
    }
    return std::move(runner).status();
}

}  // namespace roadfuse
