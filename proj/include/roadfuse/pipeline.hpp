#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "roadfuse/report.hpp"
#include "roadfuse/training.hpp"

namespace roadfuse {

// Raw inputs of one work area (absolute or config-relative paths, resolved on load).
struct AreaConfig {
    std::string name;
    std::vector<std::string> satellite;  // one .grd per band at the source resolution
    std::string gps;                     // points CSV
    std::string labels;                  // roads CSV
    std::string spec;                    // GridSpec JSON of the target grid
};

struct PrepConfig {
    int upscale_factor = 4;
    double lo_pct = 2.0;
    double hi_pct = 98.0;
    double gps_clip_pct = 99.0;
    bool skip_bad = false;
};

struct ExperimentConfig {
    std::filesystem::path work_dir;
    std::uint64_t seed = 0;
    std::vector<AreaConfig> areas;
    PrepConfig prep;
    ManifestConfig patches;
    std::vector<ModelSpec> models;
    std::vector<LossKind> losses{LossKind::mse};
    TrainConfig train;  // model, loss and manifests are filled per run
    bool train_preset = false;
    EvalOptions eval;
    Split eval_split = Split::test;
    bool eval_best = true;  // evaluate the best-validation weights rather than the final ones
    std::vector<std::vector<std::string>> train_sets;  // area names per training run
    std::vector<std::vector<std::string>> test_sets;   // one or two area names per test set
    std::vector<Benchmark> benchmarks;
    bool complexity = false;
};

// Validates the document; errors name the offending field, e.g. "areas[0].labels".
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig read_experiment_config(const std::filesystem::path& path);

// "A", "A+B", ...
std::string area_set_name(const std::vector<std::string>& areas);

struct StageStatus {
    std::string name;
    bool cached = false;
};

using PipelineLog = std::function<void(const std::string&)>;

/**
 * ingest -> prep -> patches -> train -> eval -> report (and complexity when
 * enabled). Every stage is keyed by a hash of its inputs' contents and its
 * parameters and is skipped when its key and outputs are unchanged.
 * Failures are rethrown with the stage name prefixed.
 */
std::vector<StageStatus> run_pipeline(const ExperimentConfig& config, const PipelineLog& log = {});

// 64-bit FNV-1a, hex encoded.
std::string content_hash(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

}  // namespace roadfuse
