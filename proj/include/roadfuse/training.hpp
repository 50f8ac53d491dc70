#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadfuse/losses.hpp"
#include "roadfuse/metrics.hpp"
#include "roadfuse/models.hpp"
#include "roadfuse/patches.hpp"

namespace roadfuse {

struct AdamHyper {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-7;
};

template <class T>
struct AdamState {
    std::uint64_t step = 0;
    std::map<std::string, Tensor<T>> m;
    std::map<std::string, Tensor<T>> v;
};

/**
 * One Adam step with bias correction over every trainable parameter:
 *   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2,
 *   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
 * Throws NumericError naming the first parameter with a non-finite gradient
 * before anything is modified.
 */
template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const AdamHyper& hyper);

struct TrainConfig {
    AdamHyper adam;
    int batch_size = 4;
    int epochs = 80;
    int batches_per_epoch = 500;
    int val_batches = 200;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::mse;
    ModelSpec model;
    std::vector<std::string> manifests;  // one per training area
    std::string out_dir;                 // where final/best checkpoints and history go (optional)
};

nlohmann::json to_json(const TrainConfig& config);
// Paths in "manifests"/"out_dir" are resolved against base_dir when relative.
TrainConfig train_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
TrainConfig read_train_config(const std::filesystem::path& path);

// Batch size / epochs / batches per epoch used by the reported experiments.
struct RegimePreset {
    Backbone backbone;
    FusionStage stage;  // late1 and late2 share one row per backbone
    int batch_size;
    int epochs;
    int batches_per_epoch;
};
const std::vector<RegimePreset>& regime_presets();
// Applies the preset for (backbone, stage); the baseline (none) uses the early-fusion row.
void apply_regime_preset(TrainConfig& config);

struct Checkpoint {
    ModelSpec model;
    ParamStore<float> params;
    AdamState<float> adam;
    nlohmann::json config;  // echo of the training configuration
    std::string rng_state;
    int epoch = 0;

    Model<float> make_model() const { return Model<float>(model, params); }
};

// "CKPT1\n", one-line JSON index (tensor name, shape, byte offset), "\n", then
// little-endian float32 arrays.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct HistoryRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_miou = 0.0;
    double wall_time = 0.0;  // seconds; not part of the deterministic history file
};

using History = std::vector<HistoryRow>;

// Deterministic columns only (epoch, train_loss, val_loss, val_miou).
void write_history_csv(const History& history, const std::filesystem::path& path);
// Per-epoch wall time, kept apart so the history file stays reproducible.
void write_timings_csv(const History& history, const std::filesystem::path& path);

struct Batch {
    Tensor<float> satellite;
    Tensor<float> gps;
    Tensor<float> label;
};

// Reference to one patch in one of several datasets.
struct PatchRef {
    const PatchDataset* dataset = nullptr;
    const PatchRecord* record = nullptr;
};

std::vector<PatchRef> collect(const std::vector<PatchDataset>& datasets, Split split);
Batch assemble(std::span<const PatchRef> refs);

struct TrainResult {
    Checkpoint final_state;
    Checkpoint best_state;  // highest validation mIoU (earliest on ties)
    History history;
};

// Called after every epoch; returning false stops training after that epoch.
using EpochObserver = std::function<bool(const HistoryRow&, Model<float>&)>;

TrainResult train(const TrainConfig& config, const std::vector<PatchDataset>& datasets,
                  const EpochObserver& observer = {});
// Opens config.manifests, trains, and writes outputs under config.out_dir when set.
TrainResult train(const TrainConfig& config, const EpochObserver& observer = {});

using Predictor = std::function<Tensor<float>(const Sample&)>;

Predictor model_predictor(Model<float>& model);

struct EvalOptions {
    std::size_t n = 1000;
    double tau = kDefaultThreshold;
    int boundary_d = 0;  // 0 = default_boundary_distance of the patch
    std::uint64_t seed = 0;
};

struct EvalScores {
    double miou = 0.0;
    double mboundary_iou = 0.0;
    std::size_t n = 0;
    int boundary_d = 0;
};

// Mean IoU / Boundary-IoU over the given patches.
EvalScores score(const Predictor& predict, std::span<const PatchRef> refs, const EvalOptions& options);

// Seeded draw of min(n, available) refs without replacement.
std::vector<PatchRef> sample_refs(std::vector<PatchRef> refs, std::size_t n, std::uint64_t seed);

EvalRow evaluate(const Checkpoint& checkpoint, const PatchDataset& dataset, Split split, const EvalOptions& options);

// A named test set: one area, or a 50/50 mix of two areas.
struct TestArea {
    std::string name;
    std::vector<const PatchDataset*> parts;  // 1 or 2 datasets
};

// floor(n/2) patches from the first part and ceil(n/2) from the second.
std::vector<PatchRef> compose_test_set(const TestArea& area, Split split, std::size_t n, std::uint64_t seed);

struct TrainedArea {
    std::string name;
    const Checkpoint* checkpoint = nullptr;
    std::string loss;
};

// Full train-area x test-area matrix, train-major.
std::vector<EvalRow> cross_evaluate(const std::vector<TrainedArea>& trained, const std::vector<TestArea>& tests,
                                    Split split, const EvalOptions& options);

}  // namespace roadfuse
