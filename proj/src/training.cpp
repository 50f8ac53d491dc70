#include "roadfuse/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace roadfuse {

template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const AdamHyper& hyper) {
    for (const auto& p : params) {
        if (!p.trainable) continue;
        for (T g : p.grad.data()) {
            if (!std::isfinite(static_cast<double>(g))) {
                throw NumericError("non-finite gradient in parameter '" + p.name + "'");
            }
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    for (auto& p : params) {
        if (!p.trainable) continue;
        auto& m = state.m[p.name];
        auto& v = state.v[p.name];
        if (m.shape() != p.value.shape()) m = Tensor<T>(p.value.shape());
        if (v.shape() != p.value.shape()) v = Tensor<T>(p.value.shape());
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            const double mi = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            const double vi = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double m_hat = static_cast<double>(m[i]) / c1;
            const double v_hat = static_cast<double>(v[i]) / c2;
            p.value[i] = static_cast<T>(p.value[i] - hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps));
        }
    }
}

template void adam_step<float>(ParamStore<float>&, AdamState<float>&, const AdamHyper&);
template void adam_step<double>(ParamStore<double>&, AdamState<double>&, const AdamHyper&);

nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr", c.adam.lr},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"eps", c.adam.eps},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"batches_per_epoch", c.batches_per_epoch},
            {"val_batches", c.val_batches},
            {"seed", c.seed},
            {"loss", to_string(c.loss)},
            {"model", to_json(c.model)},
            {"manifests", c.manifests}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).string();
    };
    try {
        TrainConfig c;
        c.model = model_spec_from_json(j.at("model"));
        if (j.value("preset", false)) apply_regime_preset(c);
        c.adam.lr = j.value("lr", c.adam.lr);
        c.adam.beta1 = j.value("beta1", c.adam.beta1);
        c.adam.beta2 = j.value("beta2", c.adam.beta2);
        c.adam.eps = j.value("eps", c.adam.eps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.batches_per_epoch = j.value("batches_per_epoch", c.batches_per_epoch);
        c.val_batches = j.value("val_batches", c.val_batches);
        c.seed = j.value("seed", c.seed);
        c.loss = parse_loss(j.value("loss", std::string("mse")));
        if (j.contains("manifests")) {
            for (const auto& m : j.at("manifests")) c.manifests.push_back(resolve(m.get<std::string>()));
        }
        if (j.contains("out_dir")) c.out_dir = resolve(j.at("out_dir").get<std::string>());
        if (!(c.adam.lr > 0.0 && c.adam.beta1 > 0.0 && c.adam.beta2 > 0.0 && c.adam.eps > 0.0)) {
            throw ConfigError("Adam hyperparameters must be positive");
        }
        if (c.batch_size < 1 || c.epochs < 0 || c.batches_per_epoch < 1 || c.val_batches < 0) {
            throw ConfigError("batch_size, batches_per_epoch must be >= 1 and epochs, val_batches >= 0");
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
}

TrainConfig read_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open train config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return train_config_from_json(j, path.parent_path());
}

const std::vector<RegimePreset>& regime_presets() {
    static const std::vector<RegimePreset> presets = {
        {Backbone::unet, FusionStage::early, 4, 80, 500},      {Backbone::resunet, FusionStage::early, 4, 80, 500},
        {Backbone::dlinknet, FusionStage::early, 4, 150, 500}, {Backbone::unet, FusionStage::late1, 4, 80, 500},
        {Backbone::resunet, FusionStage::late1, 2, 80, 1000},  {Backbone::dlinknet, FusionStage::late1, 2, 150, 1000},
        {Backbone::unet, FusionStage::late2, 4, 80, 500},      {Backbone::resunet, FusionStage::late2, 2, 80, 1000},
        {Backbone::dlinknet, FusionStage::late2, 2, 150, 1000},
    };
    return presets;
}

void apply_regime_preset(TrainConfig& config) {
    const FusionStage stage =
        config.model.fusion.stage == FusionStage::none ? FusionStage::early : config.model.fusion.stage;
    for (const auto& p : regime_presets()) {
        if (p.backbone == config.model.backbone.kind && p.stage == stage) {
            config.batch_size = p.batch_size;
            config.epochs = p.epochs;
            config.batches_per_epoch = p.batches_per_epoch;
            return;
        }
    }
}

namespace {

constexpr const char* kCkptMagic = "CKPT1";

void write_floats(std::ostream& out, std::span<const float> values) {
    std::vector<std::uint32_t> words(values.size());
    std::memcpy(words.data(), values.data(), values.size() * sizeof(float));
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& w : words) w = ((w & 0xffu) << 24) | ((w & 0xff00u) << 8) | ((w >> 8) & 0xff00u) | (w >> 24);
    }
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
}

std::vector<float> read_floats(std::span<const char> payload, std::size_t offset, std::size_t count) {
    if (offset + count * 4 > payload.size()) throw DataError("checkpoint payload truncated");
    std::vector<std::uint32_t> words(count);
    std::memcpy(words.data(), payload.data() + offset, count * 4);
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& w : words) w = ((w & 0xffu) << 24) | ((w & 0xff00u) << 8) | ((w >> 8) & 0xff00u) | (w >> 24);
    }
    std::vector<float> out(count);
    std::memcpy(out.data(), words.data(), count * 4);
    return out;
}

nlohmann::json shape_json(const Shape4& s) { return {s.n, s.c, s.h, s.w}; }

Shape4 shape_from(const nlohmann::json& j) {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 4) throw DataError("checkpoint shape must have 4 dims");
    return {v[0], v[1], v[2], v[3]};
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    nlohmann::json index;
    index["model"] = to_json(ckpt.model);
    index["config"] = ckpt.config;
    index["epoch"] = ckpt.epoch;
    index["adam_step"] = ckpt.adam.step;
    index["rng"] = ckpt.rng_state;
    auto tensors = nlohmann::json::array();
    std::size_t offset = 0;
    std::vector<const Tensor<float>*> order;
    auto push = [&](const std::string& name, const std::string& kind, const Tensor<float>& t, bool trainable) {
        tensors.push_back({{"name", name},
                           {"kind", kind},
                           {"shape", shape_json(t.shape())},
                           {"offset", offset},
                           {"trainable", trainable}});
        offset += t.size() * 4;
        order.push_back(&t);
    };
    for (const auto& p : ckpt.params) push(p.name, "param", p.value, p.trainable);
    for (const auto& [name, t] : ckpt.adam.m) push(name, "adam_m", t, false);
    for (const auto& [name, t] : ckpt.adam.v) push(name, "adam_v", t, false);
    index["tensors"] = std::move(tensors);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out << kCkptMagic << '\n' << index.dump() << '\n';
    for (const auto* t : order) write_floats(out, t->data());
    if (!out) throw DataError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::string magic, header;
    if (!std::getline(in, magic) || magic != kCkptMagic) throw DataError(path.string() + ": bad magic, expected CKPT1");
    if (!std::getline(in, header)) throw DataError(path.string() + ": missing index");
    std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        const auto index = nlohmann::json::parse(header);
        Checkpoint ckpt;
        ckpt.model = model_spec_from_json(index.at("model"));
        ckpt.config = index.value("config", nlohmann::json::object());
        ckpt.epoch = index.value("epoch", 0);
        ckpt.adam.step = index.value("adam_step", std::uint64_t{0});
        ckpt.rng_state = index.value("rng", std::string());
        for (const auto& t : index.at("tensors")) {
            const Shape4 shape = shape_from(t.at("shape"));
            Tensor<float> value(shape, read_floats(payload, t.at("offset").get<std::size_t>(), shape.count()));
            const auto name = t.at("name").get<std::string>();
            const auto kind = t.at("kind").get<std::string>();
            if (kind == "param") {
                ckpt.params.add(name, std::move(value), t.value("trainable", true));
            } else if (kind == "adam_m") {
                ckpt.adam.m[name] = std::move(value);
            } else if (kind == "adam_v") {
                ckpt.adam.v[name] = std::move(value);
            } else {
                throw DataError("unknown checkpoint tensor kind '" + kind + "'");
            }
        }
        return ckpt;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void write_history_csv(const History& history, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,train_loss,val_loss,val_miou\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.val_loss) << ','
            << format_number(r.val_miou) << '\n';
    }
}

void write_timings_csv(const History& history, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,wall_time_s\n";
    for (const auto& r : history) out << r.epoch << ',' << r.wall_time << '\n';
}

std::vector<PatchRef> collect(const std::vector<PatchDataset>& datasets, Split split) {
    std::vector<PatchRef> refs;
    for (const auto& ds : datasets) {
        for (const auto* r : ds.manifest().split(split)) refs.push_back({&ds, r});
    }
    return refs;
}

Batch assemble(std::span<const PatchRef> refs) {
    if (refs.empty()) throw DataError("cannot assemble an empty batch");
    std::vector<Sample> samples;
    samples.reserve(refs.size());
    for (const auto& ref : refs) samples.push_back(ref.dataset->sample(*ref.record));
    const auto& first = samples.front();
    const int n = static_cast<int>(samples.size());
    const int s = first.satellite.h();
    Batch batch{Tensor<float>(Shape4{n, first.satellite.c(), s, s}), Tensor<float>(Shape4{n, 1, s, s}),
                Tensor<float>(Shape4{n, 1, s, s})};
    for (int i = 0; i < n; ++i) {
        const auto& smp = samples[static_cast<std::size_t>(i)];
        if (smp.satellite.h() != s) throw DataError("batch mixes patch sizes");
        std::copy(smp.satellite.data().begin(), smp.satellite.data().end(), batch.satellite.image(i).begin());
        std::copy(smp.gps.data().begin(), smp.gps.data().end(), batch.gps.image(i).begin());
        std::copy(smp.label.data().begin(), smp.label.data().end(), batch.label.image(i).begin());
    }
    return batch;
}

namespace {

struct StepResult {
    double loss;
    Tensor<float> prediction;
};

StepResult run_batch(Model<float>& model, const Batch& batch, LossKind loss, Mode mode, bool backward) {
    Graph<float> g(mode);
    Var sat = g.input(batch.satellite);
    std::optional<Var> gps;
    if (model.spec().uses_gps()) gps = g.input(batch.gps);
    Var out = model.forward(g, sat, gps);
    LossValue<float> lv = compute_loss(loss, g.value(out), batch.label);
    if (!std::isfinite(lv.value)) throw NumericError("non-finite loss");
    if (backward) g.backward(out, lv.grad);
    return {lv.value, g.value(out)};
}

double batch_miou(const Tensor<float>& pred, const Tensor<float>& label) {
    const auto p = binarize(pred);
    const auto t = binarize(label);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += iou(p[i], t[i]);
    return acc;
}

std::string rng_to_string(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<PatchDataset>& datasets, const EpochObserver& observer) {
    if (datasets.empty()) throw ConfigError("training needs at least one manifest");
    const auto train_refs = collect(datasets, Split::train);
    const auto val_refs = collect(datasets, Split::val);
    if (train_refs.empty()) throw DataError("no training patches in the manifests");
    const int div = 1 << config.model.backbone.depth;
    for (const auto& ds : datasets) {
        if (ds.manifest().patch_size % div != 0) {
            throw ConfigError("patch size " + std::to_string(ds.manifest().patch_size) +
                              " is not divisible by 2^depth = " + std::to_string(div));
        }
    }

    Model<float> model = build_model<float>(config.model, config.seed);
    AdamState<float> adam;
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<std::size_t> pick_train(0, train_refs.size() - 1);

    auto snapshot = [&](int epoch) {
        Checkpoint c;
        c.model = model.spec();
        c.params = model.params();
        c.adam = adam;
        c.config = to_json(config);
        c.rng_state = rng_to_string(rng);
        c.epoch = epoch;
        return c;
    };

    TrainResult result;
    result.best_state = snapshot(0);
    double best_miou = -1.0;
    std::vector<PatchRef> batch_refs(static_cast<std::size_t>(config.batch_size));

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double train_loss = 0.0;
        for (int b = 0; b < config.batches_per_epoch; ++b) {
            for (auto& ref : batch_refs) ref = train_refs[pick_train(rng)];
            const Batch batch = assemble(batch_refs);
            model.params().zero_grad();
            train_loss += run_batch(model, batch, config.loss, Mode::train, true).loss;
            adam_step(model.params(), adam, config.adam);
        }
        train_loss /= config.batches_per_epoch;

        double val_loss = std::numeric_limits<double>::quiet_NaN();
        double val_miou = std::numeric_limits<double>::quiet_NaN();
        if (!val_refs.empty() && config.val_batches > 0) {
            std::uniform_int_distribution<std::size_t> pick_val(0, val_refs.size() - 1);
            double loss_acc = 0.0, iou_acc = 0.0;
            std::size_t samples = 0;
            for (int b = 0; b < config.val_batches; ++b) {
                for (auto& ref : batch_refs) ref = val_refs[pick_val(rng)];
                const Batch batch = assemble(batch_refs);
                const auto r = run_batch(model, batch, config.loss, Mode::eval, false);
                loss_acc += r.loss;
                iou_acc += batch_miou(r.prediction, batch.label);
                samples += batch_refs.size();
            }
            val_loss = loss_acc / config.val_batches;
            val_miou = iou_acc / static_cast<double>(samples);
        }
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const HistoryRow row{epoch, train_loss, val_loss, val_miou, wall};
        result.history.push_back(row);
        if (!std::isnan(val_miou) && val_miou > best_miou) {
            best_miou = val_miou;
            result.best_state = snapshot(epoch);
        }
        if (observer && !observer(row, model)) break;
    }
    result.final_state = snapshot(result.history.empty() ? 0 : result.history.back().epoch);
    if (best_miou < 0.0) result.best_state = result.final_state;
    return result;
}

TrainResult train(const TrainConfig& config, const EpochObserver& observer) {
    std::vector<PatchDataset> datasets;
    for (const auto& m : config.manifests) datasets.push_back(PatchDataset::open(m));
    TrainResult result = train(config, datasets, observer);
    if (!config.out_dir.empty()) {
        std::filesystem::create_directories(config.out_dir);
        const std::filesystem::path dir(config.out_dir);
        save_checkpoint(result.final_state, dir / "final.ckpt");
        save_checkpoint(result.best_state, dir / "best.ckpt");
        write_history_csv(result.history, dir / "history.csv");
        write_timings_csv(result.history, dir / "timings.csv");
    }
    return result;
}

Predictor model_predictor(Model<float>& model) {
    return [&model](const Sample& s) {
        const bool gps = model.spec().uses_gps();
        return model.predict(s.satellite, gps ? &s.gps : nullptr, Mode::eval);
    };
}

EvalScores score(const Predictor& predict, std::span<const PatchRef> refs, const EvalOptions& options) {
    if (refs.empty()) throw DataError("evaluation set is empty");
    std::vector<double> ious, bious;
    int d = options.boundary_d;
    for (const auto& ref : refs) {
        const Sample s = ref.dataset->sample(*ref.record);
        const Tensor<float> prob = predict(s);
        const auto pred = binarize(prob, options.tau);
        const auto gt = binarize(s.label, 0.5);
        if (d <= 0) d = default_boundary_distance(gt[0].width(), gt[0].height());
        ious.push_back(iou(pred[0], gt[0]));
        bious.push_back(boundary_iou(pred[0], gt[0], d));
    }
    return {mean_metric(ious), mean_metric(bious), refs.size(), d};
}

std::vector<PatchRef> sample_refs(std::vector<PatchRef> refs, std::size_t n, std::uint64_t seed) {
    if (n >= refs.size()) return refs;
    std::mt19937_64 rng(seed);
    std::shuffle(refs.begin(), refs.end(), rng);
    refs.resize(n);
    return refs;
}

EvalRow evaluate(const Checkpoint& checkpoint, const PatchDataset& dataset, Split split, const EvalOptions& options) {
    Model<float> model = checkpoint.make_model();
    std::vector<PatchRef> refs;
    for (const auto* r : dataset.manifest().split(split)) refs.push_back({&dataset, r});
    refs = sample_refs(std::move(refs), options.n, options.seed);
    const EvalScores s = score(model_predictor(model), refs, options);
    const std::string area = refs.empty() ? "" : refs.front().record->area;
    EvalRow row;
    row.experiment = checkpoint.model.label() + "/" + area;
    row.train_area = "";
    row.test_area = area;
    row.model = to_string(checkpoint.model.backbone.kind);
    row.stage = to_string(checkpoint.model.fusion.stage);
    row.op = to_string(checkpoint.model.fusion.op);
    row.loss = checkpoint.config.value("loss", std::string());
    row.miou = s.miou;
    row.mboundary_iou = s.mboundary_iou;
    row.n_samples = s.n;
    row.boundary_d = s.boundary_d;
    return row;
}

std::vector<PatchRef> compose_test_set(const TestArea& area, Split split, std::size_t n, std::uint64_t seed) {
    if (area.parts.empty() || area.parts.size() > 2) throw ConfigError("test area needs one or two parts");
    auto refs_of = [&](const PatchDataset* ds) {
        std::vector<PatchRef> refs;
        for (const auto* r : ds->manifest().split(split)) refs.push_back({ds, r});
        return refs;
    };
    if (area.parts.size() == 1) return sample_refs(refs_of(area.parts[0]), n, seed);
    auto first = sample_refs(refs_of(area.parts[0]), n / 2, seed);
    auto second = sample_refs(refs_of(area.parts[1]), n - n / 2, seed + 1);
    first.insert(first.end(), second.begin(), second.end());
    return first;
}

std::vector<EvalRow> cross_evaluate(const std::vector<TrainedArea>& trained, const std::vector<TestArea>& tests,
                                    Split split, const EvalOptions& options) {
    std::vector<EvalRow> rows;
    for (const auto& tr : trained) {
        if (tr.checkpoint == nullptr) throw DataError("missing checkpoint for train area '" + tr.name + "'");
        Model<float> model = tr.checkpoint->make_model();
        const Predictor predict = model_predictor(model);
        for (const auto& te : tests) {
            const auto refs = compose_test_set(te, split, options.n, options.seed);
            const EvalScores s = score(predict, refs, options);
            const ModelSpec& spec = tr.checkpoint->model;
            const std::string loss = tr.loss.empty() ? tr.checkpoint->config.value("loss", std::string()) : tr.loss;
            rows.push_back(EvalRow{spec.label() + "/" + loss + "/train=" + tr.name + "/test=" + te.name, tr.name,
                                   te.name, to_string(spec.backbone.kind), to_string(spec.fusion.stage),
                                   to_string(spec.fusion.op), loss, s.miou, s.mboundary_iou, s.n, s.boundary_d});
        }
    }
    return rows;
}

}  // namespace roadfuse
