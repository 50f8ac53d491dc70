#include "roadfuse/patches.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "roadfuse/error.hpp"

namespace roadfuse {

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "'");
}

std::vector<const PatchRecord*> PatchManifest::split(Split s) const {
    std::vector<const PatchRecord*> out;
    for (const auto& r : records) {
        if (r.split == s) out.push_back(&r);
    }
    return out;
}

namespace {

std::vector<int> axis_positions(int extent, int size, int stride) {
    std::vector<int> pos;
    for (int p = 0; p + size <= extent; p += stride) pos.push_back(p);
    if (pos.back() + size < extent) pos.push_back(extent - size);
    pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    return pos;
}

bool is_axis_aligned(int angle) { return angle % 90 == 0; }

void check_angle(int angle) {
    if (angle < 0 || angle >= 360 || angle % 45 != 0) {
        throw ConfigError("rotation angle must be a multiple of 45 in [0, 315], got " + std::to_string(angle));
    }
}

double bilinear(const RasterGrid& g, double sx, double sy) {
    const int c0 = static_cast<int>(std::floor(sx));
    const int r0 = static_cast<int>(std::floor(sy));
    const double fx = sx - c0, fy = sy - r0;
    auto at = [&](int c, int r) {
        return static_cast<double>(g.at(std::clamp(c, 0, g.width() - 1), std::clamp(r, 0, g.height() - 1)));
    };
    const double top = at(c0, r0) * (1.0 - fx) + at(c0 + 1, r0) * fx;
    const double bottom = at(c0, r0 + 1) * (1.0 - fx) + at(c0 + 1, r0 + 1) * fx;
    return top * (1.0 - fy) + bottom * fy;
}

}  // namespace

std::vector<Window> generate_windows(int extent_width, int extent_height, int size, double overlap) {
    if (size <= 0) throw ConfigError("patch size must be positive");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("overlap must lie in [0, 1)");
    if (extent_width < size || extent_height < size) {
        throw DataError("extent " + std::to_string(extent_width) + "x" + std::to_string(extent_height) +
                        " is smaller than the patch size " + std::to_string(size));
    }
    const int stride = std::max(1, static_cast<int>(std::lround(size * (1.0 - overlap))));
    const auto cols = axis_positions(extent_width, size, stride);
    const auto rows = axis_positions(extent_height, size, stride);
    std::vector<Window> out;
    out.reserve(cols.size() * rows.size());
    for (int r : rows) {
        for (int c : cols) out.push_back({c, r, size});
    }
    return out;
}

std::vector<Window> generate_windows(const GridSpec& extent, int size, double overlap) {
    return generate_windows(extent.width, extent.height, size, overlap);
}

int rotation_support(int size) { return static_cast<int>(std::ceil(size * std::sqrt(2.0))); }

bool support_inside(const Window& w, int angle, int extent_width, int extent_height) {
    const int margin = is_axis_aligned(angle) ? 0 : (rotation_support(w.size) - w.size + 1) / 2;
    return w.col0 - margin >= 0 && w.row0 - margin >= 0 && w.col0 + w.size + margin <= extent_width &&
           w.row0 + w.size + margin <= extent_height;
}

Tensor<float> extract_rotated_patch(const GridStack& stack, const PatchRecord& record, std::span<const Interp> interp) {
    check_angle(record.angle);
    if (stack.bands() == 0) throw DataError("cannot extract a patch from an empty stack");
    if (interp.size() != stack.bands()) throw ConfigError("need one interpolation mode per band");
    const auto& ref = stack[0];
    const Window& w = record.window;
    if (!support_inside(w, record.angle, ref.width(), ref.height())) {
        throw DataError("patch " + std::to_string(record.patch_id) + " support leaves the source extent");
    }
    const int s = w.size;
    const int bands = static_cast<int>(stack.bands());
    Tensor<float> out(Shape4{1, bands, s, s});

    if (is_axis_aligned(record.angle)) {
        const int quarter = record.angle / 90;
        for (int b = 0; b < bands; ++b) {
            const auto& g = stack[static_cast<std::size_t>(b)];
            for (int i = 0; i < s; ++i) {
                for (int j = 0; j < s; ++j) {
                    int r = i, c = j;
                    switch (quarter) {
                        case 1: r = j; c = s - 1 - i; break;
                        case 2: r = s - 1 - i; c = s - 1 - j; break;
                        case 3: r = s - 1 - j; c = i; break;
                        default: break;
                    }
                    out.at(0, b, i, j) = g.at(w.col0 + c, w.row0 + r);
                }
            }
        }
        return out;
    }

    const double theta = record.angle * std::acos(-1.0) / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    const double cx = w.col0 + s / 2.0, cy = w.row0 + s / 2.0;
    for (int i = 0; i < s; ++i) {
        for (int j = 0; j < s; ++j) {
            const double u = j + 0.5 - s / 2.0, v = i + 0.5 - s / 2.0;
            const double px = cx + cs * u - sn * v;
            const double py = cy + sn * u + cs * v;
            for (int b = 0; b < bands; ++b) {
                const auto& g = stack[static_cast<std::size_t>(b)];
                if (interp[static_cast<std::size_t>(b)] == Interp::nearest) {
                    const int c = std::clamp(static_cast<int>(std::floor(px)), 0, g.width() - 1);
                    const int r = std::clamp(static_cast<int>(std::floor(py)), 0, g.height() - 1);
                    out.at(0, b, i, j) = g.at(c, r);
                } else {
                    out.at(0, b, i, j) = static_cast<float>(bilinear(g, px - 0.5, py - 0.5));
                }
            }
        }
    }
    return out;
}

PatchManifest build_manifest(const std::string& area, const PatchSources& sources, const GridStack& stack,
                             const ManifestConfig& config) {
    if (stack.bands() != sources.satellite.size() + 2) {
        throw DataError("source stack must hold every satellite band plus gps and labels");
    }
    for (int a : config.angles) check_angle(a);
    double total = 0.0;
    for (double r : config.ratios) {
        if (r < 0.0) throw ConfigError("split ratios must be non-negative");
        total += r;
    }
    if (!(total > 0.0)) throw ConfigError("split ratios must not all be zero");

    const auto& ref = stack[0];
    const auto windows = generate_windows(ref.width(), ref.height(), config.patch_size, config.overlap);
    const auto n = windows.size();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(config.ratios[0] / total * static_cast<double>(n)));
    const auto n_val = std::min(n - std::min(n, n_train),
                                static_cast<std::size_t>(std::lround(config.ratios[1] / total * static_cast<double>(n))));
    std::vector<Split> split_of(n, Split::test);
    for (std::size_t k = 0; k < n; ++k) {
        if (k < n_train) {
            split_of[order[k]] = Split::train;
        } else if (k < n_train + n_val) {
            split_of[order[k]] = Split::val;
        } else if (config.ratios[2] == 0.0) {
            split_of[order[k]] = config.ratios[1] > 0.0 ? Split::val : Split::train;
        }
    }

    PatchManifest manifest;
    manifest.sources = sources;
    manifest.seed = config.seed;
    manifest.patch_size = config.patch_size;
    int patch_id = 0;
    for (std::size_t b = 0; b < n; ++b) {
        for (int angle : config.angles) {
            if (!support_inside(windows[b], angle, ref.width(), ref.height())) continue;
            manifest.records.push_back(
                PatchRecord{patch_id++, static_cast<int>(b), windows[b], angle, split_of[b], area});
        }
    }
    return manifest;
}

GridStack load_sources(const PatchSources& sources, const std::filesystem::path& base_dir) {
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };
    if (sources.satellite.empty()) throw DataError("manifest sources list no satellite bands");
    if (sources.gps.empty()) throw DataError("manifest sources are missing the gps grid");
    if (sources.labels.empty()) throw DataError("manifest sources are missing the labels grid");
    GridStack stack;
    for (std::size_t i = 0; i < sources.satellite.size(); ++i) {
        stack.push_back(read_grd(resolve(sources.satellite[i])), "sat" + std::to_string(i));
    }
    stack.push_back(read_grd(resolve(sources.gps)), "gps");
    stack.push_back(read_grd(resolve(sources.labels)), "labels");
    return stack;
}

PatchManifest build_manifest(const std::string& area, const PatchSources& sources, const ManifestConfig& config) {
    return build_manifest(area, sources, load_sources(sources), config);
}

std::string manifest_json(const PatchManifest& m) {
    nlohmann::ordered_json j;
    j["seed"] = m.seed;
    j["patch_size"] = m.patch_size;
    j["sources"] = {{"satellite", m.sources.satellite}, {"gps", m.sources.gps}, {"labels", m.sources.labels}};
    auto records = nlohmann::ordered_json::array();
    for (const auto& r : m.records) {
        records.push_back({{"patch_id", r.patch_id},
                           {"base_id", r.base_id},
                           {"window", {r.window.col0, r.window.row0, r.window.size}},
                           {"angle", r.angle},
                           {"split", to_string(r.split)},
                           {"area", r.area}});
    }
    j["records"] = std::move(records);
    return j.dump(1);
}

void write_manifest(const PatchManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << manifest_json(manifest) << '\n';
}

PatchManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    try {
        nlohmann::json j;
        in >> j;
        PatchManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.patch_size = j.at("patch_size").get<int>();
        const auto& s = j.at("sources");
        m.sources.satellite = s.at("satellite").get<std::vector<std::string>>();
        m.sources.gps = s.at("gps").get<std::string>();
        m.sources.labels = s.at("labels").get<std::string>();
        for (const auto& r : j.at("records")) {
            const auto win = r.at("window").get<std::vector<int>>();
            if (win.size() != 3) throw DataError("manifest window must be [c, r, s]");
            m.records.push_back(PatchRecord{r.at("patch_id").get<int>(), r.at("base_id").get<int>(),
                                            Window{win[0], win[1], win[2]}, r.at("angle").get<int>(),
                                            parse_split(r.at("split").get<std::string>()),
                                            r.at("area").get<std::string>()});
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

PatchDataset::PatchDataset(PatchManifest manifest, GridStack stack)
    : manifest_(std::move(manifest)), stack_(std::move(stack)) {
    if (stack_.bands() != manifest_.sources.satellite.size() + 2) {
        throw DataError("patch dataset stack does not match the manifest sources");
    }
    if (manifest_.sources.satellite.size() != 4) {
        throw DataError("expected 4 satellite bands (RGB-I), manifest lists " +
                        std::to_string(manifest_.sources.satellite.size()));
    }
    interp_.assign(stack_.bands(), Interp::bilinear);
    interp_.back() = Interp::nearest;
}

PatchDataset PatchDataset::open(const std::filesystem::path& manifest_path) {
    PatchManifest m = read_manifest(manifest_path);
    GridStack stack = load_sources(m.sources, manifest_path.parent_path());
    return PatchDataset(std::move(m), std::move(stack));
}

Sample PatchDataset::sample(const PatchRecord& record) const {
    const Tensor<float> all = extract_rotated_patch(stack_, record, interp_);
    const int s = all.h();
    const int bands = all.c();
    Sample out{Tensor<float>(Shape4{1, bands - 2, s, s}), Tensor<float>(Shape4{1, 1, s, s}),
               Tensor<float>(Shape4{1, 1, s, s})};
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    auto src = all.data();
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(plane * (bands - 2)), out.satellite.data().begin());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(plane * (bands - 2)),
              src.begin() + static_cast<std::ptrdiff_t>(plane * (bands - 1)), out.gps.data().begin());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(plane * (bands - 1)), src.end(), out.label.data().begin());
    return out;
}

}  // namespace roadfuse
