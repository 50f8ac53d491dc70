#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include "roadfuse/grid.hpp"
#include "roadfuse/ingest.hpp"
#include "roadfuse/patches.hpp"
#include "roadfuse/synth.hpp"
#include "roadfuse/tensor.hpp"

namespace roadfuse::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "roadfuse") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

template <class T>
Tensor<T> random_tensor(Shape4 shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
    return t;
}

// Aligned, normalized stack of a synthetic area: 4 satellite bands, gps, labels.
inline GridStack toy_stack(const SynthArea& area) {
    GridStack stack;
    for (std::size_t b = 0; b < area.satellite.size(); ++b) {
        stack.push_back(normalize_minmax(area.satellite[b]).grid, "sat" + std::to_string(b));
    }
    stack.push_back(normalize_gps(rasterize_gps(area.points, area.spec).grid), "gps");
    stack.push_back(area.labels, "labels");
    return stack;
}

inline PatchDataset toy_dataset(const std::string& name, std::uint64_t seed, int n_base, int size,
                                const SynthOptions& options = {}, std::vector<int> angles = {0, 90, 180, 270}) {
    const SynthArea area = synth_area(seed, n_base, size, options);
    GridStack stack = toy_stack(area);
    ManifestConfig cfg;
    cfg.patch_size = size;
    cfg.overlap = options.overlap;
    cfg.angles = std::move(angles);
    cfg.seed = seed;
    const PatchSources sources{{"sat_b0.grd", "sat_b1.grd", "sat_b2.grd", "sat_b3.grd"}, "gps.grd", "labels.grd"};
    PatchManifest manifest = build_manifest(name, sources, stack, cfg);
    return PatchDataset(std::move(manifest), std::move(stack));
}

}  // namespace roadfuse::test
