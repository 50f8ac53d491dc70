#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "roadfuse/grid.hpp"
#include "roadfuse/ingest.hpp"
#include "roadfuse/tensor.hpp"

namespace roadfuse {

struct Window {
    int col0 = 0;
    int row0 = 0;
    int size = 0;
    bool operator==(const Window&) const = default;
};

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct PatchRecord {
    int patch_id = 0;
    int base_id = 0;
    Window window;
    int angle = 0;  // degrees, multiple of 45 in [0, 315]
    Split split = Split::train;
    std::string area;
    bool operator==(const PatchRecord&) const = default;
};

// Paths of the aligned source grids of one area.
struct PatchSources {
    std::vector<std::string> satellite;
    std::string gps;
    std::string labels;
    bool operator==(const PatchSources&) const = default;
};

struct PatchManifest {
    std::vector<PatchRecord> records;
    PatchSources sources;
    std::uint64_t seed = 0;
    int patch_size = 512;

    std::vector<const PatchRecord*> split(Split s) const;
};

struct ManifestConfig {
    int patch_size = 512;
    double overlap = 0.2;
    std::vector<int> angles{0, 45, 90, 135, 180, 225, 270, 315};
    std::array<double, 3> ratios{0.6, 0.2, 0.2};  // train, val, test over base windows
    std::uint64_t seed = 0;
};

// Regular tiling with stride round(size * (1 - overlap)); the last row and
// column are shifted inward so that windows never leave the extent.
std::vector<Window> generate_windows(int extent_width, int extent_height, int size, double overlap);
std::vector<Window> generate_windows(const GridSpec& extent, int size, double overlap);

// Side of the square support needed to rotate a size x size patch by a diagonal angle.
int rotation_support(int size);
bool support_inside(const Window& w, int angle, int extent_width, int extent_height);

enum class Interp { bilinear, nearest };

/**
 * Samples one rotated patch from every band of the stack (C x size x size,
 * returned as 1 x C x size x size). Multiples of 90 degrees are exact pixel
 * permutations; diagonal angles inverse-map each output pixel center into
 * the source. Rotation is counter-clockwise as displayed.
 */
Tensor<float> extract_rotated_patch(const GridStack& stack, const PatchRecord& record,
                                    std::span<const Interp> interp);

// Windows, angle augmentation and leakage-safe splits for one area.
PatchManifest build_manifest(const std::string& area, const PatchSources& sources, const GridStack& stack,
                             const ManifestConfig& config);
// Loads the sources (paths relative to the working directory) and checks alignment.
PatchManifest build_manifest(const std::string& area, const PatchSources& sources, const ManifestConfig& config);

// Source paths are written as given; relative paths are resolved against the
// manifest's directory when the sources are loaded.
void write_manifest(const PatchManifest& manifest, const std::filesystem::path& path);
PatchManifest read_manifest(const std::filesystem::path& path);
std::string manifest_json(const PatchManifest& manifest);

// Satellite bands, then gps, then labels. Throws DataError on misalignment.
GridStack load_sources(const PatchSources& sources, const std::filesystem::path& base_dir = {});

struct Sample {
    Tensor<float> satellite;  // 1 x 4 x S x S
    Tensor<float> gps;        // 1 x 1 x S x S
    Tensor<float> label;      // 1 x 1 x S x S, binary
};

/// On-demand patch extraction from one manifest's sources.
class PatchDataset {
public:
    PatchDataset(PatchManifest manifest, GridStack stack);
    static PatchDataset open(const std::filesystem::path& manifest_path);

    const PatchManifest& manifest() const noexcept { return manifest_; }
    Sample sample(const PatchRecord& record) const;

private:
    PatchManifest manifest_;
    GridStack stack_;
    std::vector<Interp> interp_;
};

}  // namespace roadfuse
