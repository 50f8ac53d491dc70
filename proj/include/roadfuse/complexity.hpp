#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadfuse/patches.hpp"

namespace roadfuse {

// Single-channel image with values in [0,1], row-major.
struct GrayPatch {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    double at(int col, int row) const { return values[static_cast<std::size_t>(row) * width + col]; }
};

// Level of v in [0,1]: min(levels - 1, floor(v * levels)); values outside [0,1] are clamped first.
int quantize(double v, int levels);

// Shannon entropy in bits of the `levels`-bin histogram.
double shannon_entropy(const GrayPatch& patch, int levels = 256);

using GlcmOffset = std::pair<int, int>;  // (row offset, column offset)

inline const std::vector<GlcmOffset>& default_glcm_offsets() {
    static const std::vector<GlcmOffset> offsets{{0, 1}, {1, 1}, {1, 0}, {1, -1}};
    return offsets;
}

// Symmetric co-occurrence counts over all offsets, normalized to sum 1; levels x levels, row-major.
struct Glcm {
    int levels = 0;
    std::vector<double> p;

    double at(int i, int j) const { return p[static_cast<std::size_t>(i) * levels + j]; }
};

Glcm glcm(const GrayPatch& patch, int levels = 64, const std::vector<GlcmOffset>& offsets = default_glcm_offsets());

// Sum of P(i,j) / (1 + |i - j|). Throws DataError when P does not sum to 1 within 1e-6.
double homogeneity(const Glcm& m);

struct ComplexityRow {
    int patch_id = 0;
    std::string area;
    double entropy = 0.0;
    double homogeneity = 0.0;
};

struct AreaSummary {
    std::string area;
    std::size_t n = 0;
    double entropy_mean = 0.0;
    double entropy_var = 0.0;  // population variance
    double homogeneity_mean = 0.0;
    double homogeneity_var = 0.0;
};

struct ComplexityOptions {
    int entropy_levels = 256;
    int glcm_levels = 64;
    int histogram_bins = 20;
};

// Grayscale = unweighted mean of the first three satellite bands.
GrayPatch grayscale(const Sample& sample);

struct ComplexityReport {
    std::vector<ComplexityRow> rows;
    std::vector<AreaSummary> summaries;  // in order of first appearance
};

// One row per record of the dataset (every split), plus per-area summaries.
ComplexityReport area_report(const std::vector<const PatchDataset*>& datasets, const ComplexityOptions& options = {});
std::vector<AreaSummary> summarize(std::span<const ComplexityRow> rows);

void write_complexity_csv(std::span<const ComplexityRow> rows, const std::filesystem::path& path);
// Columns: area, metric, bin_lo, bin_hi, count. Entropy bins span [0, log2(levels)], homogeneity [0, 1].
void write_complexity_histogram(std::span<const ComplexityRow> rows, const ComplexityOptions& options,
                                const std::filesystem::path& path);
nlohmann::json to_json(std::span<const AreaSummary> summaries);

}  // namespace roadfuse
