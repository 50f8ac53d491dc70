#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "roadfuse/grid.hpp"
#include "roadfuse/ingest.hpp"

namespace roadfuse {

struct SynthOptions {
    double overlap = 0.2;         // tiling overlap the extent is laid out for
    double pixel_size = 2.5;
    double noise_sigma = 0.1;     // Gaussian noise on every satellite band
    double road_density = 0.35;   // roads per patch-sized area of the extent
    double hidden_fraction = 0.0; // roads present in labels and GPS but absent from the imagery
    int distractors = 0;          // road-like lines drawn in the imagery only
    double gps_rate = 3.0;        // Poisson mean of points per road pixel
    double gps_dropout = 0.1;     // probability that a road pixel receives no points
};

/// In-memory synthetic area; all rasters share `spec`.
struct SynthArea {
    GridSpec spec;
    std::vector<RoadSegment> roads;
    std::vector<GpsPoint> points;
    std::vector<RasterGrid> satellite;  // 4 raw bands, not normalized
    RasterGrid labels;
};

// Extent tiled by exactly n_base_patches windows of size x size at the given overlap.
GridSpec synth_extent(int n_base_patches, int size, const SynthOptions& options = {});

SynthArea synth_area(std::uint64_t seed, int n_base_patches, int size, const SynthOptions& options = {});

/**
 * Writes spec.json, roads.csv, gps.csv, sat_b0..3.grd and area.json (the
 * source paths of the area, relative to dir) into dir.
 */
SynthArea synth_dataset(std::uint64_t seed, int n_base_patches, int size, const std::filesystem::path& dir,
                        const SynthOptions& options = {});

}  // namespace roadfuse
