#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "roadfuse/grid.hpp"

namespace roadfuse {

struct GpsPoint {
    std::string traj_id;
    double t = 0.0;
    double x = 0.0;
    double y = 0.0;
};

struct RoadSegment {
    std::vector<WorldPoint> vertices;
    std::string fclass;
};

// Output raster geometry. Pixel size defaults to the 2.5 m label resolution.
struct GridSpec {
    int width = 0;
    int height = 0;
    double origin_x = 0.0;
    double origin_y = 0.0;
    double pixel_size = 2.5;

    RasterGrid make_grid(float fill = 0.0f) const;
    bool operator==(const GridSpec&) const = default;
};

GridSpec read_grid_spec(const std::filesystem::path& path);
void write_grid_spec(const GridSpec& spec, const std::filesystem::path& path);
GridSpec grid_spec_of(const RasterGrid& grid);

/**
 * Streaming point-frequency accumulator.
 *
 * Memory is the output grid plus a counter; points may arrive in any order.
 * Partial accumulators over shards of one stream can be merged.
 */
class GpsRasterizer {
public:
    explicit GpsRasterizer(const GridSpec& spec);

    void add(double x, double y);
    void add(const GpsPoint& p) { add(p.x, p.y); }
    void merge(const GpsRasterizer& other);

    std::uint64_t points() const noexcept { return points_; }
    std::uint64_t skipped() const noexcept { return skipped_; }
    const RasterGrid& grid() const noexcept { return grid_; }
    RasterGrid take() && { return std::move(grid_); }

private:
    RasterGrid grid_;
    std::uint64_t points_ = 0;
    std::uint64_t skipped_ = 0;
};

struct GpsRaster {
    RasterGrid grid;
    std::uint64_t skipped = 0;    // outside the extent
    std::uint64_t bad_lines = 0;  // unparseable records tolerated with skip_bad
};

GpsRaster rasterize_gps(std::span<const GpsPoint> points, const GridSpec& spec);

// Reads a `traj_id,t,x,y` CSV stream in one pass. Unparseable lines throw a
// DataError naming the line number unless skip_bad is set.
GpsRaster rasterize_gps_csv(std::istream& in, const GridSpec& spec, bool skip_bad = false);

// Parses one CSV data record; throws DataError on malformed input.
GpsPoint parse_gps_record(std::string_view line);

// v -> min(v, p) / p with p the clip_pct percentile of valid cells.
// Falls back to the maximum when the percentile is zero; all-zero stays all-zero.
RasterGrid normalize_gps(const RasterGrid& grid, double clip_pct = 99.0);

// Radial buffer in meters for an OSM road class.
double buffer_width_for_class(std::string_view fclass);

// Cell = 1 iff its center lies within the class buffer of any segment.
RasterGrid rasterize_labels(std::span<const RoadSegment> segments, const GridSpec& spec);

// Roads CSV with header `fclass,wkt`, wkt = LINESTRING (x y, x y, ...).
std::vector<RoadSegment> read_roads_csv(std::istream& in);
RoadSegment parse_linestring(std::string_view wkt, std::string fclass);
std::string to_wkt(const RoadSegment& segment);

double point_segment_distance_sq(WorldPoint p, WorldPoint a, WorldPoint b);

}  // namespace roadfuse
