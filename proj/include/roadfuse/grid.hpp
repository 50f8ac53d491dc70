#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace roadfuse {

// Cell index pair; may be out of range for points outside the extent.
struct CellIndex {
    std::int64_t col = 0;
    std::int64_t row = 0;
    bool operator==(const CellIndex&) const = default;
};

struct WorldPoint {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const WorldPoint&) const = default;
};

/**
 * Single-band, north-up georeferenced float grid.
 *
 * origin is the top-left corner in projected meters; row 0 is the north
 * edge and data is row-major. Cells hold finite values or exactly the
 * nodata sentinel.
 */
class RasterGrid {
public:
    static constexpr float kDefaultNodata = -9999.0f;

    RasterGrid() = default;
    RasterGrid(int width, int height, double origin_x, double origin_y, double pixel_size,
               float nodata = kDefaultNodata, float fill = 0.0f);
    RasterGrid(int width, int height, double origin_x, double origin_y, double pixel_size,
               float nodata, std::vector<float> data);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    double origin_x() const noexcept { return origin_x_; }
    double origin_y() const noexcept { return origin_y_; }
    double pixel_size() const noexcept { return pixel_size_; }
    float nodata() const noexcept { return nodata_; }
    std::size_t size() const noexcept { return data_.size(); }

    float& at(int col, int row) { return data_[index(col, row)]; }
    float at(int col, int row) const { return data_[index(col, row)]; }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    bool is_nodata(float v) const noexcept { return v == nodata_; }
    bool contains(CellIndex c) const noexcept {
        return c.col >= 0 && c.row >= 0 && c.col < width_ && c.row < height_;
    }

    // Same width, height, origin and pixel size.
    bool same_geometry(const RasterGrid& other) const noexcept;

    // Empty grid with identical geometry and nodata.
    RasterGrid like(float fill = 0.0f) const;

    // Throws DataError when an invariant does not hold.
    void validate() const;

    bool operator==(const RasterGrid& other) const;

private:
    std::size_t index(int col, int row) const noexcept {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(col);
    }

    int width_ = 0;
    int height_ = 0;
    double origin_x_ = 0.0;
    double origin_y_ = 0.0;
    double pixel_size_ = 1.0;
    float nodata_ = kDefaultNodata;
    std::vector<float> data_;
};

// Half-open cell membership; a point on a cell boundary goes to the higher index.
CellIndex world_to_pixel(const RasterGrid& grid, double x, double y);
WorldPoint pixel_to_world(const RasterGrid& grid, std::int64_t col, std::int64_t row);

// Bit-exact .grd format: "GRD1\n", one geometry line, then little-endian float32 payload.
void write_grd(const RasterGrid& grid, const std::filesystem::path& path);
RasterGrid read_grd(const std::filesystem::path& path);

// 8-bit binary PGM with [0,1] mapped linearly to [0,255]; nodata is written as 0.
void write_pgm(const RasterGrid& grid, const std::filesystem::path& path);

/**
 * Cubic-convolution upscaling (Keys kernel, a = -0.5).
 *
 * Output pixel centers are mapped back to source coordinates. Taps that fall
 * outside the source are synthesized with Keys' boundary extrapolation
 * f(-1) = 3 f(0) - 3 f(1) + f(2), which keeps linear and quadratic fields
 * exact up to the border. Sample coordinates are clamped to the outermost
 * half pixel of the source.
 */
RasterGrid upscale_cubic(const RasterGrid& grid, int factor);

// Keys cubic-convolution kernel weight for offset t.
double keys_kernel(double t, double a = -0.5);

struct NormalizeResult {
    RasterGrid grid;
    bool degenerate = false;  // p_lo == p_hi; grid is all zeros on valid cells
};

// Linear-interpolated percentile of values (sorted ascending internally), pct in [0, 100].
double percentile(std::vector<double> values, double pct);

// Clip valid cells to [p_lo, p_hi] percentiles then map affinely onto [0,1].
NormalizeResult normalize_minmax(const RasterGrid& grid, double lo_pct = 2.0, double hi_pct = 98.0);

/**
 * Ordered set of aligned single-band grids.
 */
class GridStack {
public:
    GridStack() = default;
    GridStack(std::vector<RasterGrid> grids, std::vector<std::string> band_names);

    const std::vector<RasterGrid>& grids() const noexcept { return grids_; }
    const std::vector<std::string>& band_names() const noexcept { return band_names_; }
    std::size_t bands() const noexcept { return grids_.size(); }
    const RasterGrid& operator[](std::size_t i) const { return grids_[i]; }
    const RasterGrid& band(const std::string& name) const;

    void push_back(RasterGrid grid, std::string name);

private:
    std::vector<RasterGrid> grids_;
    std::vector<std::string> band_names_;
};

// Directory containing stack.json ({"band_names":[...],"files":[...]}) plus one .grd per band.
void write_stack(const GridStack& stack, const std::filesystem::path& dir);
GridStack read_stack(const std::filesystem::path& dir);

}  // namespace roadfuse
