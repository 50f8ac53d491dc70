#include "roadfuse/grid.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "roadfuse/error.hpp"

namespace roadfuse {

namespace {

constexpr const char* kGrdMagic = "GRD1";

template <class T>
std::string shortest(T v) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

template <class T>
T parse_number(const std::string& token, const std::filesystem::path& path) {
    T value{};
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
    if (ec != std::errc{} || ptr != token.data() + token.size()) {
        throw DataError(path.string() + ": bad header token '" + token + "'");
    }
    return value;
}

std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
    return v;
}

}  // namespace

RasterGrid::RasterGrid(int width, int height, double origin_x, double origin_y, double pixel_size,
                       float nodata, float fill)
    : RasterGrid(width, height, origin_x, origin_y, pixel_size, nodata,
                 std::vector<float>(width > 0 && height > 0
                                        ? static_cast<std::size_t>(width) * static_cast<std::size_t>(height)
                                        : 0,
                                    fill)) {}

RasterGrid::RasterGrid(int width, int height, double origin_x, double origin_y, double pixel_size,
                       float nodata, std::vector<float> data)
    : width_(width),
      height_(height),
      origin_x_(origin_x),
      origin_y_(origin_y),
      pixel_size_(pixel_size),
      nodata_(nodata),
      data_(std::move(data)) {
    if (width_ <= 0 || height_ <= 0) {
        throw DataError("raster grid needs positive width and height");
    }
    if (!(pixel_size_ > 0.0) || !std::isfinite(pixel_size_)) {
        throw DataError("raster grid needs a positive pixel size");
    }
    if (data_.size() != static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_)) {
        throw DataError("raster grid payload length does not match width x height");
    }
    validate();
}

bool RasterGrid::same_geometry(const RasterGrid& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_ && origin_x_ == o.origin_x_ &&
           origin_y_ == o.origin_y_ && pixel_size_ == o.pixel_size_;
}

RasterGrid RasterGrid::like(float fill) const {
    return RasterGrid(width_, height_, origin_x_, origin_y_, pixel_size_, nodata_, fill);
}

void RasterGrid::validate() const {
    for (float v : data_) {
        if (!std::isfinite(v) && !is_nodata(v)) {
            throw DataError("raster grid holds a non-finite value");
        }
    }
}

bool RasterGrid::operator==(const RasterGrid& o) const {
    if (!same_geometry(o)) return false;
    if (std::memcmp(&nodata_, &o.nodata_, sizeof(float)) != 0) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0;
}

CellIndex world_to_pixel(const RasterGrid& grid, double x, double y) {
    const double ps = grid.pixel_size();
    auto col = static_cast<std::int64_t>(std::floor((x - grid.origin_x()) / ps));
    auto row = static_cast<std::int64_t>(std::floor((grid.origin_y() - y) / ps));
    // Division can round across a boundary; settle on the comparison definition.
    while (x < grid.origin_x() + static_cast<double>(col) * ps) --col;
    while (x >= grid.origin_x() + static_cast<double>(col + 1) * ps) ++col;
    while (y > grid.origin_y() - static_cast<double>(row) * ps) --row;
    while (y <= grid.origin_y() - static_cast<double>(row + 1) * ps) ++row;
    return {col, row};
}

WorldPoint pixel_to_world(const RasterGrid& grid, std::int64_t col, std::int64_t row) {
    const double ps = grid.pixel_size();
    return {grid.origin_x() + (static_cast<double>(col) + 0.5) * ps,
            grid.origin_y() - (static_cast<double>(row) + 0.5) * ps};
}

void write_grd(const RasterGrid& grid, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out << kGrdMagic << '\n'
        << grid.width() << ' ' << grid.height() << ' ' << shortest(grid.origin_x()) << ' '
        << shortest(grid.origin_y()) << ' ' << shortest(grid.pixel_size()) << ' '
        << shortest(grid.nodata()) << '\n';
    std::vector<std::uint32_t> payload(grid.size());
    std::memcpy(payload.data(), grid.data().data(), grid.size() * sizeof(float));
    for (auto& w : payload) w = to_little_endian(w);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(std::uint32_t)));
    if (!out) throw DataError("write failed for " + path.string());
}

RasterGrid read_grd(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::string magic;
    if (!std::getline(in, magic) || magic != kGrdMagic) {
        throw DataError(path.string() + ": bad magic, expected GRD1");
    }
    std::string header;
    if (!std::getline(in, header)) throw DataError(path.string() + ": truncated header");
    std::istringstream fields(header);
    std::vector<std::string> tokens;
    for (std::string t; fields >> t;) tokens.push_back(t);
    if (tokens.size() != 6) throw DataError(path.string() + ": header needs 6 fields");
    const int width = parse_number<int>(tokens[0], path);
    const int height = parse_number<int>(tokens[1], path);
    const double ox = parse_number<double>(tokens[2], path);
    const double oy = parse_number<double>(tokens[3], path);
    const double ps = parse_number<double>(tokens[4], path);
    const float nodata = parse_number<float>(tokens[5], path);
    if (width <= 0 || height <= 0) throw DataError(path.string() + ": non-positive dimensions");

    const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    std::vector<std::uint32_t> payload(count);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float)) {
        throw DataError(path.string() + ": truncated payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw DataError(path.string() + ": payload longer than header declares");
    }
    for (auto& w : payload) w = to_little_endian(w);
    std::vector<float> data(count);
    std::memcpy(data.data(), payload.data(), count * sizeof(float));
    return RasterGrid(width, height, ox, oy, ps, nodata, std::move(data));
}

void write_pgm(const RasterGrid& grid, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out << "P5\n" << grid.width() << ' ' << grid.height() << "\n255\n";
    std::vector<unsigned char> bytes(grid.size());
    auto src = grid.data();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const float v = src[i];
        const double clamped = grid.is_nodata(v) ? 0.0 : std::clamp(static_cast<double>(v), 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(clamped * 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

double keys_kernel(double t, double a) {
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

namespace {

// One cubic-convolution pass along a line of n samples, producing n * factor outputs.
// Out-of-range taps use Keys' boundary extrapolation.
void upscale_line(std::span<const double> src, int factor, std::span<double> dst) {
    const auto n = static_cast<std::int64_t>(src.size());
    auto sample = [&](std::int64_t i) -> double {
        if (i >= 0 && i < n) return src[static_cast<std::size_t>(i)];
        if (i == -1) return 3.0 * src[0] - 3.0 * src[1] + src[2];
        if (i == -2) return 3.0 * (3.0 * src[0] - 3.0 * src[1] + src[2]) - 3.0 * src[0] + src[1];
        const double last = src[n - 1], prev = src[n - 2], prev2 = src[n - 3];
        const double ext1 = 3.0 * last - 3.0 * prev + prev2;
        if (i == n) return ext1;
        return 3.0 * ext1 - 3.0 * last + prev;  // i == n + 1
    };
    const double lo = -0.5, hi = static_cast<double>(n) - 0.5;
    for (std::size_t j = 0; j < dst.size(); ++j) {
        double s = (static_cast<double>(j) + 0.5) / factor - 0.5;
        s = std::clamp(s, lo, hi);
        const auto base = static_cast<std::int64_t>(std::floor(s));
        const double frac = s - static_cast<double>(base);
        double acc = 0.0;
        for (int k = -1; k <= 2; ++k) acc += sample(base + k) * keys_kernel(frac - k);
        dst[j] = acc;
    }
}

}  // namespace

RasterGrid upscale_cubic(const RasterGrid& grid, int factor) {
    if (factor <= 0) throw ConfigError("upscale factor must be >= 1");
    if (factor == 1) return grid;
    const int w = grid.width(), h = grid.height();
    if (w < 4 || h < 4) throw DataError("grid too small for the 4-tap cubic kernel");

    // Nodata cells make every output whose 4x4 support touches them nodata.
    std::vector<char> bad(grid.size(), 0);
    std::vector<double> values(grid.size());
    auto src = grid.data();
    std::size_t valid = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        bad[i] = grid.is_nodata(src[i]) ? 1 : 0;
        values[i] = bad[i] ? 0.0 : static_cast<double>(src[i]);
        valid += bad[i] ? 0 : 1;
    }
    if (valid < 16) throw DataError("grid has fewer than 4x4 valid pixels");

    const int ow = w * factor, oh = h * factor;
    std::vector<double> horiz(static_cast<std::size_t>(ow) * h);
    std::vector<double> line_out;
    for (int r = 0; r < h; ++r) {
        std::span<const double> line(values.data() + static_cast<std::size_t>(r) * w, w);
        upscale_line(line, factor, std::span<double>(horiz.data() + static_cast<std::size_t>(r) * ow, ow));
    }
    std::vector<float> out(static_cast<std::size_t>(ow) * oh);
    std::vector<double> column(h), column_out(oh);
    for (int c = 0; c < ow; ++c) {
        for (int r = 0; r < h; ++r) column[r] = horiz[static_cast<std::size_t>(r) * ow + c];
        upscale_line(column, factor, column_out);
        for (int r = 0; r < oh; ++r) out[static_cast<std::size_t>(r) * ow + c] = static_cast<float>(column_out[r]);
    }

    if (valid != grid.size()) {
        for (int r = 0; r < oh; ++r) {
            const double sr = std::clamp((r + 0.5) / factor - 0.5, -0.5, h - 0.5);
            const auto br = static_cast<int>(std::floor(sr));
            for (int c = 0; c < ow; ++c) {
                const double sc = std::clamp((c + 0.5) / factor - 0.5, -0.5, w - 0.5);
                const auto bc = static_cast<int>(std::floor(sc));
                bool hit = false;
                for (int dr = -1; dr <= 2 && !hit; ++dr) {
                    const int rr = std::clamp(br + dr, 0, h - 1);
                    for (int dc = -1; dc <= 2 && !hit; ++dc) {
                        const int cc = std::clamp(bc + dc, 0, w - 1);
                        hit = bad[static_cast<std::size_t>(rr) * w + cc] != 0;
                    }
                }
                if (hit) out[static_cast<std::size_t>(r) * ow + c] = grid.nodata();
            }
        }
    }
    return RasterGrid(ow, oh, grid.origin_x(), grid.origin_y(), grid.pixel_size() / factor, grid.nodata(),
                      std::move(out));
}

double percentile(std::vector<double> values, double pct) {
    if (values.empty()) throw DataError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

NormalizeResult normalize_minmax(const RasterGrid& grid, double lo_pct, double hi_pct) {
    if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0)) {
        throw ConfigError("normalize_minmax needs 0 <= lo_pct < hi_pct <= 100");
    }
    std::vector<double> valid;
    valid.reserve(grid.size());
    for (float v : grid.data()) {
        if (!grid.is_nodata(v)) valid.push_back(v);
    }
    if (valid.empty()) throw DataError("normalize_minmax on an all-nodata grid");
    std::sort(valid.begin(), valid.end());
    const double p_lo = percentile(valid, lo_pct);
    const double p_hi = percentile(std::move(valid), hi_pct);

    NormalizeResult result{grid.like(0.0f), p_hi <= p_lo};
    auto src = grid.data();
    auto dst = result.grid.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (grid.is_nodata(src[i])) {
            dst[i] = src[i];
        } else if (result.degenerate) {
            dst[i] = 0.0f;
        } else {
            const double v = std::clamp(static_cast<double>(src[i]), p_lo, p_hi);
            dst[i] = static_cast<float>((v - p_lo) / (p_hi - p_lo));
        }
    }
    return result;
}

GridStack::GridStack(std::vector<RasterGrid> grids, std::vector<std::string> band_names) {
    if (grids.size() != band_names.size()) throw DataError("grid stack needs one name per band");
    for (std::size_t i = 0; i < grids.size(); ++i) push_back(std::move(grids[i]), std::move(band_names[i]));
}

void GridStack::push_back(RasterGrid grid, std::string name) {
    if (!grids_.empty() && !grids_.front().same_geometry(grid)) {
        throw DataError("band '" + name + "' is not aligned with the stack");
    }
    grids_.push_back(std::move(grid));
    band_names_.push_back(std::move(name));
}

const RasterGrid& GridStack::band(const std::string& name) const {
    for (std::size_t i = 0; i < band_names_.size(); ++i) {
        if (band_names_[i] == name) return grids_[i];
    }
    throw DataError("grid stack has no band '" + name + "'");
}

void write_stack(const GridStack& stack, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["band_names"] = stack.band_names();
    std::vector<std::string> files;
    for (std::size_t i = 0; i < stack.bands(); ++i) {
        const std::string file = stack.band_names()[i] + ".grd";
        write_grd(stack[i], dir / file);
        files.push_back(file);
    }
    manifest["files"] = files;
    std::ofstream out(dir / "stack.json", std::ios::trunc);
    out << manifest.dump(2) << '\n';
}

GridStack read_stack(const std::filesystem::path& dir) {
    std::ifstream in(dir / "stack.json");
    if (!in) throw DataError("missing stack manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(dir.string() + "/stack.json: " + e.what());
    }
    const auto names = manifest.at("band_names").get<std::vector<std::string>>();
    const auto files = manifest.at("files").get<std::vector<std::string>>();
    if (names.size() != files.size()) throw DataError("stack manifest band/file count mismatch");
    GridStack stack;
    for (std::size_t i = 0; i < names.size(); ++i) stack.push_back(read_grd(dir / files[i]), names[i]);
    return stack;
}

}  // namespace roadfuse
