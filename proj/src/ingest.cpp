#include "roadfuse/ingest.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "roadfuse/error.hpp"

namespace roadfuse {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '"')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"')) {
        s.remove_suffix(1);
    }
    return s;
}

bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace

RasterGrid GridSpec::make_grid(float fill) const {
    return RasterGrid(width, height, origin_x, origin_y, pixel_size, RasterGrid::kDefaultNodata, fill);
}

GridSpec read_grid_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open grid spec " + path.string());
    try {
        nlohmann::json j;
        in >> j;
        GridSpec spec;
        spec.width = j.at("width").get<int>();
        spec.height = j.at("height").get<int>();
        spec.origin_x = j.at("origin_x").get<double>();
        spec.origin_y = j.at("origin_y").get<double>();
        spec.pixel_size = j.value("pixel_size", 2.5);
        if (spec.width <= 0 || spec.height <= 0 || !(spec.pixel_size > 0.0)) {
            throw ConfigError(path.string() + ": grid spec needs positive width, height and pixel_size");
        }
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_grid_spec(const GridSpec& spec, const std::filesystem::path& path) {
    nlohmann::json j{{"width", spec.width},
                     {"height", spec.height},
                     {"origin_x", spec.origin_x},
                     {"origin_y", spec.origin_y},
                     {"pixel_size", spec.pixel_size}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

GridSpec grid_spec_of(const RasterGrid& grid) {
    return {grid.width(), grid.height(), grid.origin_x(), grid.origin_y(), grid.pixel_size()};
}

GpsRasterizer::GpsRasterizer(const GridSpec& spec) : grid_(spec.make_grid(0.0f)) {}

void GpsRasterizer::add(double x, double y) {
    ++points_;
    const CellIndex cell = world_to_pixel(grid_, x, y);
    if (!grid_.contains(cell)) {
        ++skipped_;
        return;
    }
    grid_.at(static_cast<int>(cell.col), static_cast<int>(cell.row)) += 1.0f;
}

void GpsRasterizer::merge(const GpsRasterizer& other) {
    if (!grid_.same_geometry(other.grid_)) throw DataError("cannot merge rasterizers over different grids");
    auto dst = grid_.data();
    auto src = other.grid_.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    points_ += other.points_;
    skipped_ += other.skipped_;
}

GpsRaster rasterize_gps(std::span<const GpsPoint> points, const GridSpec& spec) {
    GpsRasterizer raster(spec);
    for (const auto& p : points) raster.add(p);
    const auto skipped = raster.skipped();
    return {std::move(raster).take(), skipped, 0};
}

GpsPoint parse_gps_record(std::string_view line) {
    std::array<std::string_view, 4> fields{};
    std::size_t n = 0;
    while (n < 4) {
        const auto comma = line.find(',');
        if (n == 3) {
            if (comma != std::string_view::npos) throw DataError("too many fields");
            fields[n++] = line;
            break;
        }
        if (comma == std::string_view::npos) throw DataError("expected 4 fields");
        fields[n++] = line.substr(0, comma);
        line.remove_prefix(comma + 1);
    }
    GpsPoint p;
    p.traj_id = std::string(trim(fields[0]));
    if (!parse_double(fields[1], p.t) || p.t < 0.0) throw DataError("bad timestamp");
    if (!parse_double(fields[2], p.x)) throw DataError("bad x coordinate");
    if (!parse_double(fields[3], p.y)) throw DataError("bad y coordinate");
    return p;
}

GpsRaster rasterize_gps_csv(std::istream& in, const GridSpec& spec, bool skip_bad) {
    GpsRasterizer raster(spec);
    std::uint64_t bad = 0;
    std::string line;
    std::uint64_t line_no = 0;
    if (!std::getline(in, line)) throw DataError("GPS CSV is empty (missing header)");
    ++line_no;
    if (std::string(trim(line)).rfind("traj_id,t,x,y", 0) != 0) {
        throw DataError("GPS CSV line 1: expected header traj_id,t,x,y");
    }
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            const GpsPoint p = parse_gps_record(line);
            raster.add(p.x, p.y);
        } catch (const DataError& e) {
            if (!skip_bad) {
                throw DataError("GPS CSV line " + std::to_string(line_no) + ": " + e.what());
            }
            ++bad;
        }
    }
    const auto skipped = raster.skipped();
    return {std::move(raster).take(), skipped, bad};
}

RasterGrid normalize_gps(const RasterGrid& grid, double clip_pct) {
    std::vector<double> valid;
    valid.reserve(grid.size());
    double max_value = 0.0;
    for (float v : grid.data()) {
        if (grid.is_nodata(v)) continue;
        if (v < 0.0f) throw DataError("GPS frequency grid holds a negative value");
        valid.push_back(v);
        max_value = std::max(max_value, static_cast<double>(v));
    }
    RasterGrid out = grid.like(0.0f);
    if (valid.empty() || max_value == 0.0) {
        auto src = grid.data();
        auto dst = out.data();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = grid.is_nodata(src[i]) ? src[i] : 0.0f;
        return out;
    }
    double clip = percentile(std::move(valid), clip_pct);
    if (clip <= 0.0) clip = max_value;
    auto src = grid.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (grid.is_nodata(src[i])) {
            dst[i] = src[i];
        } else {
            dst[i] = static_cast<float>(std::min(static_cast<double>(src[i]), clip) / clip);
        }
    }
    return out;
}

double buffer_width_for_class(std::string_view fclass) {
    static constexpr std::string_view wide[] = {"motorway", "primary", "secondary"};
    static constexpr std::string_view narrow[] = {"footway",       "track",         "service",
                                                  "steps",         "track_grade1",  "track_grade2",
                                                  "track_grade3",  "track_grade4",  "track_grade5",
                                                  "bridleway"};
    if (std::find(std::begin(wide), std::end(wide), fclass) != std::end(wide)) return 10.0;
    if (std::find(std::begin(narrow), std::end(narrow), fclass) != std::end(narrow)) return 4.0;
    return 6.0;
}

double point_segment_distance_sq(WorldPoint p, WorldPoint a, WorldPoint b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len_sq = dx * dx + dy * dy;
    double t = 0.0;
    if (len_sq > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len_sq, 0.0, 1.0);
    const double ex = p.x - (a.x + t * dx), ey = p.y - (a.y + t * dy);
    return ex * ex + ey * ey;
}

RasterGrid rasterize_labels(std::span<const RoadSegment> segments, const GridSpec& spec) {
    RasterGrid out = spec.make_grid(0.0f);
    const double ps = spec.pixel_size;
    for (const auto& seg : segments) {
        if (seg.vertices.size() < 2) throw DataError("road segment needs at least two vertices");
        const double radius = buffer_width_for_class(seg.fclass);
        const double radius_sq = radius * radius;
        for (std::size_t k = 0; k + 1 < seg.vertices.size(); ++k) {
            const WorldPoint a = seg.vertices[k], b = seg.vertices[k + 1];
            // Candidate cells: centers inside the segment bbox inflated by the buffer.
            const double min_x = std::min(a.x, b.x) - radius, max_x = std::max(a.x, b.x) + radius;
            const double min_y = std::min(a.y, b.y) - radius, max_y = std::max(a.y, b.y) + radius;
            const auto c0 = static_cast<std::int64_t>(std::floor((min_x - spec.origin_x) / ps - 0.5)) - 1;
            const auto c1 = static_cast<std::int64_t>(std::ceil((max_x - spec.origin_x) / ps - 0.5)) + 1;
            const auto r0 = static_cast<std::int64_t>(std::floor((spec.origin_y - max_y) / ps - 0.5)) - 1;
            const auto r1 = static_cast<std::int64_t>(std::ceil((spec.origin_y - min_y) / ps - 0.5)) + 1;
            const auto col_begin = std::max<std::int64_t>(c0, 0);
            const auto col_end = std::min<std::int64_t>(c1, spec.width - 1);
            const auto row_begin = std::max<std::int64_t>(r0, 0);
            const auto row_end = std::min<std::int64_t>(r1, spec.height - 1);
            for (auto r = row_begin; r <= row_end; ++r) {
                for (auto c = col_begin; c <= col_end; ++c) {
                    float& cell = out.at(static_cast<int>(c), static_cast<int>(r));
                    if (cell != 0.0f) continue;
                    const WorldPoint center = pixel_to_world(out, c, r);
                    if (point_segment_distance_sq(center, a, b) <= radius_sq) cell = 1.0f;
                }
            }
        }
    }
    return out;
}

RoadSegment parse_linestring(std::string_view wkt, std::string fclass) {
    wkt = trim(wkt);
    constexpr std::string_view kTag = "LINESTRING";
    if (wkt.substr(0, kTag.size()) != kTag) throw DataError("expected LINESTRING geometry");
    const auto open = wkt.find('(');
    const auto close = wkt.rfind(')');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
        throw DataError("malformed LINESTRING");
    }
    std::string_view body = wkt.substr(open + 1, close - open - 1);
    RoadSegment seg;
    seg.fclass = std::move(fclass);
    while (!body.empty()) {
        const auto comma = body.find(',');
        std::string_view pair = trim(body.substr(0, comma));
        body = comma == std::string_view::npos ? std::string_view{} : body.substr(comma + 1);
        const auto space = pair.find(' ');
        WorldPoint p;
        if (space == std::string_view::npos || !parse_double(pair.substr(0, space), p.x) ||
            !parse_double(pair.substr(space + 1), p.y)) {
            throw DataError("bad LINESTRING coordinate '" + std::string(pair) + "'");
        }
        if (!seg.vertices.empty()) {
            const auto& q = seg.vertices.back();
            if (std::abs(q.x - p.x) <= 1e-9 && std::abs(q.y - p.y) <= 1e-9) {
                throw DataError("coincident consecutive LINESTRING vertices");
            }
        }
        seg.vertices.push_back(p);
    }
    if (seg.vertices.size() < 2) throw DataError("LINESTRING needs at least two vertices");
    return seg;
}

std::string to_wkt(const RoadSegment& segment) {
    std::ostringstream os;
    os.precision(17);
    os << "LINESTRING (";
    for (std::size_t i = 0; i < segment.vertices.size(); ++i) {
        if (i) os << ", ";
        os << segment.vertices[i].x << ' ' << segment.vertices[i].y;
    }
    os << ')';
    return os.str();
}

std::vector<RoadSegment> read_roads_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || std::string(trim(line)).rfind("fclass,wkt", 0) != 0) {
        throw DataError("roads CSV line 1: expected header fclass,wkt");
    }
    std::vector<RoadSegment> roads;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("roads CSV line " + std::to_string(line_no) + ": missing wkt");
        try {
            roads.push_back(parse_linestring(std::string_view(line).substr(comma + 1),
                                             std::string(trim(std::string_view(line).substr(0, comma)))));
        } catch (const DataError& e) {
            throw DataError("roads CSV line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return roads;
}

}  // namespace roadfuse
