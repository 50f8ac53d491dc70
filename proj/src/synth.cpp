#include "roadfuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "roadfuse/error.hpp"
#include "roadfuse/metrics.hpp"

namespace roadfuse {

namespace {

constexpr std::array<double, 4> kBandGain{0.9, 0.75, 0.6, 1.1};
constexpr std::array<double, 4> kBandOffset{0.1, 0.15, 0.2, 0.05};
constexpr double kMinRoadFraction = 0.02;

// Polyline entering at a random border point and wandering across the extent.
RoadSegment random_road(std::mt19937_64& rng, const GridSpec& spec) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> turn(0.0, 0.3);
    const double w = spec.width * spec.pixel_size;
    const double h = spec.height * spec.pixel_size;
    const double x0 = spec.origin_x, y1 = spec.origin_y, y0 = spec.origin_y - h;
    double x, y, heading;
    const int side = static_cast<int>(unit(rng) * 4.0) % 4;
    const double pi = std::numbers::pi;
    switch (side) {
        case 0: x = x0; y = y0 + unit(rng) * h; heading = 0.0; break;
        case 1: x = x0 + w; y = y0 + unit(rng) * h; heading = pi; break;
        case 2: x = x0 + unit(rng) * w; y = y0; heading = pi / 2; break;
        default: x = x0 + unit(rng) * w; y = y1; heading = -pi / 2; break;
    }
    heading += (unit(rng) - 0.5) * pi / 2;
    const double step = std::max(w, h) / 6.0;
    RoadSegment road;
    road.vertices.push_back({x, y});
    for (int i = 0; i < 16; ++i) {
        heading += turn(rng);
        x += step * std::cos(heading);
        y += step * std::sin(heading);
        road.vertices.push_back({x, y});
        if (x < x0 || x > x0 + w || y < y0 || y > y1) break;
    }
    static const std::array<const char*, 6> classes{"motorway", "primary", "residential",
                                                    "tertiary", "footway", "service"};
    road.fclass = classes[static_cast<std::size_t>(unit(rng) * classes.size()) % classes.size()];
    return road;
}

// Two passes of a 3x3 box filter; the window is truncated at the border.
RasterGrid box_blur(const RasterGrid& in) {
    RasterGrid cur = in;
    for (int pass = 0; pass < 2; ++pass) {
        RasterGrid next = cur.like();
        for (int r = 0; r < cur.height(); ++r) {
            for (int c = 0; c < cur.width(); ++c) {
                double sum = 0.0;
                int n = 0;
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        const int rr = r + dr, cc = c + dc;
                        if (rr < 0 || cc < 0 || rr >= cur.height() || cc >= cur.width()) continue;
                        sum += cur.at(cc, rr);
                        ++n;
                    }
                }
                next.at(c, r) = static_cast<float>(sum / n);
            }
        }
        cur = std::move(next);
    }
    return cur;
}

}  // namespace

GridSpec synth_extent(int n_base_patches, int size, const SynthOptions& options) {
    if (n_base_patches < 1 || size < 1) throw ConfigError("synthetic area needs n_base_patches >= 1 and size >= 1");
    const int rows = std::max(1, static_cast<int>(std::floor(std::sqrt(n_base_patches / 2.0))));
    const int cols = (n_base_patches + rows - 1) / rows;
    const int stride = std::max(1, static_cast<int>(std::lround(size * (1.0 - options.overlap))));
    GridSpec spec;
    spec.width = (cols - 1) * stride + size;
    spec.height = (rows - 1) * stride + size;
    spec.pixel_size = options.pixel_size;
    spec.origin_x = 1000.0;
    spec.origin_y = 1000.0 + spec.height * spec.pixel_size;
    return spec;
}

SynthArea synth_area(std::uint64_t seed, int n_base_patches, int size, const SynthOptions& options) {
    SynthArea area;
    area.spec = synth_extent(n_base_patches, size, options);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const double patch_areas =
        static_cast<double>(area.spec.width) * area.spec.height / (static_cast<double>(size) * size);
    const int n_roads = std::max(1, static_cast<int>(std::lround(options.road_density * patch_areas)));
    std::vector<RoadSegment> visible;
    auto add_road = [&] {
        RoadSegment road = random_road(rng, area.spec);
        if (unit(rng) >= options.hidden_fraction) visible.push_back(road);
        area.roads.push_back(std::move(road));
    };
    for (int i = 0; i < n_roads; ++i) add_road();
    // Short roads can leave a sparse area; top up until at least 2% of cells are road.
    area.labels = rasterize_labels(area.roads, area.spec);
    for (int extra = 0; options.road_density > 0.0 && extra < 4 * n_roads + 8; ++extra) {
        double ones = 0.0;
        for (float v : area.labels.data()) ones += v;
        if (ones >= kMinRoadFraction * static_cast<double>(area.labels.size())) break;
        add_road();
        area.labels = rasterize_labels(area.roads, area.spec);
    }
    for (int i = 0; i < options.distractors; ++i) {
        RoadSegment line = random_road(rng, area.spec);
        line.fclass = "residential";
        visible.push_back(std::move(line));
    }

    const RasterGrid appearance = box_blur(rasterize_labels(visible, area.spec));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t b = 0; b < kBandGain.size(); ++b) {
        RasterGrid band = appearance.like();
        auto src = appearance.data();
        auto dst = band.data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = static_cast<float>(kBandOffset[b] + kBandGain[b] * src[i] + options.noise_sigma * noise(rng));
        }
        area.satellite.push_back(std::move(band));
    }

    std::poisson_distribution<int> count(options.gps_rate);
    const double ps = area.spec.pixel_size;
    std::uint64_t traj = 0;
    for (int r = 0; r < area.labels.height(); ++r) {
        for (int c = 0; c < area.labels.width(); ++c) {
            if (area.labels.at(c, r) == 0.0f) continue;
            const bool dropped = unit(rng) < options.gps_dropout;
            const int k = count(rng);
            if (dropped) continue;
            for (int i = 0; i < k; ++i) {
                // Inset by a small margin so points never sit on a cell boundary.
                const double x = area.spec.origin_x + (c + 0.01 + 0.98 * unit(rng)) * ps;
                const double y = area.spec.origin_y - (r + 0.01 + 0.98 * unit(rng)) * ps;
                area.points.push_back({std::to_string(traj), static_cast<double>(i), x, y});
            }
            ++traj;
        }
    }
    return area;
}

SynthArea synth_dataset(std::uint64_t seed, int n_base_patches, int size, const std::filesystem::path& dir,
                        const SynthOptions& options) {
    SynthArea area = synth_area(seed, n_base_patches, size, options);
    std::filesystem::create_directories(dir);
    write_grid_spec(area.spec, dir / "spec.json");
    {
        std::ofstream out(dir / "roads.csv", std::ios::trunc | std::ios::binary);
        out << "fclass,wkt\n";
        for (const auto& road : area.roads) out << road.fclass << ",\"" << to_wkt(road) << "\"\n";
        if (!out) throw DataError("cannot write " + (dir / "roads.csv").string());
    }
    {
        std::ofstream out(dir / "gps.csv", std::ios::trunc | std::ios::binary);
        out << "traj_id,t,x,y\n";
        for (const auto& p : area.points) {
            out << p.traj_id << ',' << format_number(p.t) << ',' << format_number(p.x) << ',' << format_number(p.y)
                << '\n';
        }
        if (!out) throw DataError("cannot write " + (dir / "gps.csv").string());
    }
    nlohmann::json sources;
    sources["satellite"] = nlohmann::json::array();
    for (std::size_t b = 0; b < area.satellite.size(); ++b) {
        const std::string name = "sat_b" + std::to_string(b) + ".grd";
        write_grd(area.satellite[b], dir / name);
        sources["satellite"].push_back(name);
    }
    sources["gps"] = "gps.csv";
    sources["labels"] = "roads.csv";
    sources["spec"] = "spec.json";
    std::ofstream(dir / "area.json", std::ios::trunc) << sources.dump(1) << '\n';
    return area;
}

}  // namespace roadfuse
