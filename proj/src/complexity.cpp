#include "roadfuse/complexity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "roadfuse/error.hpp"
#include "roadfuse/metrics.hpp"
#include "roadfuse/parallel.hpp"

namespace roadfuse {

int quantize(double v, int levels) {
    const double c = std::clamp(v, 0.0, 1.0);
    return std::min(levels - 1, static_cast<int>(std::floor(c * levels)));
}

double shannon_entropy(const GrayPatch& patch, int levels) {
    if (patch.values.empty()) throw DataError("entropy of an empty patch");
    if (levels < 1) throw ConfigError("entropy needs at least one level");
    std::vector<std::size_t> hist(static_cast<std::size_t>(levels), 0);
    for (double v : patch.values) ++hist[static_cast<std::size_t>(quantize(v, levels))];
    const double n = static_cast<double>(patch.values.size());
    double h = 0.0;
    for (std::size_t c : hist) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log2(p);
    }
    return h;
}

Glcm glcm(const GrayPatch& patch, int levels, const std::vector<GlcmOffset>& offsets) {
    if (levels < 1) throw ConfigError("GLCM needs at least one level");
    if (patch.width <= 0 || patch.height <= 0 ||
        patch.values.size() != static_cast<std::size_t>(patch.width) * patch.height) {
        throw ShapeError("GLCM patch has inconsistent dimensions");
    }
    std::vector<int> q(patch.values.size());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = quantize(patch.values[i], levels);
    Glcm m{levels, std::vector<double>(static_cast<std::size_t>(levels) * levels, 0.0)};
    std::size_t pairs = 0;
    for (const auto& [dr, dc] : offsets) {
        for (int r = 0; r < patch.height; ++r) {
            const int r2 = r + dr;
            if (r2 < 0 || r2 >= patch.height) continue;
            for (int c = 0; c < patch.width; ++c) {
                const int c2 = c + dc;
                if (c2 < 0 || c2 >= patch.width) continue;
                const int a = q[static_cast<std::size_t>(r) * patch.width + c];
                const int b = q[static_cast<std::size_t>(r2) * patch.width + c2];
                m.p[static_cast<std::size_t>(a) * levels + b] += 1.0;
                m.p[static_cast<std::size_t>(b) * levels + a] += 1.0;
                ++pairs;
            }
        }
    }
    if (pairs == 0) throw ShapeError("patch too small: no pixel pair for any GLCM offset");
    const double total = 2.0 * static_cast<double>(pairs);
    for (double& v : m.p) v /= total;
    return m;
}

double homogeneity(const Glcm& m) {
    double sum = 0.0, h = 0.0;
    for (int i = 0; i < m.levels; ++i) {
        for (int j = 0; j < m.levels; ++j) {
            const double p = m.at(i, j);
            sum += p;
            h += p / (1.0 + std::abs(i - j));
        }
    }
    if (std::abs(sum - 1.0) > 1e-6) throw DataError("GLCM is not normalized (sum " + format_number(sum) + ")");
    return h;
}

GrayPatch grayscale(const Sample& sample) {
    const auto& s = sample.satellite;
    if (s.c() < 3) throw DataError("grayscale needs three satellite bands, got " + std::to_string(s.c()));
    GrayPatch g{s.w(), s.h(), std::vector<double>(static_cast<std::size_t>(s.w()) * s.h())};
    for (int r = 0; r < s.h(); ++r) {
        for (int c = 0; c < s.w(); ++c) {
            const double sum = double(s.at(0, 0, r, c)) + double(s.at(0, 1, r, c)) + double(s.at(0, 2, r, c));
            g.values[static_cast<std::size_t>(r) * s.w() + c] = sum / 3.0;
        }
    }
    return g;
}

std::vector<AreaSummary> summarize(std::span<const ComplexityRow> rows) {
    std::vector<AreaSummary> out;
    std::map<std::string, std::size_t> slot;
    for (const auto& r : rows) {
        auto [it, fresh] = slot.emplace(r.area, out.size());
        if (fresh) out.push_back(AreaSummary{r.area});
        auto& s = out[it->second];
        ++s.n;
        s.entropy_mean += r.entropy;
        s.homogeneity_mean += r.homogeneity;
    }
    for (auto& s : out) {
        s.entropy_mean /= static_cast<double>(s.n);
        s.homogeneity_mean /= static_cast<double>(s.n);
    }
    for (const auto& r : rows) {
        auto& s = out[slot[r.area]];
        s.entropy_var += (r.entropy - s.entropy_mean) * (r.entropy - s.entropy_mean);
        s.homogeneity_var += (r.homogeneity - s.homogeneity_mean) * (r.homogeneity - s.homogeneity_mean);
    }
    for (auto& s : out) {
        s.entropy_var /= static_cast<double>(s.n);
        s.homogeneity_var /= static_cast<double>(s.n);
    }
    return out;
}

ComplexityReport area_report(const std::vector<const PatchDataset*>& datasets, const ComplexityOptions& options) {
    ComplexityReport report;
    for (const auto* ds : datasets) {
        const auto& records = ds->manifest().records;
        std::vector<ComplexityRow> rows(records.size());
        parallel_for(static_cast<int>(records.size()), [&](int idx) {
            const auto i = static_cast<std::size_t>(idx);
            const auto gray = grayscale(ds->sample(records[i]));
            rows[i] = {records[i].patch_id, records[i].area, shannon_entropy(gray, options.entropy_levels),
                       homogeneity(glcm(gray, options.glcm_levels))};
        });
        report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    }
    report.summaries = summarize(report.rows);
    return report;
}

void write_complexity_csv(std::span<const ComplexityRow> rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "patch_id,area,entropy,homogeneity\n";
    for (const auto& r : rows) {
        out << r.patch_id << ',' << r.area << ',' << format_number(r.entropy) << ',' << format_number(r.homogeneity)
            << '\n';
    }
}

void write_complexity_histogram(std::span<const ComplexityRow> rows, const ComplexityOptions& options,
                                const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "area,metric,bin_lo,bin_hi,count\n";
    const int bins = std::max(1, options.histogram_bins);
    const double emax = std::log2(static_cast<double>(options.entropy_levels));
    for (const auto& s : summarize(rows)) {
        for (int metric = 0; metric < 2; ++metric) {
            const double hi = metric == 0 ? emax : 1.0;
            std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
            for (const auto& r : rows) {
                if (r.area != s.area) continue;
                const double v = metric == 0 ? r.entropy : r.homogeneity;
                const int b = std::clamp(static_cast<int>(std::floor(v / hi * bins)), 0, bins - 1);
                ++counts[static_cast<std::size_t>(b)];
            }
            for (int b = 0; b < bins; ++b) {
                out << s.area << ',' << (metric == 0 ? "entropy" : "homogeneity") << ','
                    << format_number(hi * b / bins) << ',' << format_number(hi * (b + 1) / bins) << ','
                    << counts[static_cast<std::size_t>(b)] << '\n';
            }
        }
    }
}

nlohmann::json to_json(std::span<const AreaSummary> summaries) {
    nlohmann::json areas = nlohmann::json::object();
    for (const auto& s : summaries) {
        areas[s.area] = {{"n", s.n},
                         {"entropy_mean", s.entropy_mean},
                         {"entropy_var", s.entropy_var},
                         {"homogeneity_mean", s.homogeneity_mean},
                         {"homogeneity_var", s.homogeneity_var}};
    }
    return areas;
}

}  // namespace roadfuse
