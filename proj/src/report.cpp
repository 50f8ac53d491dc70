#include "roadfuse/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "roadfuse/error.hpp"

namespace roadfuse {

namespace {

std::string text_of(const nlohmann::json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
}

void add_unique(std::vector<std::string>& list, const std::string& v) {
    if (std::find(list.begin(), list.end(), v) == list.end()) list.push_back(v);
}

std::string fixed3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

}  // namespace

std::vector<Benchmark> benchmarks_from_json(const nlohmann::json& j) {
    std::vector<Benchmark> out;
    try {
        for (const auto& b : j) {
            Benchmark x;
            x.label = b.at("label").get<std::string>();
            x.iou = text_of(b.at("iou"));
            if (b.contains("boundary_iou")) x.boundary_iou = text_of(b.at("boundary_iou"));
            x.source = b.value("source", std::string());
            out.push_back(std::move(x));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("benchmarks: ") + e.what());
    }
    return out;
}

std::string variant_of(const EvalRow& row) {
    if (row.stage == "none" || row.stage == "early") return row.stage;
    return row.stage + "/" + row.op;
}

Report emit_report(std::span<const EvalRow> rows, ReportLayout layout, std::span<const Benchmark> benchmarks) {
    ReportLayout seen;
    for (const auto& r : rows) {
        add_unique(seen.train_areas, r.train_area);
        add_unique(seen.models, r.model);
        add_unique(seen.test_areas, r.test_area);
        add_unique(seen.variants, variant_of(r));
        add_unique(seen.losses, r.loss);
    }
    if (layout.train_areas.empty()) layout.train_areas = seen.train_areas;
    if (layout.models.empty()) layout.models = seen.models;
    if (layout.test_areas.empty()) layout.test_areas = seen.test_areas;
    if (layout.variants.empty()) layout.variants = seen.variants;
    if (layout.losses.empty()) layout.losses = seen.losses;

    using Key = std::tuple<std::string, std::string, std::string, std::string, std::string>;
    std::map<Key, const EvalRow*> cells;
    for (const auto& r : rows) {
        const Key key{r.train_area, r.model, r.test_area, variant_of(r), r.loss};
        if (!cells.emplace(key, &r).second) {
            throw DataError("report cell filled twice: train=" + r.train_area + " model=" + r.model +
                            " test=" + r.test_area + " variant=" + variant_of(r) + " loss=" + r.loss);
        }
    }

    struct Column {
        std::string variant, loss;
        bool boundary;
    };
    std::vector<Column> columns;
    for (const auto& v : layout.variants) {
        for (bool boundary : {false, true}) {
            for (const auto& l : layout.losses) columns.push_back({v, l, boundary});
        }
    }
    struct Line {
        std::string train, model, test;
        std::vector<double> values;
    };
    std::vector<Line> lines;
    std::vector<std::string> missing;
    for (const auto& tr : layout.train_areas) {
        for (const auto& m : layout.models) {
            for (const auto& te : layout.test_areas) {
                Line line{tr, m, te, {}};
                for (const auto& col : columns) {
                    auto it = cells.find(Key{tr, m, te, col.variant, col.loss});
                    if (it == cells.end()) {
                        if (!col.boundary) {
                            missing.push_back("train=" + tr + " model=" + m + " test=" + te +
                                              " variant=" + col.variant + " loss=" + col.loss);
                        }
                        line.values.push_back(0.0);
                        continue;
                    }
                    line.values.push_back(col.boundary ? it->second->mboundary_iou : it->second->miou);
                }
                lines.push_back(std::move(line));
            }
        }
    }
    if (!missing.empty()) {
        std::string msg = "report is missing " + std::to_string(missing.size()) + " cell(s):";
        for (const auto& m : missing) msg += "\n  " + m;
        throw DataError(msg);
    }

    auto column_name = [](const Column& c) {
        return c.variant + " " + (c.boundary ? "mBoundary-IoU" : "mIoU") + " " + c.loss;
    };

    std::ostringstream csv;
    csv << "train_area,model,test_area";
    for (const auto& c : columns) csv << ',' << column_name(c);
    csv << '\n';
    for (const auto& l : lines) {
        csv << l.train << ',' << l.model << ',' << l.test;
        for (double v : l.values) csv << ',' << format_number(v);
        csv << '\n';
    }

    // Column maxima are marked within each train-area block.
    std::ostringstream md;
    md << "| Train area | Model | Test area |";
    for (const auto& c : columns) md << ' ' << column_name(c) << " |";
    md << "\n|---|---|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) md << "---|";
    md << '\n';
    const std::size_t block = layout.models.size() * layout.test_areas.size();
    for (std::size_t b0 = 0; b0 < lines.size(); b0 += block) {
        std::vector<double> best(columns.size(), -1.0);
        for (std::size_t i = b0; i < b0 + block; ++i) {
            for (std::size_t c = 0; c < columns.size(); ++c) best[c] = std::max(best[c], lines[i].values[c]);
        }
        for (std::size_t i = b0; i < b0 + block; ++i) {
            const auto& l = lines[i];
            md << "| " << l.train << " | " << l.model << " | " << l.test << " |";
            for (std::size_t c = 0; c < columns.size(); ++c) {
                const std::string v = fixed3(l.values[c]);
                md << ' ' << (l.values[c] == best[c] ? "**" + v + "**" : v) << " |";
            }
            md << '\n';
        }
    }
    if (!benchmarks.empty()) {
        md << "\n## Benchmark comparison\n\n";
        for (const auto& b : benchmarks) {
            md << "- " << b.label << ", IoU " << b.iou;
            if (b.boundary_iou != "-") md << ", mBoundary-IoU " << b.boundary_iou;
            if (!b.source.empty()) md << " (" << b.source << ")";
            md << '\n';
        }
    }
    return {std::move(layout), csv.str(), md.str()};
}

void write_report(const Report& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir / "report.csv", std::ios::trunc | std::ios::binary);
    std::ofstream md(dir / "report.md", std::ios::trunc | std::ios::binary);
    if (!csv || !md) throw DataError("cannot write report files in " + dir.string());
    csv << report.csv;
    md << report.markdown;
}

}  // namespace roadfuse
