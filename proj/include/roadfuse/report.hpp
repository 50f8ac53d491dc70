#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "roadfuse/metrics.hpp"

namespace roadfuse {

// External result quoted verbatim in the report (numbers kept as given text).
struct Benchmark {
    std::string label;
    std::string iou;
    std::string boundary_iou = "-";
    std::string source;
};

std::vector<Benchmark> benchmarks_from_json(const nlohmann::json& j);

/**
 * Rows are (train area, model, test area); columns are (fusion variant,
 * metric, loss). Empty lists are filled from the rows in order of first
 * appearance.
 */
struct ReportLayout {
    std::vector<std::string> train_areas;
    std::vector<std::string> models;
    std::vector<std::string> test_areas;
    std::vector<std::string> variants;  // "none", "early", "late1/concatenate", ...
    std::vector<std::string> losses;
};

// Fusion variant of a row: the stage, plus the operator for late stages.
std::string variant_of(const EvalRow& row);

struct Report {
    ReportLayout layout;
    std::string csv;
    std::string markdown;
};

// Throws DataError naming every missing cell, or a cell filled twice.
Report emit_report(std::span<const EvalRow> rows, ReportLayout layout = {},
                   std::span<const Benchmark> benchmarks = {});

// report.csv and report.md in dir.
void write_report(const Report& report, const std::filesystem::path& dir);

}  // namespace roadfuse
