#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "roadfuse/tensor.hpp"

namespace roadfuse {

/// Row-major binary mask.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height, std::uint8_t fill = 0);
    BinaryMask(int width, int height, std::vector<std::uint8_t> bits);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return bits_.size(); }

    std::uint8_t at(int col, int row) const { return bits_[static_cast<std::size_t>(row) * width_ + col]; }
    void set(int col, int row, bool v) { bits_[static_cast<std::size_t>(row) * width_ + col] = v ? 1 : 0; }
    std::span<const std::uint8_t> bits() const noexcept { return bits_; }

    std::size_t count() const noexcept;
    bool empty_mask() const noexcept { return count() == 0; }

    bool operator==(const BinaryMask&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> bits_;
};

inline constexpr double kDefaultThreshold = 0.5;

// One mask per batch item from channel 0; a pixel is set iff prob >= tau.
template <class T>
std::vector<BinaryMask> binarize(const Tensor<T>& prob, double tau = kDefaultThreshold);

// TP / (TP + FP + FN); 1.0 when both masks are empty.
double iou(const BinaryMask& pred, const BinaryMask& gt);

// Mask pixels within Euclidean distance d (pixel centers) of the complement.
// Pixels beyond the image border count as complement.
BinaryMask boundary_band(const BinaryMask& mask, int d);

double boundary_iou(const BinaryMask& pred, const BinaryMask& gt, int d);

// max(1, round(0.02 * image diagonal))
int default_boundary_distance(int width, int height);

double mean_metric(std::span<const double> values);

struct EvalRow {
    std::string experiment;
    std::string train_area;
    std::string test_area;
    std::string model;
    std::string stage;
    std::string op;
    std::string loss;
    double miou = 0.0;
    double mboundary_iou = 0.0;
    std::size_t n_samples = 0;
    int boundary_d = 0;

    bool operator==(const EvalRow&) const = default;
};

std::string eval_csv_header();
std::string to_csv(const EvalRow& row);
void write_eval_csv(std::span<const EvalRow> rows, const std::filesystem::path& path);
std::vector<EvalRow> read_eval_csv(const std::filesystem::path& path);

// Shortest round-trip decimal text for a double.
std::string format_number(double v);

}  // namespace roadfuse
