#include "roadfuse/metrics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace roadfuse {

BinaryMask::BinaryMask(int width, int height, std::uint8_t fill)
    : width_(width), height_(height), bits_(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0), fill) {
    if (width <= 0 || height <= 0) throw ShapeError("mask needs positive dimensions");
}

BinaryMask::BinaryMask(int width, int height, std::vector<std::uint8_t> bits)
    : width_(width), height_(height), bits_(std::move(bits)) {
    if (width <= 0 || height <= 0) throw ShapeError("mask needs positive dimensions");
    if (bits_.size() != static_cast<std::size_t>(width) * height) throw ShapeError("mask length mismatch");
    for (auto& b : bits_) b = b ? 1 : 0;
}

std::size_t BinaryMask::count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

template <class T>
std::vector<BinaryMask> binarize(const Tensor<T>& prob, double tau) {
    std::vector<BinaryMask> masks;
    masks.reserve(static_cast<std::size_t>(prob.n()));
    for (int n = 0; n < prob.n(); ++n) {
        BinaryMask m(prob.w(), prob.h());
        for (int r = 0; r < prob.h(); ++r) {
            for (int c = 0; c < prob.w(); ++c) m.set(c, r, static_cast<double>(prob.at(n, 0, r, c)) >= tau);
        }
        masks.push_back(std::move(m));
    }
    return masks;
}

template std::vector<BinaryMask> binarize<float>(const Tensor<float>&, double);
template std::vector<BinaryMask> binarize<double>(const Tensor<double>&, double);

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b) {
    if (a.width() != b.width() || a.height() != b.height()) {
        throw ShapeError("mask dimensions differ: " + std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                         " vs " + std::to_string(b.width()) + "x" + std::to_string(b.height()));
    }
}

// One-dimensional squared distance transform (lower envelope of parabolas).
void edt_1d(std::span<const double> f, std::span<double> d, std::vector<int>& v, std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
        while (s <= z[k]) {
            --k;
            s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    if (k < 0) {
        std::fill(d.begin(), d.end(), inf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double diff = q - v[j];
        d[q] = diff * diff + f[v[j]];
    }
}

}  // namespace

double iou(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_dims(pred, gt);
    std::size_t tp = 0, uni = 0;
    auto p = pred.bits();
    auto g = gt.bits();
    for (std::size_t i = 0; i < p.size(); ++i) {
        tp += (p[i] & g[i]);
        uni += (p[i] | g[i]);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(tp) / static_cast<double>(uni);
}

BinaryMask boundary_band(const BinaryMask& mask, int d) {
    if (d < 1) throw ConfigError("boundary distance d must be >= 1");
    // Squared distance of every pixel to the nearest background pixel, with
    // a one-pixel background frame standing in for everything off-image.
    const int w = mask.width() + 2, h = mask.height() + 2;
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> grid(static_cast<std::size_t>(w) * h, 0.0);
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            if (mask.at(c, r)) grid[static_cast<std::size_t>(r + 1) * w + (c + 1)] = inf;
        }
    }
    std::vector<int> v;
    std::vector<double> z, f, out;
    f.resize(static_cast<std::size_t>(std::max(w, h)));
    out.resize(f.size());
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) f[r] = grid[static_cast<std::size_t>(r) * w + c];
        edt_1d(std::span<const double>(f.data(), h), std::span<double>(out.data(), h), v, z);
        for (int r = 0; r < h; ++r) grid[static_cast<std::size_t>(r) * w + c] = out[r];
    }
    for (int r = 0; r < h; ++r) {
        std::span<double> row(grid.data() + static_cast<std::size_t>(r) * w, w);
        std::copy(row.begin(), row.end(), f.begin());
        edt_1d(std::span<const double>(f.data(), w), std::span<double>(out.data(), w), v, z);
        std::copy(out.begin(), out.begin() + w, row.begin());
    }
    const double limit = static_cast<double>(d) * d;
    BinaryMask band(mask.width(), mask.height());
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            if (mask.at(c, r) && grid[static_cast<std::size_t>(r + 1) * w + (c + 1)] <= limit) band.set(c, r, true);
        }
    }
    return band;
}

double boundary_iou(const BinaryMask& pred, const BinaryMask& gt, int d) {
    require_same_dims(pred, gt);
    return iou(boundary_band(pred, d), boundary_band(gt, d));
}

int default_boundary_distance(int width, int height) {
    const double diag = std::sqrt(static_cast<double>(width) * width + static_cast<double>(height) * height);
    return std::max(1, static_cast<int>(std::lround(0.02 * diag)));
}

double mean_metric(std::span<const double> values) {
    if (values.empty()) throw DataError("mean of an empty metric list");
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc / static_cast<double>(values.size());
}

std::string format_number(double v) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

std::string eval_csv_header() {
    return "experiment,train_area,test_area,model,stage,operator,loss,miou,mboundary_iou,n_samples,boundary_d";
}

std::string to_csv(const EvalRow& r) {
    std::ostringstream os;
    os << r.experiment << ',' << r.train_area << ',' << r.test_area << ',' << r.model << ',' << r.stage << ','
       << r.op << ',' << r.loss << ',' << format_number(r.miou) << ',' << format_number(r.mboundary_iou) << ','
       << r.n_samples << ',' << r.boundary_d;
    return os.str();
}

void write_eval_csv(std::span<const EvalRow> rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << eval_csv_header() << '\n';
    for (const auto& r : rows) out << to_csv(r) << '\n';
}

std::vector<EvalRow> read_eval_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != eval_csv_header()) throw DataError(path.string() + ": bad EvalRow header");
    std::vector<EvalRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 11) throw DataError(path.string() + ": EvalRow needs 11 columns");
        EvalRow r{f[0], f[1], f[2], f[3], f[4], f[5], f[6], std::stod(f[7]), std::stod(f[8]),
                  static_cast<std::size_t>(std::stoull(f[9])), std::stoi(f[10])};
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace roadfuse
