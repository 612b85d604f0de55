#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "sbg/errors.hpp"

namespace sbg {

// Dense row-major matrix. Values are held in double; on-disk formats
// (checkpoints, caches, embeddings) serialize as float32.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Mat(int r, int c, double fill)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    static Mat zeros(int r, int c) { return Mat(r, c); }
    static Mat full(int r, int c, double v) { return Mat(r, c, v); }
    static Mat scalar(double v) { return Mat(1, 1, v); }

    static Mat row_vector(std::initializer_list<double> vals) {
        Mat m(1, static_cast<int>(vals.size()));
        int i = 0;
        for (double v : vals) m.data[i++] = v;
        return m;
    }
    static Mat col_vector(std::initializer_list<double> vals) {
        Mat m(static_cast<int>(vals.size()), 1);
        int i = 0;
        for (double v : vals) m.data[i++] = v;
        return m;
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }
};

inline void require_shape(const Mat& m, int r, int c, const char* what) {
    if (m.rows != r || m.cols != c)
        throw ShapeError(std::string(what) + ": expected " + std::to_string(r) + "x" +
                         std::to_string(c) + ", got " + m.shape_str());
}

}  // namespace sbg
