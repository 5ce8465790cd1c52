#include "nclens/tensor.hpp"

#include "nclens/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nclens {

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        std::ostringstream msg;
        msg << "matrix data length " << data_.size() << " does not match " << rows_ << "x"
            << cols_;
        throw ShapeError(msg.str());
    }
    require_finite(data_, "matrix");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        std::ostringstream msg;
        msg << "matmul: " << a.rows() << "x" << a.cols() << " times " << b.rows() << "x"
            << b.cols();
        throw ShapeError(msg.str());
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            auto orow = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    require_finite(out.data(), "matmul output");
    return out;
}

Vector matvec(const Matrix& w, std::span<const double> x) {
    if (w.cols() != x.size()) {
        std::ostringstream msg;
        msg << "matvec: " << w.rows() << "x" << w.cols() << " times vector of dim " << x.size();
        throw ShapeError(msg.str());
    }
    Vector out(w.rows());
    for (std::size_t r = 0; r < w.rows(); ++r) out[r] = dot(w.row(r), x);
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

Vector softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ArgumentError("softmax temperature must be a positive finite number");
    }
    if (logits.empty()) throw ArgumentError("softmax of empty vector");
    require_finite(logits, "softmax logits");
    const double max_logit = *std::max_element(logits.begin(), logits.end());
    Vector out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((logits[i] - max_logit) / temperature);
        total += out[i];
    }
    for (double& p : out) p /= total;
    return out;
}

Vector normalize(std::span<const double> v, std::span<const double> gain, double eps,
                 NormKind kind) {
    if (gain.size() != v.size()) {
        std::ostringstream msg;
        msg << "normalize: gain dim " << gain.size() << " vs input dim " << v.size();
        throw ShapeError(msg.str());
    }
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    if (kind == NormKind::layernorm) {
        for (double x : v) mean += x;
        mean /= n;
    }
    double sq = 0.0;
    for (double x : v) sq += (x - mean) * (x - mean);
    const double denom = std::sqrt(sq / n + eps);
    Vector out(v.size(), 0.0);
    if (denom == 0.0) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / denom * gain[i];
    return out;
}

void CompensatedSum::add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
        compensation_ += (sum_ - t) + x;
    } else {
        compensation_ += (x - t) + sum_;
    }
    sum_ = t;
}

} // namespace nclens
