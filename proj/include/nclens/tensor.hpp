#pragma once

// Dense numeric kernels for the forward engine. Everything is stored and
// accumulated in double precision, row-major, with explicit shape checks.

#include <cstddef>
#include <span>
#include <vector>

namespace nclens {

using Vector = std::vector<double>;

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    // Throws ShapeError if data.size() != rows*cols, NumericError on non-finite entries.
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

    std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

enum class NormKind { rms, layernorm };

Matrix matmul(const Matrix& a, const Matrix& b);

// y = W x, with W stored as (out x in).
Vector matvec(const Matrix& w, std::span<const double> x);

// Numerically stable softmax of logits / temperature.
Vector softmax(std::span<const double> logits, double temperature = 1.0);

// rms:       v / sqrt(mean(v^2) + eps) * gain
// layernorm: (v - mean) / sqrt(var + eps) * gain
// A zero denominator yields a zero vector.
Vector normalize(std::span<const double> v, std::span<const double> gain, double eps,
                 NormKind kind);

double dot(std::span<const double> a, std::span<const double> b);

void require_finite(std::span<const double> v, const char* what);

// Neumaier compensated summation.
class CompensatedSum {
public:
    void add(double x) noexcept;
    double value() const noexcept { return sum_ + compensation_; }

private:
    double sum_ = 0.0;
    double compensation_ = 0.0;
};

} // namespace nclens
