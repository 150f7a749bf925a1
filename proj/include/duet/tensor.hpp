#pragma once
// Dense row-major double tensor. The leading dimension is "rows"; every
// trailing dimension is flattened into "cols" for 2-D views.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace duet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.empty() ? 0 : data.size() / shape[0]; }
    std::size_t dim() const { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }
    std::span<const double> span() const { return data; }

    bool all_finite() const;
    double item() const;
    void fill(double v);
};

// Transposed copy of a 2-D view.
Tensor transpose2d(const Tensor& t);

}  // namespace duet
