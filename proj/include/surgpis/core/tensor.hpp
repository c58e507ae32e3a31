#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

namespace surgpis {

// Dense row-major tensor of doubles. Shapes are small vectors of extents;
// data is flattened with the last dimension fastest.
struct Tensor {
  std::vector<int> shape;
  Eigen::ArrayXd data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data = Eigen::ArrayXd::Zero(numel_of(shape));
  }
  Tensor(std::vector<int> s, Eigen::ArrayXd d) : shape(std::move(s)), data(std::move(d)) {
    assert(static_cast<Eigen::Index>(numel_of(shape)) == data.size());
  }

  static long numel_of(const std::vector<int>& s) {
    long n = 1;
    for (int e : s) n *= e;
    return n;
  }
  long numel() const { return data.size(); }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  double& operator[](long i) { return data[i]; }
  double operator[](long i) const { return data[i]; }

  // 2-d accessors for matrix-shaped tensors
  double& at(int r, int c) { return data[static_cast<long>(r) * shape[1] + c]; }
  double at(int r, int c) const { return data[static_cast<long>(r) * shape[1] + c]; }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }
  static Tensor scalar(double v) { return full({1}, v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mat() {
    assert(rank() == 2);
    return {data.data(), shape[0], shape[1]};
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mat()
      const {
    assert(rank() == 2);
    return {data.data(), shape[0], shape[1]};
  }
};

}  // namespace surgpis
