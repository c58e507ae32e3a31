#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "surgpis/core/tensor.hpp"

namespace surgpis {

// Reverse-mode automatic differentiation over Tensor values. A Tape owns a
// growing list of nodes recorded in forward order; backward() walks the list
// in reverse. Ops are member functions so that recording stays explicit.
struct TapeNode {
  Tensor value;
  Tensor grad;  // allocated only when requires_grad
  bool requires_grad = false;
  std::function<void()> backprop;  // pulls from this->grad into parents

  void ensure_grad() {
    if (grad.data.size() == 0) {
      grad = Tensor::zeros(value.shape);
    }
  }
};

using Var = TapeNode*;

class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  // elementwise
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var log_clamped(Var a, double eps);
  Var powc(Var a, double p);  // elementwise a^p, requires a >= 0

  // linear algebra on rank-2 tensors
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var add_row_broadcast(Var a, Var bias);     // a[m,n] + bias[n] per row
  Var row_softmax(Var a);                     // softmax along dim 1
  Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-6);

  // shape ops
  Var gather_rows(Var a, std::vector<int> rows);
  Var slice_cols(Var a, int c0, int n);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var reshape(Var a, std::vector<int> shape);
  Var transpose2d(Var a);

  // reductions / indexing
  Var sum_all(Var a);
  Var mean_all(Var a);
  Var pick(Var a, long flat_index);

  // spatial ops on [C,H,W] tensors
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  Var upsample_bilinear2x(Var x);

  void backward(Var root);

  size_t size() const { return nodes_.size(); }

 private:
  Var make(Tensor value, bool requires_grad);
  std::vector<std::unique_ptr<TapeNode>> nodes_;
};

}  // namespace surgpis
