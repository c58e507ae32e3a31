#include "surgpis/core/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace surgpis {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

CMatMap as_mat(const Tensor& t) { return {t.data.data(), t.shape[0], t.shape[1]}; }
MatMap as_mat(Tensor& t) { return {t.data.data(), t.shape[0], t.shape[1]}; }
}  // namespace

Var Tape::make(Tensor value, bool requires_grad) {
  nodes_.push_back(std::make_unique<TapeNode>());
  TapeNode* n = nodes_.back().get();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return n;
}

Var Tape::leaf(Tensor value, bool requires_grad) { return make(std::move(value), requires_grad); }

Var Tape::add(Var a, Var b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Var out = make(Tensor(a->value.shape, a->value.data + b->value.data),
                 a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, b, out] {
      if (a->requires_grad) a->grad.data += out->grad.data;
      if (b->requires_grad) b->grad.data += out->grad.data;
    };
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
  Var out = make(Tensor(a->value.shape, a->value.data - b->value.data),
                 a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, b, out] {
      if (a->requires_grad) a->grad.data += out->grad.data;
      if (b->requires_grad) b->grad.data -= out->grad.data;
    };
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
  Var out = make(Tensor(a->value.shape, a->value.data * b->value.data),
                 a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, b, out] {
      if (a->requires_grad) a->grad.data += out->grad.data * b->value.data;
      if (b->requires_grad) b->grad.data += out->grad.data * a->value.data;
    };
  }
  return out;
}

Var Tape::div(Var a, Var b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("div: shape mismatch");
  Var out = make(Tensor(a->value.shape, a->value.data / b->value.data),
                 a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, b, out] {
      if (a->requires_grad) a->grad.data += out->grad.data / b->value.data;
      if (b->requires_grad)
        b->grad.data -= out->grad.data * a->value.data / (b->value.data * b->value.data);
    };
  }
  return out;
}

Var Tape::scale(Var a, double c) {
  Var out = make(Tensor(a->value.shape, a->value.data * c), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, c, out] { a->grad.data += out->grad.data * c; };
  }
  return out;
}

Var Tape::add_scalar(Var a, double c) {
  Var out = make(Tensor(a->value.shape, a->value.data + c), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out] { a->grad.data += out->grad.data; };
  }
  return out;
}

Var Tape::relu(Var a) {
  Var out = make(Tensor(a->value.shape, a->value.data.max(0.0)), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out] {
      a->grad.data += out->grad.data * (a->value.data > 0.0).cast<double>();
    };
  }
  return out;
}

Var Tape::sigmoid(Var a) {
  Eigen::ArrayXd s = 1.0 / (1.0 + (-a->value.data).exp());
  Var out = make(Tensor(a->value.shape, std::move(s)), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out] {
      a->grad.data += out->grad.data * out->value.data * (1.0 - out->value.data);
    };
  }
  return out;
}

Var Tape::log_clamped(Var a, double eps) {
  Eigen::ArrayXd clamped = a->value.data.max(eps);
  Var out = make(Tensor(a->value.shape, clamped.log()), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, eps, out] {
      a->grad.data +=
          out->grad.data * (a->value.data > eps).cast<double>() / a->value.data.max(eps);
    };
  }
  return out;
}

Var Tape::powc(Var a, double p) {
  if ((a->value.data < 0.0).any()) throw std::invalid_argument("powc: negative base");
  Var out = make(Tensor(a->value.shape, a->value.data.pow(p)), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, p, out] {
      a->grad.data += out->grad.data * p * a->value.data.max(1e-300).pow(p - 1.0);
    };
  }
  return out;
}

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  auto A = as_mat(a->value);
  auto B = as_mat(b->value);
  int m = trans_a ? a->value.shape[1] : a->value.shape[0];
  int k = trans_a ? a->value.shape[0] : a->value.shape[1];
  int k2 = trans_b ? b->value.shape[1] : b->value.shape[0];
  int n = trans_b ? b->value.shape[0] : b->value.shape[1];
  if (k != k2) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor y({m, n});
  {
    MatMap Y = as_mat(y);
    if (!trans_a && !trans_b)
      Y.noalias() = A * B;
    else if (trans_a && !trans_b)
      Y.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b)
      Y.noalias() = A * B.transpose();
    else
      Y.noalias() = A.transpose() * B.transpose();
  }
  Var out = make(std::move(y), a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, b, out, trans_a, trans_b] {
      auto A = as_mat(a->value);
      auto B = as_mat(b->value);
      auto dY = as_mat(out->grad);
      if (a->requires_grad) {
        MatMap dA = as_mat(a->grad);
        if (!trans_a) {
          if (!trans_b)
            dA.noalias() += dY * B.transpose();
          else
            dA.noalias() += dY * B;
        } else {
          if (!trans_b)
            dA.noalias() += B * dY.transpose();
          else
            dA.noalias() += B.transpose() * dY.transpose();
        }
      }
      if (b->requires_grad) {
        MatMap dB = as_mat(b->grad);
        if (!trans_b) {
          if (!trans_a)
            dB.noalias() += A.transpose() * dY;
          else
            dB.noalias() += A * dY;
        } else {
          if (!trans_a)
            dB.noalias() += dY.transpose() * A;
          else
            dB.noalias() += dY.transpose() * A.transpose();
        }
      }
    };
  }
  return out;
}

Var Tape::add_row_broadcast(Var a, Var bias) {
  int m = a->value.shape[0], n = a->value.shape[1];
  if (bias->value.numel() != n) throw std::invalid_argument("add_row_broadcast: bias size");
  Tensor y = a->value;
  {
    MatMap Y = as_mat(y);
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value.data.data(), n);
  }
  Var out = make(std::move(y), a->requires_grad || bias->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, bias, out, m, n] {
      if (a->requires_grad) a->grad.data += out->grad.data;
      if (bias->requires_grad) {
        auto dY = as_mat(out->grad);
        Eigen::Map<Eigen::RowVectorXd>(bias->grad.data.data(), n) += dY.colwise().sum();
      }
    };
  }
  return out;
}

Var Tape::row_softmax(Var a) {
  int m = a->value.shape[0], n = a->value.shape[1];
  Tensor y(a->value.shape);
  for (int r = 0; r < m; ++r) {
    auto row = a->value.data.segment(static_cast<long>(r) * n, n);
    double mx = row.maxCoeff();
    Eigen::ArrayXd e = (row - mx).exp();
    y.data.segment(static_cast<long>(r) * n, n) = e / e.sum();
  }
  Var out = make(std::move(y), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out, m, n] {
      for (int r = 0; r < m; ++r) {
        auto yv = out->value.data.segment(static_cast<long>(r) * n, n);
        auto dy = out->grad.data.segment(static_cast<long>(r) * n, n);
        double dot = (dy * yv).sum();
        a->grad.data.segment(static_cast<long>(r) * n, n) += yv * (dy - dot);
      }
    };
  }
  return out;
}

Var Tape::layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  int m = a->value.shape[0], n = a->value.shape[1];
  Tensor y(a->value.shape);
  Tensor xhat(a->value.shape);
  Eigen::ArrayXd inv_sigma(m);
  for (int r = 0; r < m; ++r) {
    auto row = a->value.data.segment(static_cast<long>(r) * n, n);
    double mu = row.mean();
    double var = (row - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    auto xh = (row - mu) * is;
    xhat.data.segment(static_cast<long>(r) * n, n) = xh;
    y.data.segment(static_cast<long>(r) * n, n) = xh * gamma->value.data + beta->value.data;
  }
  Var out = make(std::move(y), a->requires_grad || gamma->requires_grad || beta->requires_grad);
  if (out->requires_grad) {
    auto xh_keep = std::make_shared<Tensor>(std::move(xhat));
    auto is_keep = std::make_shared<Eigen::ArrayXd>(std::move(inv_sigma));
    out->backprop = [a, gamma, beta, out, xh_keep, is_keep, m, n] {
      for (int r = 0; r < m; ++r) {
        auto dy = out->grad.data.segment(static_cast<long>(r) * n, n);
        auto xh = xh_keep->data.segment(static_cast<long>(r) * n, n);
        if (beta->requires_grad) beta->grad.data += dy;
        if (gamma->requires_grad) gamma->grad.data += dy * xh;
        if (a->requires_grad) {
          Eigen::ArrayXd dxh = dy * gamma->value.data;
          double mean_dxh = dxh.mean();
          double mean_dxh_xh = (dxh * xh).mean();
          a->grad.data.segment(static_cast<long>(r) * n, n) +=
              (*is_keep)[r] * (dxh - mean_dxh - xh * mean_dxh_xh);
        }
      }
    };
  }
  return out;
}

Var Tape::gather_rows(Var a, std::vector<int> rows) {
  int n = a->value.shape[1];
  Tensor y({static_cast<int>(rows.size()), n});
  for (size_t r = 0; r < rows.size(); ++r)
    y.data.segment(static_cast<long>(r) * n, n) =
        a->value.data.segment(static_cast<long>(rows[r]) * n, n);
  Var out = make(std::move(y), a->requires_grad);
  if (out->requires_grad) {
    auto idx = std::make_shared<std::vector<int>>(std::move(rows));
    out->backprop = [a, out, idx, n] {
      for (size_t r = 0; r < idx->size(); ++r)
        a->grad.data.segment(static_cast<long>((*idx)[r]) * n, n) +=
            out->grad.data.segment(static_cast<long>(r) * n, n);
    };
  }
  return out;
}

Var Tape::slice_cols(Var a, int c0, int n) {
  int m = a->value.shape[0], w = a->value.shape[1];
  Tensor y({m, n});
  for (int r = 0; r < m; ++r)
    y.data.segment(static_cast<long>(r) * n, n) =
        a->value.data.segment(static_cast<long>(r) * w + c0, n);
  Var out = make(std::move(y), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out, c0, n, m, w] {
      for (int r = 0; r < m; ++r)
        a->grad.data.segment(static_cast<long>(r) * w + c0, n) +=
            out->grad.data.segment(static_cast<long>(r) * n, n);
    };
  }
  return out;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  int n = parts[0]->value.shape[1];
  int m = 0;
  bool rg = false;
  for (Var p : parts) {
    m += p->value.shape[0];
    rg = rg || p->requires_grad;
  }
  Tensor y({m, n});
  long off = 0;
  for (Var p : parts) {
    y.data.segment(off, p->value.numel()) = p->value.data;
    off += p->value.numel();
  }
  Var out = make(std::move(y), rg);
  if (rg) {
    auto ps = std::make_shared<std::vector<Var>>(parts);
    out->backprop = [ps, out] {
      long off = 0;
      for (Var p : *ps) {
        if (p->requires_grad) p->grad.data += out->grad.data.segment(off, p->value.numel());
        off += p->value.numel();
      }
    };
  }
  return out;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  int m = parts[0]->value.shape[0];
  int n = 0;
  bool rg = false;
  for (Var p : parts) {
    n += p->value.shape[1];
    rg = rg || p->requires_grad;
  }
  Tensor y({m, n});
  int c0 = 0;
  for (Var p : parts) {
    int w = p->value.shape[1];
    for (int r = 0; r < m; ++r)
      y.data.segment(static_cast<long>(r) * n + c0, w) =
          p->value.data.segment(static_cast<long>(r) * w, w);
    c0 += w;
  }
  Var out = make(std::move(y), rg);
  if (rg) {
    auto ps = std::make_shared<std::vector<Var>>(parts);
    out->backprop = [ps, out, m, n] {
      int c0 = 0;
      for (Var p : *ps) {
        int w = p->value.shape[1];
        if (p->requires_grad)
          for (int r = 0; r < m; ++r)
            p->grad.data.segment(static_cast<long>(r) * w, w) +=
                out->grad.data.segment(static_cast<long>(r) * n + c0, w);
        c0 += w;
      }
    };
  }
  return out;
}

Var Tape::reshape(Var a, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != a->value.numel())
    throw std::invalid_argument("reshape: numel mismatch");
  Var out = make(Tensor(std::move(shape), a->value.data), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out] { a->grad.data += out->grad.data; };
  }
  return out;
}

Var Tape::transpose2d(Var a) {
  int m = a->value.shape[0], n = a->value.shape[1];
  Tensor y({n, m});
  as_mat(y) = as_mat(a->value).transpose();
  Var out = make(std::move(y), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out] { as_mat(a->grad) += as_mat(out->grad).transpose(); };
  }
  return out;
}

Var Tape::sum_all(Var a) {
  Var out = make(Tensor::scalar(a->value.data.sum()), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out] { a->grad.data += out->grad.data[0]; };
  }
  return out;
}

Var Tape::mean_all(Var a) {
  double inv = 1.0 / static_cast<double>(a->value.numel());
  Var out = make(Tensor::scalar(a->value.data.mean()), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out, inv] { a->grad.data += out->grad.data[0] * inv; };
  }
  return out;
}

Var Tape::pick(Var a, long flat_index) {
  Var out = make(Tensor::scalar(a->value.data[flat_index]), a->requires_grad);
  if (out->requires_grad) {
    out->backprop = [a, out, flat_index] { a->grad.data[flat_index] += out->grad.data[0]; };
  }
  return out;
}

namespace {

void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int hout, int wout,
            RowMat& col) {
  int cin = x.shape[0], h = x.shape[1], w = x.shape[2];
  col.setZero(cin * kh * kw, hout * wout);
  for (int c = 0; c < cin; ++c) {
    const double* xc = x.data.data() + static_cast<long>(c) * h * w;
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        int row = (c * kh + i) * kw + j;
        for (int oy = 0; oy < hout; ++oy) {
          int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wout; ++ox) {
            int ix = ox * stride - pad + j;
            if (ix < 0 || ix >= w) continue;
            col(row, oy * wout + ox) = xc[iy * w + ix];
          }
        }
      }
  }
}

void col2im_accum(const RowMat& col, int cin, int h, int w, int kh, int kw, int stride, int pad,
                  int hout, int wout, Tensor& dx) {
  for (int c = 0; c < cin; ++c) {
    double* xc = dx.data.data() + static_cast<long>(c) * h * w;
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        int row = (c * kh + i) * kw + j;
        for (int oy = 0; oy < hout; ++oy) {
          int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wout; ++ox) {
            int ix = ox * stride - pad + j;
            if (ix < 0 || ix >= w) continue;
            xc[iy * w + ix] += col(row, oy * wout + ox);
          }
        }
      }
  }
}

}  // namespace

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
  int cin = x->value.shape[0], h = x->value.shape[1], ww = x->value.shape[2];
  int cout = w->value.shape[0], kh = w->value.shape[2], kw = w->value.shape[3];
  if (w->value.shape[1] != cin) throw std::invalid_argument("conv2d: channel mismatch");
  int hout = (h + 2 * pad - kh) / stride + 1;
  int wout = (ww + 2 * pad - kw) / stride + 1;
  if (hout < 1 || wout < 1) throw std::invalid_argument("conv2d: input smaller than kernel");

  auto col = std::make_shared<RowMat>();
  im2col(x->value, kh, kw, stride, pad, hout, wout, *col);
  Eigen::Map<RowMat> W(w->value.data.data(), cout, cin * kh * kw);
  Tensor y({cout, hout, wout});
  MatMap Y(y.data.data(), cout, hout * wout);
  Y.noalias() = W * (*col);
  for (int c = 0; c < cout; ++c) Y.row(c).array() += b->value.data[c];

  Var out = make(std::move(y), x->requires_grad || w->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backprop = [x, w, b, out, col, cin, h, ww, cout, kh, kw, stride, pad, hout, wout] {
      CMatMap dY(out->grad.data.data(), cout, hout * wout);
      if (b->requires_grad)
        for (int c = 0; c < cout; ++c) b->grad.data[c] += dY.row(c).sum();
      if (w->requires_grad) {
        MatMap dW(w->grad.data.data(), cout, cin * kh * kw);
        dW.noalias() += dY * col->transpose();
      }
      if (x->requires_grad) {
        Eigen::Map<RowMat> W(w->value.data.data(), cout, cin * kh * kw);
        RowMat dcol = W.transpose() * dY;
        col2im_accum(dcol, cin, h, ww, kh, kw, stride, pad, hout, wout, x->grad);
      }
    };
  }
  return out;
}

Var Tape::upsample_bilinear2x(Var x) {
  int c = x->value.shape[0], h = x->value.shape[1], w = x->value.shape[2];
  int ho = 2 * h, wo = 2 * w;
  // half-pixel-centre sampling with clamped borders
  auto coeffs = [](int out_i, int n) {
    double v = (out_i + 0.5) / 2.0 - 0.5;
    int i0 = static_cast<int>(std::floor(v));
    double f = v - i0;
    int a = std::clamp(i0, 0, n - 1);
    int b = std::clamp(i0 + 1, 0, n - 1);
    return std::tuple<int, int, double>(a, b, f);
  };
  Tensor y({c, ho, wo});
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = x->value.data.data() + static_cast<long>(ch) * h * w;
    double* yc = y.data.data() + static_cast<long>(ch) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      auto [y0, y1, fy] = coeffs(oy, h);
      for (int ox = 0; ox < wo; ++ox) {
        auto [x0, x1, fx] = coeffs(ox, w);
        yc[oy * wo + ox] = (1 - fy) * ((1 - fx) * xc[y0 * w + x0] + fx * xc[y0 * w + x1]) +
                           fy * ((1 - fx) * xc[y1 * w + x0] + fx * xc[y1 * w + x1]);
      }
    }
  }
  Var out = make(std::move(y), x->requires_grad);
  if (out->requires_grad) {
    out->backprop = [x, out, c, h, w, ho, wo, coeffs] {
      for (int ch = 0; ch < c; ++ch) {
        double* dxc = x->grad.data.data() + static_cast<long>(ch) * h * w;
        const double* dyc = out->grad.data.data() + static_cast<long>(ch) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          auto [y0, y1, fy] = coeffs(oy, h);
          for (int ox = 0; ox < wo; ++ox) {
            auto [x0, x1, fx] = coeffs(ox, w);
            double g = dyc[oy * wo + ox];
            dxc[y0 * w + x0] += (1 - fy) * (1 - fx) * g;
            dxc[y0 * w + x1] += (1 - fy) * fx * g;
            dxc[y1 * w + x0] += fy * (1 - fx) * g;
            dxc[y1 * w + x1] += fy * fx * g;
          }
        }
      }
    };
  }
  return out;
}

void Tape::backward(Var root) {
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  root->ensure_grad();
  root->grad.data[0] = 1.0;
  // nodes are recorded in forward topological order
  bool seen_root = false;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TapeNode* n = it->get();
    if (!seen_root) {
      if (n == root) seen_root = true;
      else continue;
    }
    if (n->requires_grad && n->backprop) n->backprop();
  }
}

}  // namespace surgpis
