#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "autograd.hpp"

namespace mafnet {

enum class PadMode { Zero, Reflect };

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Maps a padded coordinate into [0, n), or -1 when it lands in zero padding.
inline int pad_index(int i, int n, PadMode mode) {
  if (i >= 0 && i < n) return i;
  if (mode == PadMode::Zero) return -1;
  if (n == 1) return 0;
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  return i;
}

struct ConvGeometry {
  int cin, h, w, k, stride, pad, ho, wo;
  PadMode mode;
  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(ho) * wo; }
};

// For each (kernel offset, output coordinate) the source coordinate or -1.
struct ConvIndex {
  std::vector<int> row_src;  // [k][ho]
  std::vector<int> col_src;  // [k][wo]
  explicit ConvIndex(const ConvGeometry& g)
      : row_src(static_cast<std::size_t>(g.k) * g.ho), col_src(static_cast<std::size_t>(g.k) * g.wo) {
    for (int ki = 0; ki < g.k; ++ki)
      for (int o = 0; o < g.ho; ++o) row_src[ki * g.ho + o] = pad_index(o * g.stride - g.pad + ki, g.h, g.mode);
    for (int kj = 0; kj < g.k; ++kj)
      for (int o = 0; o < g.wo; ++o) col_src[kj * g.wo + o] = pad_index(o * g.stride - g.pad + kj, g.w, g.mode);
  }
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, const ConvIndex& ix, T* col) {
  std::size_t r = 0;
  for (int c = 0; c < g.cin; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj, ++r) {
        T* dst = col + r * g.cols();
        const int* cs = &ix.col_src[kj * g.wo];
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = ix.row_src[ki * g.ho + oy];
          T* d = dst + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0) {
            std::fill_n(d, g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) d[ox] = cs[ox] < 0 ? T(0) : src[cs[ox]];
        }
      }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, const ConvIndex& ix, T* img) {
  std::size_t r = 0;
  for (int c = 0; c < g.cin; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj, ++r) {
        const T* src = col + r * g.cols();
        const int* cs = &ix.col_src[kj * g.wo];
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = ix.row_src[ki * g.ho + oy];
          if (iy < 0) continue;
          const T* s = src + static_cast<std::size_t>(oy) * g.wo;
          T* d = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox)
            if (cs[ox] >= 0) d[cs[ox]] += s[ox];
        }
      }
  }
}

}  // namespace detail

// 2D convolution, square kernel. x: (N,Cin,H,W), weight: (Cout,Cin,k,k),
// bias: (Cout) or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad, PadMode mode) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == cin && weight.dim(3) == k, ErrorCode::ShapeMismatch,
          "conv2d: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  require(mode == PadMode::Zero || pad < std::min(h, w), ErrorCode::ShapeMismatch, "reflect pad exceeds extent");
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, ErrorCode::ShapeMismatch, "conv2d: input too small for kernel");
  const bool has_bias = bias.defined();
  if (has_bias) require_shape(bias.shape(), Shape{cout}, "conv2d bias");

  const detail::ConvGeometry g{cin, h, w, k, stride, pad, ho, wo, mode};
  auto index = std::make_shared<detail::ConvIndex>(g);
  Tensor<T> out({n, cout, ho, wo});
  AlignedVector<T> col(g.rows() * g.cols());
  detail::ConstMapMat<T> wm(weight.value().data(), cout, static_cast<Eigen::Index>(g.rows()));
  for (int b = 0; b < n; ++b) {
    detail::im2col(x.value().data() + static_cast<std::size_t>(b) * cin * h * w, g, *index, col.data());
    detail::ConstMapMat<T> cm(col.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    detail::MapMat<T> om(out.data() + static_cast<std::size_t>(b) * cout * g.cols(), cout,
                         static_cast<Eigen::Index>(g.cols()));
    om.noalias() = wm * cm;
    if (has_bias)
      for (int co = 0; co < cout; ++co) om.row(co).array() += bias.value()[co];
  }

  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(std::move(out), std::move(inputs), [g, index, n, cout, has_bias](Node<T>& self) {
    auto& xin = self.input(0);
    auto& win = self.input(1);
    const std::size_t in_per = static_cast<std::size_t>(g.cin) * g.h * g.w;
    const auto rows = static_cast<Eigen::Index>(g.rows()), cols = static_cast<Eigen::Index>(g.cols());
    AlignedVector<T> col(g.rows() * g.cols());
    AlignedVector<T> dcol;
    detail::ConstMapMat<T> wm(win.value.data(), cout, rows);
    for (int b = 0; b < n; ++b) {
      detail::ConstMapMat<T> gm(self.grad.data() + static_cast<std::size_t>(b) * cout * g.cols(), cout, cols);
      if (win.requires_grad) {
        detail::im2col(xin.value.data() + b * in_per, g, *index, col.data());
        detail::ConstMapMat<T> cm(col.data(), rows, cols);
        detail::MapMat<T> dw(win.grad_buffer().data(), cout, rows);
        dw.noalias() += gm * cm.transpose();
      }
      if (xin.requires_grad) {
        dcol.resize(g.rows() * g.cols());
        detail::MapMat<T> dc(dcol.data(), rows, cols);
        dc.noalias() = wm.transpose() * gm;
        detail::col2im_add(dcol.data(), g, *index, xin.grad_buffer().data() + b * in_per);
      }
      if (has_bias && self.input(2).requires_grad) {
        auto& db = self.input(2).grad_buffer();
        for (int co = 0; co < cout; ++co) db[co] += gm.row(co).sum();
      }
    }
  });
}

// Fixed [1 2 1]^T [1 2 1] / 16 blur, reflect pad 1, stride 2, per channel.
template <class T>
Var<T> blur_downsample(const Var<T>& x) {
  require_rank(x.shape(), 4, "blur_downsample");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h >= 2 && w >= 2, ErrorCode::ShapeMismatch, "blur_downsample: extent < 2");
  const int ho = (h - 1) / 2 + 1, wo = (w - 1) / 2 + 1;
  static constexpr T taps[3] = {T(1) / 4, T(2) / 4, T(1) / 4};
  Tensor<T> out({n, c, ho, wo});
  auto kernel = [](int o, int t, int extent) { return detail::pad_index(o * 2 - 1 + t, extent, PadMode::Reflect); };
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T acc = 0;
        for (int ti = 0; ti < 3; ++ti) {
          const int iy = kernel(oy, ti, h);
          for (int tj = 0; tj < 3; ++tj) acc += taps[ti] * taps[tj] * src[iy * w + kernel(ox, tj, w)];
        }
        dst[oy * wo + ox] = acc;
      }
  }
  return make_result<T>(std::move(out), {x}, [n, c, h, w, ho, wo, kernel](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (int p = 0; p < n * c; ++p) {
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
      T* dst = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const T go = src[oy * wo + ox];
          for (int ti = 0; ti < 3; ++ti) {
            const int iy = kernel(oy, ti, h);
            for (int tj = 0; tj < 3; ++tj) dst[iy * w + kernel(ox, tj, w)] += taps[ti] * taps[tj] * go;
          }
        }
    }
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank(x.shape(), 4, "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return make_result<T>(std::move(out), {x}, [n, c, h, w](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (int p = 0; p < n * c; ++p) {
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * 4 * h * w;
      T* dst = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
    }
  });
}

template <class T>
Var<T> max_pool2x2(const Var<T>& x) {
  require_rank(x.shape(), 4, "max_pool2x2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0, ErrorCode::ShapeMismatch, "max_pool2x2 needs even extents");
  const int ho = h / 2, wo = w / 2;
  Tensor<T> out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * oy) * w + 2 * ox);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const auto idx = static_cast<std::uint32_t>((2 * oy + dy) * w + 2 * ox + dx);
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = static_cast<std::size_t>(p) * ho * wo + oy * wo + ox;
        out[o] = src[best];
        (*argmax)[o] = best;
      }
  }
  return make_result<T>(std::move(out), {x}, [argmax, h, w, ho, wo](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (std::size_t o = 0; o < self.grad.size(); ++o) {
      const std::size_t plane = o / (static_cast<std::size_t>(ho) * wo);
      g[plane * h * w + (*argmax)[o]] += self.grad[o];
    }
  });
}

// Per-sample, per-channel normalization over H*W (biased variance). gamma and
// beta are optional (Cout) affine parameters.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma = {}, const Var<T>& beta = {}, T eps = T(1e-5)) {
  require_rank(x.shape(), 4, "instance_norm");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const bool affine = gamma.defined();
  Tensor<T> xhat(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * c);
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.value().data() + p * hw;
    T mu = 0;
    for (std::size_t i = 0; i < hw; ++i) mu += src[i];
    mu /= static_cast<T>(hw);
    T var = 0;
    for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(hw);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[p] = is;
    T* dst = xhat.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - mu) * is;
  }
  Tensor<T> out = xhat;
  if (affine) {
    for (int p = 0; p < n * c; ++p) {
      const T gm = gamma.value()[p % c], bt = beta.value()[p % c];
      T* d = out.data() + p * hw;
      for (std::size_t i = 0; i < hw; ++i) d[i] = gm * d[i] + bt;
    }
  }
  std::vector<Var<T>> inputs{x};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
  return make_result<T>(std::move(out), std::move(inputs), [xh, inv_std, n, c, hw, affine](Node<T>& self) {
    for (int p = 0; p < n * c; ++p) {
      const T* gy = self.grad.data() + p * hw;
      const T* xhp = xh->data() + p * hw;
      const T gm = affine ? self.input(1).value[p % c] : T(1);
      T sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_g += gy[i];
        sum_gx += gy[i] * xhp[i];
      }
      if (affine) {
        if (self.input(1).requires_grad) self.input(1).grad_buffer()[p % c] += sum_gx;
        if (self.input(2).requires_grad) self.input(2).grad_buffer()[p % c] += sum_g;
      }
      if (self.input(0).requires_grad) {
        T* gx = self.input(0).grad_buffer().data() + p * hw;
        const T m_g = sum_g / static_cast<T>(hw), m_gx = sum_gx / static_cast<T>(hw);
        const T k = gm * (*inv_std)[p];
        for (std::size_t i = 0; i < hw; ++i) gx[i] += k * (gy[i] - m_g - xhp[i] * m_gx);
      }
    }
  });
}

// Softmax across the channel axis at every (n, h, w).
template <class T>
Var<T> channel_softmax(const Var<T>& x) {
  require_rank(x.shape(), 4, "channel_softmax");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out(x.shape());
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      const T* src = x.value().data() + static_cast<std::size_t>(b) * c * hw + i;
      T* dst = out.data() + static_cast<std::size_t>(b) * c * hw + i;
      T mx = src[0];
      for (int k = 1; k < c; ++k) mx = std::max(mx, src[k * hw]);
      T z = 0;
      for (int k = 0; k < c; ++k) z += (dst[k * hw] = std::exp(src[k * hw] - mx));
      for (int k = 0; k < c; ++k) dst[k * hw] /= z;
    }
  return make_result<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t base = static_cast<std::size_t>(b) * c * hw + i;
        T dot = 0;
        for (int k = 0; k < c; ++k) dot += self.value[base + k * hw] * self.grad[base + k * hw];
        for (int k = 0; k < c; ++k)
          g[base + k * hw] += self.value[base + k * hw] * (self.grad[base + k * hw] - dot);
      }
  });
}

// out(n,c,h,w) = map(n,0,h,w) * x(n,c,h,w)
template <class T>
Var<T> scale_by_map(const Var<T>& map, const Var<T>& x) {
  require_rank(x.shape(), 4, "scale_by_map");
  require_shape(map.shape(), Shape{x.dim(0), 1, x.dim(2), x.dim(3)}, "scale_by_map map");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out(x.shape());
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k)
      for (std::size_t i = 0; i < hw; ++i)
        out[(static_cast<std::size_t>(b) * c + k) * hw + i] =
            map.value()[b * hw + i] * x.value()[(static_cast<std::size_t>(b) * c + k) * hw + i];
  return make_result<T>(std::move(out), {map, x}, [n, c, hw](Node<T>& self) {
    auto& m = self.input(0);
    auto& xin = self.input(1);
    for (int b = 0; b < n; ++b)
      for (int k = 0; k < c; ++k)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t o = (static_cast<std::size_t>(b) * c + k) * hw + i;
          if (m.requires_grad) m.grad_buffer()[b * hw + i] += xin.value[o] * self.grad[o];
          if (xin.requires_grad) xin.grad_buffer()[o] += m.value[b * hw + i] * self.grad[o];
        }
  });
}

// Feature vectors at flattened spatial positions: (N,C,H,W) -> (N*P, C),
// rows ordered sample-major.
template <class T>
Var<T> gather_positions(const Var<T>& x, const std::vector<int>& positions) {
  require_rank(x.shape(), 4, "gather_positions");
  const int n = x.dim(0), c = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  const int p = static_cast<int>(positions.size());
  for (int s : positions) require(0 <= s && s < hw, ErrorCode::ShapeMismatch, "position out of range");
  Tensor<T> out({n * p, c});
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < p; ++j)
      for (int k = 0; k < c; ++k)
        out[(static_cast<std::size_t>(b) * p + j) * c + k] =
            x.value()[(static_cast<std::size_t>(b) * c + k) * hw + positions[j]];
  return make_result<T>(std::move(out), {x}, [positions, n, c, hw, p](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int j = 0; j < p; ++j)
        for (int k = 0; k < c; ++k)
          g[(static_cast<std::size_t>(b) * c + k) * hw + positions[j]] +=
              self.grad[(static_cast<std::size_t>(b) * p + j) * c + k];
  });
}

// x: (M,K), weight: (Out,K), bias: (Out) -> (M,Out)
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 2, "linear input");
  const int m = x.dim(0), k = x.dim(1), o = weight.dim(0);
  require_shape(weight.shape(), Shape{o, k}, "linear weight");
  require_shape(bias.shape(), Shape{o}, "linear bias");
  Tensor<T> out({m, o});
  detail::ConstMapMat<T> xm(x.value().data(), m, k), wm(weight.value().data(), o, k);
  detail::MapMat<T> om(out.data(), m, o);
  om.noalias() = xm * wm.transpose();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < o; ++j) om(i, j) += bias.value()[j];
  return make_result<T>(std::move(out), {x, weight, bias}, [m, k, o](Node<T>& self) {
    detail::ConstMapMat<T> gm(self.grad.data(), m, o);
    auto& xin = self.input(0);
    auto& win = self.input(1);
    if (xin.requires_grad) {
      detail::MapMat<T> dx(xin.grad_buffer().data(), m, k);
      dx.noalias() += gm * detail::ConstMapMat<T>(win.value.data(), o, k);
    }
    if (win.requires_grad) {
      detail::MapMat<T> dw(win.grad_buffer().data(), o, k);
      dw.noalias() += gm.transpose() * detail::ConstMapMat<T>(xin.value.data(), m, k);
    }
    if (self.input(2).requires_grad) {
      auto& db = self.input(2).grad_buffer();
      for (int j = 0; j < o; ++j) db[j] += gm.col(j).sum();
    }
  });
}

// Row-wise x / max(||x||, eps).
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  require_rank(x.shape(), 2, "l2_normalize_rows");
  const int m = x.dim(0), d = x.dim(1);
  Tensor<T> out(x.shape());
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const T* r = x.value().data() + static_cast<std::size_t>(i) * d;
    T s = 0;
    for (int j = 0; j < d; ++j) s += r[j] * r[j];
    const T nr = std::sqrt(s);
    (*norms)[i] = nr;
    const T den = std::max(nr, eps);
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] = r[j] / den;
  }
  return make_result<T>(std::move(out), {x}, [norms, m, d, eps](Node<T>& self) {
    auto& in = self.input(0);
    auto& g = in.grad_buffer();
    for (int i = 0; i < m; ++i) {
      const T* r = in.value.data() + static_cast<std::size_t>(i) * d;
      const T* gy = self.grad.data() + static_cast<std::size_t>(i) * d;
      const T nr = (*norms)[i];
      if (nr <= eps) {
        for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(i) * d + j] += gy[j] / eps;
        continue;
      }
      T dot = 0;
      for (int j = 0; j < d; ++j) dot += r[j] * gy[j];
      const T k = dot / (nr * nr * nr);
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(i) * d + j] += gy[j] / nr - r[j] * k;
    }
  });
}

}  // namespace mafnet
