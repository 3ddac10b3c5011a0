#pragma once

#include <Eigen/Dense>
#include <random>

#include "mono3d/autodiff.hpp"

namespace mono3d {

// ---- conv2d ----
// input [Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout]; zero padding.

template <class T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad,
            int ho, int wo, std::vector<T>& col) {
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  col.assign(static_cast<std::size_t>(ci) * kh * kw * ho * wo, T(0));
  const int n_sp = ho * wo;
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = col.data() + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * n_sp;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const T* src = &x.at(c, iy, 0);
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[oy * wo + ox] = src[ix];
          }
        }
      }
}

template <class T>
void col2im(const std::vector<T>& col, int ci, int h, int w, int kh, int kw,
            int stride, int pad, int ho, int wo, Tensor<T>& x) {
  const int n_sp = ho * wo;
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = col.data() + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * n_sp;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = &x.at(c, iy, 0);
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
          }
        }
      }
}

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1,
              int pad = 1) {
  const int ci = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
  const int co = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
  if (w->val.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const int kdim = ci * kh * kw, n_sp = ho * wo;

  auto col = std::make_shared<std::vector<T>>();
  im2col(x->val, kh, kw, stride, pad, ho, wo, *col);

  Tensor<T> out({co, ho, wo});
  {
    Eigen::Map<const EMat<T>> wm(w->val.data(), co, kdim);
    Eigen::Map<const EMat<T>> cm(col->data(), kdim, n_sp);
    Eigen::Map<EMat<T>> om(out.data(), co, n_sp);
    om.noalias() = wm * cm;
  }
  for (int c = 0; c < co; ++c) {
    const T bias = b->val.v[c];
    T* p = out.data() + static_cast<std::size_t>(c) * n_sp;
    for (int i = 0; i < n_sp; ++i) p[i] += bias;
  }

  return make_op<T>(std::move(out), {x, w, b},
                    [x, w, b, col, ci, h, wd, co, kh, kw, stride, pad, ho, wo,
                     kdim, n_sp](Node<T>& n) {
    Eigen::Map<const EMat<T>> gy(n.grad.data(), co, n_sp);
    if (w->needs_grad) {
      Eigen::Map<const EMat<T>> cm(col->data(), kdim, n_sp);
      Eigen::Map<EMat<T>> gw(w->grad.data(), co, kdim);
      gw.noalias() += gy * cm.transpose();
    }
    if (b->needs_grad)
      for (int c = 0; c < co; ++c) {
        T s = T(0);
        const T* p = n.grad.data() + static_cast<std::size_t>(c) * n_sp;
        for (int i = 0; i < n_sp; ++i) s += p[i];
        b->grad.v[c] += s;
      }
    if (x->needs_grad) {
      std::vector<T> gcol(static_cast<std::size_t>(kdim) * n_sp);
      Eigen::Map<const EMat<T>> wm(w->val.data(), co, kdim);
      Eigen::Map<EMat<T>> gc(gcol.data(), kdim, n_sp);
      gc.noalias() = wm.transpose() * gy;
      col2im(gcol, ci, h, wd, kh, kw, stride, pad, ho, wo, x->grad);
    }
  });
}

// ---- resampling ----

template <class T>
Var<T> upsample_nearest2x(const Var<T>& a) {
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x) out.at(ci, y, x) = a->val.at(ci, y / 2, x / 2);
  return make_op<T>(std::move(out), {a}, [a, c, h, w](Node<T>& n) {
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int x = 0; x < 2 * w; ++x)
          a->grad.at(ci, y / 2, x / 2) += n.grad.at(ci, y, x);
  });
}

// Bilinear upsample to an exact target size (align_corners = false style:
// pixel centers mapped proportionally).
template <class T>
Var<T> upsample_bilinear(const Var<T>& a, int ho, int wo) {
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  const T sy = T(h) / T(ho), sx = T(w) / T(wo);
  // precompute sample positions
  struct Tap { int i0, i1; T w0, w1; };
  std::vector<Tap> ty(ho), tx(wo);
  auto make_tap = [](int o, T s, int n) {
    T p = (T(o) + T(0.5)) * s - T(0.5);
    p = std::min(std::max(p, T(0)), T(n - 1));
    int i0 = static_cast<int>(std::floor(p));
    int i1 = std::min(i0 + 1, n - 1);
    T f = p - T(i0);
    return Tap{i0, i1, T(1) - f, f};
  };
  for (int y = 0; y < ho; ++y) ty[y] = make_tap(y, sy, h);
  for (int x = 0; x < wo; ++x) tx[x] = make_tap(x, sx, w);

  Tensor<T> out({c, ho, wo});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < ho; ++y)
      for (int x = 0; x < wo; ++x) {
        const Tap &a_y = ty[y], &a_x = tx[x];
        out.at(ci, y, x) = a_y.w0 * (a_x.w0 * a->val.at(ci, a_y.i0, a_x.i0) +
                                     a_x.w1 * a->val.at(ci, a_y.i0, a_x.i1)) +
                           a_y.w1 * (a_x.w0 * a->val.at(ci, a_y.i1, a_x.i0) +
                                     a_x.w1 * a->val.at(ci, a_y.i1, a_x.i1));
      }
  return make_op<T>(std::move(out), {a}, [a, c, ho, wo, ty, tx](Node<T>& n) {
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) {
          const Tap &a_y = ty[y], &a_x = tx[x];
          const T g = n.grad.at(ci, y, x);
          a->grad.at(ci, a_y.i0, a_x.i0) += g * a_y.w0 * a_x.w0;
          a->grad.at(ci, a_y.i0, a_x.i1) += g * a_y.w0 * a_x.w1;
          a->grad.at(ci, a_y.i1, a_x.i0) += g * a_y.w1 * a_x.w0;
          a->grad.at(ci, a_y.i1, a_x.i1) += g * a_y.w1 * a_x.w1;
        }
  });
}

// Count-normalized mean filter over a square window, per channel. Windows are
// truncated at the border and normalized by the actual pixel count, so a
// constant image stays constant everywhere.
template <class T>
Var<T> box_mean(const Var<T>& a, int win) {
  if (win < 1 || win % 2 == 0) throw std::invalid_argument("box_mean: window must be odd");
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  const int r = win / 2;
  Tensor<T> out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
        const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
        T s = T(0);
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) s += a->val.at(ci, yy, xx);
        out.at(ci, y, x) = s / T((y1 - y0 + 1) * (x1 - x0 + 1));
      }
  return make_op<T>(std::move(out), {a}, [a, c, h, w, r](Node<T>& n) {
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
          const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
          const T g = n.grad.at(ci, y, x) / T((y1 - y0 + 1) * (x1 - x0 + 1));
          for (int yy = y0; yy <= y1; ++yy)
            for (int xx = x0; xx <= x1; ++xx) a->grad.at(ci, yy, xx) += g;
        }
  });
}

// ---- parameters & optimizer ----

template <class T>
struct ParamStore {
  std::vector<Var<T>> params;
  std::vector<std::string> names;

  Var<T> add(const std::string& name, Tensor<T> init) {
    auto p = leaf(std::move(init));
    params.push_back(p);
    names.push_back(name);
    return p;
  }

  void zero_grad() {
    for (auto& p : params) {
      p->ensure_grad();
      std::fill(p->grad.v.begin(), p->grad.v.end(), T(0));
    }
  }
  std::size_t numel() const {
    std::size_t n = 0;
    for (auto& p : params) n += p->val.numel();
    return n;
  }
};

template <class T>
Tensor<T> he_init(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  Tensor<T> t(shape);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& x : t.v) x = static_cast<T>(dist(rng));
  return t;
}

template <class T>
struct SGD {
  T lr, momentum, weight_decay;
  std::vector<Tensor<T>> velocity;

  explicit SGD(T lr_, T momentum_ = T(0.9), T wd = T(1e-4))
      : lr(lr_), momentum(momentum_), weight_decay(wd) {}

  void step(ParamStore<T>& ps) {
    if (velocity.empty())
      for (auto& p : ps.params) velocity.push_back(Tensor<T>::zeros(p->val.shape));
    for (std::size_t k = 0; k < ps.params.size(); ++k) {
      auto& p = ps.params[k];
      for (std::size_t i = 0; i < p->val.numel(); ++i) {
        const T g = p->grad.v[i] + weight_decay * p->val.v[i];
        velocity[k].v[i] = momentum * velocity[k].v[i] + g;
        p->val.v[i] -= lr * velocity[k].v[i];
      }
    }
  }
};

template <class T>
struct Adam {
  T lr, beta1, beta2, eps;
  long t = 0;
  std::vector<Tensor<T>> m, v;

  explicit Adam(T lr_, T b1 = T(0.9), T b2 = T(0.999), T eps_ = T(1e-8))
      : lr(lr_), beta1(b1), beta2(b2), eps(eps_) {}

  void step(ParamStore<T>& ps) {
    if (m.empty())
      for (auto& p : ps.params) {
        m.push_back(Tensor<T>::zeros(p->val.shape));
        v.push_back(Tensor<T>::zeros(p->val.shape));
      }
    ++t;
    const T bc1 = T(1) - std::pow(beta1, T(t));
    const T bc2 = T(1) - std::pow(beta2, T(t));
    for (std::size_t k = 0; k < ps.params.size(); ++k) {
      auto& p = ps.params[k];
      for (std::size_t i = 0; i < p->val.numel(); ++i) {
        const T g = p->grad.v[i];
        m[k].v[i] = beta1 * m[k].v[i] + (T(1) - beta1) * g;
        v[k].v[i] = beta2 * v[k].v[i] + (T(1) - beta2) * g * g;
        p->val.v[i] -= lr * (m[k].v[i] / bc1) / (std::sqrt(v[k].v[i] / bc2) + eps);
      }
    }
  }
};

// 3x3 (or kxk) conv layer bundling weight + bias registration.
template <class T>
struct ConvLayer {
  Var<T> w, b;
  int stride, pad;

  ConvLayer() = default;
  ConvLayer(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k,
            int stride_, std::mt19937_64& rng)
      : stride(stride_), pad(k / 2) {
    w = ps.add(name + ".w", he_init<T>({cout, cin, k, k}, cin * k * k, rng));
    b = ps.add(name + ".b", Tensor<T>::zeros({cout}));
  }
  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

}  // namespace mono3d
