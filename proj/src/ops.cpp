#include "transpose/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "transpose/parallel.hpp"

namespace transpose {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_2d(const Tensor& t, const char* name) {
  require(t.defined() && t.ndim() == 2,
          std::string(name) + " must be 2-d, got " +
              (t.defined() ? shape_str(t.shape()) : std::string("<empty>")));
}

void require_3d(const Tensor& t, const char* name) {
  require(t.defined() && t.ndim() == 3,
          std::string(name) + " must be 3-d, got " +
              (t.defined() ? shape_str(t.shape()) : std::string("<empty>")));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_2d(a, "matmul lhs");
  require_2d(b, "matmul rhs");
  require(a.dim(1) == b.dim(0), "matmul inner dimensions disagree: " +
                                    shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor y = Tensor::zeros({m, n});
  {
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* py = y.value().data();
    parallel_for(m, [=](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        double* yr = py + i * n;
        const double* ar = pa + i * k;
        for (int l = 0; l < k; ++l) {
          const double av = ar[l];
          const double* br = pb + static_cast<int64_t>(l) * n;
          for (int j = 0; j < n; ++j) yr[j] += av * br[j];
        }
      }
    });
  }
  if (tape) {
    tape->record({a, b, y}, [a, b, y, m, k, n]() mutable {
      const double* gy = y.grad().data();
      const double* pa = a.value().data();
      const double* pb = b.value().data();
      double* ga = a.grad().data();
      double* gb = b.grad().data();
      parallel_for(m, [=](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          const double* gyr = gy + i * n;
          double* gar = ga + i * k;
          for (int l = 0; l < k; ++l) {
            const double* br = pb + static_cast<int64_t>(l) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += gyr[j] * br[j];
            gar[l] += acc;
          }
        }
      });
      parallel_for(k, [=](int64_t l0, int64_t l1) {
        for (int64_t l = l0; l < l1; ++l) {
          double* gbr = gb + l * n;
          for (int i = 0; i < m; ++i) {
            const double av = pa[static_cast<int64_t>(i) * k + l];
            const double* gyr = gy + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) gbr[j] += av * gyr[j];
          }
        }
      });
    });
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape) {
  require_2d(a, "matmul_nt lhs");
  require_2d(b, "matmul_nt rhs");
  require(a.dim(1) == b.dim(1), "matmul_nt inner dimensions disagree: " +
                                    shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor y = Tensor::zeros({m, n});
  {
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* py = y.value().data();
    parallel_for(m, [=](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        const double* ar = pa + i * k;
        double* yr = py + i * n;
        for (int j = 0; j < n; ++j) {
          const double* br = pb + static_cast<int64_t>(j) * k;
          double acc = 0.0;
          for (int l = 0; l < k; ++l) acc += ar[l] * br[l];
          yr[j] = acc;
        }
      }
    });
  }
  if (tape) {
    tape->record({a, b, y}, [a, b, y, m, k, n]() mutable {
      const double* gy = y.grad().data();
      const double* pa = a.value().data();
      const double* pb = b.value().data();
      double* ga = a.grad().data();
      double* gb = b.grad().data();
      parallel_for(m, [=](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          double* gar = ga + i * k;
          const double* gyr = gy + i * n;
          for (int j = 0; j < n; ++j) {
            const double g = gyr[j];
            const double* br = pb + static_cast<int64_t>(j) * k;
            for (int l = 0; l < k; ++l) gar[l] += g * br[l];
          }
        }
      });
      parallel_for(n, [=](int64_t j0, int64_t j1) {
        for (int64_t j = j0; j < j1; ++j) {
          double* gbr = gb + j * k;
          for (int i = 0; i < m; ++i) {
            const double g = gy[static_cast<int64_t>(i) * n + j];
            const double* ar = pa + static_cast<int64_t>(i) * k;
            for (int l = 0; l < k; ++l) gbr[l] += g * ar[l];
          }
        }
      });
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          "add shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const int64_t n = a.size();
  const double* pa = a.value().data();
  const double* pb = b.value().data();
  double* py = y.value().data();
  for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  if (tape) {
    tape->record({a, b, y}, [a, b, y, n]() mutable {
      const double* gy = y.grad().data();
      double* ga = a.grad().data();
      double* gb = b.grad().data();
      for (int64_t i = 0; i < n; ++i) {
        ga[i] += gy[i];
        gb[i] += gy[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          "sub shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const int64_t n = a.size();
  const double* pa = a.value().data();
  const double* pb = b.value().data();
  double* py = y.value().data();
  for (int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
  if (tape) {
    tape->record({a, b, y}, [a, b, y, n]() mutable {
      const double* gy = y.grad().data();
      double* ga = a.grad().data();
      double* gb = b.grad().data();
      for (int64_t i = 0; i < n; ++i) {
        ga[i] += gy[i];
        gb[i] -= gy[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          "mul shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const int64_t n = a.size();
  const double* pa = a.value().data();
  const double* pb = b.value().data();
  double* py = y.value().data();
  for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
  if (tape) {
    tape->record({a, b, y}, [a, b, y, n]() mutable {
      const double* gy = y.grad().data();
      const double* pa = a.value().data();
      const double* pb = b.value().data();
      double* ga = a.grad().data();
      double* gb = b.grad().data();
      for (int64_t i = 0; i < n; ++i) {
        ga[i] += gy[i] * pb[i];
        gb[i] += gy[i] * pa[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double c, Tape* tape) {
  Tensor y = Tensor::zeros(x.shape());
  const int64_t n = x.size();
  const double* px = x.value().data();
  double* py = y.value().data();
  for (int64_t i = 0; i < n; ++i) py[i] = c * px[i];
  if (tape) {
    tape->record({x, y}, [x, y, c, n]() mutable {
      const double* gy = y.grad().data();
      double* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += c * gy[i];
    });
  }
  return y;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias, Tape* tape) {
  require_2d(x, "add_row_bias input");
  require(bias.defined() && bias.ndim() == 1 && bias.dim(0) == x.dim(1),
          "bias shape " + shape_str(bias.shape()) + " does not match rows of " +
              shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor y = Tensor::zeros(x.shape());
  const double* px = x.value().data();
  const double* pb = bias.value().data();
  double* py = y.value().data();
  for (int i = 0; i < rows; ++i) {
    const double* xr = px + static_cast<int64_t>(i) * cols;
    double* yr = py + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] + pb[j];
  }
  if (tape) {
    tape->record({x, bias, y}, [x, bias, y, rows, cols]() mutable {
      const double* gy = y.grad().data();
      double* gx = x.grad().data();
      double* gb = bias.grad().data();
      for (int i = 0; i < rows; ++i) {
        const double* gyr = gy + static_cast<int64_t>(i) * cols;
        double* gxr = gx + static_cast<int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
          gxr[j] += gyr[j];
          gb[j] += gyr[j];
        }
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& x, Tape* tape) {
  Tensor y = Tensor::zeros(x.shape());
  const int64_t n = x.size();
  const double* px = x.value().data();
  double* py = y.value().data();
  for (int64_t i = 0; i < n; ++i) py[i] = px[i] > 0.0 ? px[i] : 0.0;
  if (tape) {
    tape->record({x, y}, [x, y, n]() mutable {
      const double* gy = y.grad().data();
      const double* px = x.value().data();
      double* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) {
        if (px[i] > 0.0) gx[i] += gy[i];
      }
    });
  }
  return y;
}

Tensor softmax_rows(const Tensor& x, Tape* tape) {
  require_2d(x, "softmax_rows input");
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor y = Tensor::zeros(x.shape());
  const double* px = x.value().data();
  double* py = y.value().data();
  for (int i = 0; i < rows; ++i) {
    const double* xr = px + static_cast<int64_t>(i) * cols;
    double* yr = py + static_cast<int64_t>(i) * cols;
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      denom += yr[j];
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < cols; ++j) yr[j] *= inv;
  }
  if (tape) {
    tape->record({x, y}, [x, y, rows, cols]() mutable {
      const double* gy = y.grad().data();
      const double* py = y.value().data();
      double* gx = x.grad().data();
      for (int i = 0; i < rows; ++i) {
        const double* gyr = gy + static_cast<int64_t>(i) * cols;
        const double* yr = py + static_cast<int64_t>(i) * cols;
        double* gxr = gx + static_cast<int64_t>(i) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += gyr[j] * yr[j];
        for (int j = 0; j < cols; ++j) gxr[j] += yr[j] * (gyr[j] - dot);
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, Tape* tape) {
  require_2d(x, "layer_norm input");
  const int rows = x.dim(0), cols = x.dim(1);
  require(gamma.defined() && gamma.size() == cols && beta.defined() && beta.size() == cols,
          "layer_norm affine params must have length " + std::to_string(cols));
  Tensor y = Tensor::zeros(x.shape());
  // xhat and per-row inverse stddev are needed by the backward rule
  Tensor xhat = Tensor::zeros(x.shape());
  Tensor inv_std = Tensor::zeros({rows});
  const double* px = x.value().data();
  const double* pg = gamma.value().data();
  const double* pb = beta.value().data();
  double* py = y.value().data();
  double* ph = xhat.value().data();
  double* pis = inv_std.value().data();
  for (int i = 0; i < rows; ++i) {
    const double* xr = px + static_cast<int64_t>(i) * cols;
    double* yr = py + static_cast<int64_t>(i) * cols;
    double* hr = ph + static_cast<int64_t>(i) * cols;
    double mean = 0.0;
    for (int j = 0; j < cols; ++j) mean += xr[j];
    mean /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= cols;
    const double inv = 1.0 / std::sqrt(var + eps);
    pis[i] = inv;
    for (int j = 0; j < cols; ++j) {
      hr[j] = (xr[j] - mean) * inv;
      yr[j] = pg[j] * hr[j] + pb[j];
    }
  }
  if (tape) {
    tape->record({x, gamma, beta, y}, [x, gamma, beta, y, xhat, inv_std, rows, cols]() mutable {
      const double* gy = y.grad().data();
      const double* ph = xhat.value().data();
      const double* pis = inv_std.value().data();
      const double* pg = gamma.value().data();
      double* gx = x.grad().data();
      double* gg = gamma.grad().data();
      double* gb = beta.grad().data();
      for (int i = 0; i < rows; ++i) {
        const double* gyr = gy + static_cast<int64_t>(i) * cols;
        const double* hr = ph + static_cast<int64_t>(i) * cols;
        double* gxr = gx + static_cast<int64_t>(i) * cols;
        double sum_g = 0.0, sum_gh = 0.0;
        for (int j = 0; j < cols; ++j) {
          const double g = gyr[j] * pg[j];
          sum_g += g;
          sum_gh += g * hr[j];
          gg[j] += gyr[j] * hr[j];
          gb[j] += gyr[j];
        }
        const double mg = sum_g / cols;
        const double mgh = sum_gh / cols;
        const double inv = pis[i];
        for (int j = 0; j < cols; ++j) {
          const double g = gyr[j] * pg[j];
          gxr[j] += inv * (g - mg - hr[j] * mgh);
        }
      }
    });
  }
  return y;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, Tape* tape) {
  if (tape == nullptr || p <= 0.0) return x;
  require(p < 1.0, "dropout probability must be < 1");
  const int64_t n = x.size();
  Tensor y = Tensor::zeros(x.shape());
  Tensor mask = Tensor::zeros(x.shape());
  const double keep_scale = 1.0 / (1.0 - p);
  const double* px = x.value().data();
  double* py = y.value().data();
  double* pm = mask.value().data();
  for (int64_t i = 0; i < n; ++i) {
    pm[i] = rng.next_double() >= p ? keep_scale : 0.0;
    py[i] = px[i] * pm[i];
  }
  tape->record({x, y}, [x, y, mask, n]() mutable {
    const double* gy = y.grad().data();
    const double* pm = mask.value().data();
    double* gx = x.grad().data();
    for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * pm[i];
  });
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding, Tape* tape) {
  require_3d(x, "conv2d input");
  require(w.defined() && w.ndim() == 4, "conv2d weight must be 4-d, got " + shape_str(w.shape()));
  require(w.dim(1) == x.dim(0), "conv2d channels disagree: input " + shape_str(x.shape()) +
                                    ", weight " + shape_str(w.shape()));
  const int ci = x.dim(0), h = x.dim(1), win = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * padding - kh) / stride + 1;
  const int wo = (win + 2 * padding - kw) / stride + 1;
  require(ho >= 1 && wo >= 1, "conv2d kernel does not fit: input " + shape_str(x.shape()) +
                                  ", weight " + shape_str(w.shape()));
  if (bias.defined())
    require(bias.size() == co, "conv2d bias length " + std::to_string(bias.size()) +
                                   " != out channels " + std::to_string(co));
  Tensor y = Tensor::zeros({co, ho, wo});
  {
    const double* px = x.value().data();
    const double* pw = w.value().data();
    const double* pb = bias.defined() ? bias.value().data() : nullptr;
    double* py = y.value().data();
    parallel_for(co, [=](int64_t o0, int64_t o1) {
      for (int64_t o = o0; o < o1; ++o) {
        double* yo = py + o * ho * wo;
        const double b = pb ? pb[o] : 0.0;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            double acc = b;
            for (int c = 0; c < ci; ++c) {
              const double* xc = px + static_cast<int64_t>(c) * h * win;
              const double* wc = pw + ((o * ci + c) * kh) * kw;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= h) continue;
                const double* xr = xc + static_cast<int64_t>(iy) * win;
                const double* wr = wc + static_cast<int64_t>(ky) * kw;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - padding + kx;
                  if (ix < 0 || ix >= win) continue;
                  acc += xr[ix] * wr[kx];
                }
              }
            }
            yo[static_cast<int64_t>(oy) * wo + ox] = acc;
          }
        }
      }
    });
  }
  if (tape) {
    tape->record({x, w, bias.defined() ? bias : y, y},
                 [x, w, bias, y, ci, h, win, co, kh, kw, ho, wo, stride, padding]() mutable {
      const double* gy = y.grad().data();
      const double* px = x.value().data();
      const double* pw = w.value().data();
      double* gx = x.grad().data();
      double* gw = w.grad().data();
      // d/dx: gather over output positions, disjoint per input channel
      parallel_for(ci, [=](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
          double* gxc = gx + c * h * win;
          for (int o = 0; o < co; ++o) {
            const double* gyo = gy + static_cast<int64_t>(o) * ho * wo;
            const double* wc = pw + ((static_cast<int64_t>(o) * ci + c) * kh) * kw;
            for (int oy = 0; oy < ho; ++oy) {
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= h) continue;
                const double* wr = wc + static_cast<int64_t>(ky) * kw;
                double* gxr = gxc + static_cast<int64_t>(iy) * win;
                const double* gyr = gyo + static_cast<int64_t>(oy) * wo;
                for (int ox = 0; ox < wo; ++ox) {
                  const double g = gyr[ox];
                  if (g == 0.0) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - padding + kx;
                    if (ix < 0 || ix >= win) continue;
                    gxr[ix] += g * wr[kx];
                  }
                }
              }
            }
          }
        }
      });
      // d/dw: disjoint per output channel
      parallel_for(co, [=](int64_t o0, int64_t o1) {
        for (int64_t o = o0; o < o1; ++o) {
          const double* gyo = gy + o * ho * wo;
          for (int c = 0; c < ci; ++c) {
            const double* xc = px + static_cast<int64_t>(c) * h * win;
            double* gwc = gw + ((o * ci + c) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                double acc = 0.0;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= h) continue;
                  const double* xr = xc + static_cast<int64_t>(iy) * win;
                  const double* gyr = gyo + static_cast<int64_t>(oy) * wo;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - padding + kx;
                    if (ix < 0 || ix >= win) continue;
                    acc += xr[ix] * gyr[ox];
                  }
                }
                gwc[static_cast<int64_t>(ky) * kw + kx] += acc;
              }
            }
          }
        }
      });
      if (bias.defined()) {
        double* gb = bias.grad().data();
        for (int o = 0; o < co; ++o) {
          const double* gyo = gy + static_cast<int64_t>(o) * ho * wo;
          double acc = 0.0;
          for (int64_t i = 0; i < static_cast<int64_t>(ho) * wo; ++i) acc += gyo[i];
          gb[o] += acc;
        }
      }
    });
  }
  return y;
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                         int stride, int padding, Tape* tape) {
  require_3d(x, "transposed_conv2d input");
  require(w.defined() && w.ndim() == 4,
          "transposed_conv2d weight must be 4-d, got " + shape_str(w.shape()));
  require(w.dim(0) == x.dim(0), "transposed_conv2d channels disagree: input " +
                                    shape_str(x.shape()) + ", weight " + shape_str(w.shape()));
  const int ci = x.dim(0), h = x.dim(1), win = x.dim(2);
  const int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h - 1) * stride - 2 * padding + kh;
  const int wo = (win - 1) * stride - 2 * padding + kw;
  require(ho >= 1 && wo >= 1, "transposed_conv2d output collapses for input " + shape_str(x.shape()));
  if (bias.defined())
    require(bias.size() == co, "transposed_conv2d bias length " + std::to_string(bias.size()) +
                                   " != out channels " + std::to_string(co));
  Tensor y = Tensor::zeros({co, ho, wo});
  {
    const double* px = x.value().data();
    const double* pw = w.value().data();
    const double* pb = bias.defined() ? bias.value().data() : nullptr;
    double* py = y.value().data();
    parallel_for(co, [=](int64_t o0, int64_t o1) {
      for (int64_t o = o0; o < o1; ++o) {
        double* yo = py + o * ho * wo;
        const double b = pb ? pb[o] : 0.0;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            double acc = b;
            for (int ky = 0; ky < kh; ++ky) {
              const int ty = oy + padding - ky;
              if (ty < 0 || ty % stride != 0) continue;
              const int iy = ty / stride;
              if (iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int tx = ox + padding - kx;
                if (tx < 0 || tx % stride != 0) continue;
                const int ix = tx / stride;
                if (ix >= win) continue;
                for (int c = 0; c < ci; ++c) {
                  acc += x(c, iy, ix) * pw[((static_cast<int64_t>(c) * co + o) * kh + ky) * kw + kx];
                }
              }
            }
            yo[static_cast<int64_t>(oy) * wo + ox] = acc;
          }
        }
      }
    });
  }
  if (tape) {
    tape->record({x, w, bias.defined() ? bias : y, y},
                 [x, w, bias, y, ci, h, win, co, kh, kw, ho, wo, stride, padding]() mutable {
      const double* gy = y.grad().data();
      const double* px = x.value().data();
      const double* pw = w.value().data();
      double* gx = x.grad().data();
      double* gw = w.grad().data();
      // d/dx is an ordinary convolution of gy with w; disjoint per input channel
      parallel_for(ci, [=](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
          double* gxc = gx + c * h * win;
          for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < win; ++ix) {
              double acc = 0.0;
              for (int o = 0; o < co; ++o) {
                const double* gyo = gy + static_cast<int64_t>(o) * ho * wo;
                const double* wc = pw + ((c * co + o) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                  const int oy = iy * stride - padding + ky;
                  if (oy < 0 || oy >= ho) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ox = ix * stride - padding + kx;
                    if (ox < 0 || ox >= wo) continue;
                    acc += gyo[static_cast<int64_t>(oy) * wo + ox] * wc[static_cast<int64_t>(ky) * kw + kx];
                  }
                }
              }
              gxc[static_cast<int64_t>(iy) * win + ix] += acc;
            }
          }
        }
      });
      // d/dw: disjoint per input channel (leading weight axis)
      parallel_for(ci, [=](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
          const double* xc = px + c * h * win;
          for (int o = 0; o < co; ++o) {
            const double* gyo = gy + static_cast<int64_t>(o) * ho * wo;
            double* gwc = gw + ((c * co + o) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                double acc = 0.0;
                for (int iy = 0; iy < h; ++iy) {
                  const int oy = iy * stride - padding + ky;
                  if (oy < 0 || oy >= ho) continue;
                  const double* xr = xc + static_cast<int64_t>(iy) * win;
                  const double* gyr = gyo + static_cast<int64_t>(oy) * wo;
                  for (int ix = 0; ix < win; ++ix) {
                    const int ox = ix * stride - padding + kx;
                    if (ox < 0 || ox >= wo) continue;
                    acc += xr[ix] * gyr[ox];
                  }
                }
                gwc[static_cast<int64_t>(ky) * kw + kx] += acc;
              }
            }
          }
        }
      });
      if (bias.defined()) {
        double* gb = bias.grad().data();
        for (int o = 0; o < co; ++o) {
          const double* gyo = gy + static_cast<int64_t>(o) * ho * wo;
          double acc = 0.0;
          for (int64_t i = 0; i < static_cast<int64_t>(ho) * wo; ++i) acc += gyo[i];
          gb[o] += acc;
        }
      }
    });
  }
  return y;
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding, Tape* tape) {
  require_3d(x, "maxpool2d input");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = (h + 2 * padding - kernel) / stride + 1;
  const int wo = (w + 2 * padding - kernel) / stride + 1;
  Tensor y = Tensor::zeros({c, ho, wo});
  Tensor arg = Tensor::zeros({c, ho, wo});  // flat input index of each max
  const double* px = x.value().data();
  double* py = y.value().data();
  double* pa = arg.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = px + static_cast<int64_t>(ch) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            const double v = xc[static_cast<int64_t>(iy) * w + ix];
            if (v > best) {
              best = v;
              best_idx = static_cast<int64_t>(ch) * h * w + static_cast<int64_t>(iy) * w + ix;
            }
          }
        }
        const int64_t oidx = (static_cast<int64_t>(ch) * ho + oy) * wo + ox;
        py[oidx] = best;
        pa[oidx] = static_cast<double>(best_idx);
      }
    }
  }
  if (tape) {
    tape->record({x, y}, [x, y, arg]() mutable {
      const double* gy = y.grad().data();
      const double* pa = arg.value().data();
      double* gx = x.grad().data();
      const int64_t n = y.size();
      for (int64_t i = 0; i < n; ++i) {
        gx[static_cast<int64_t>(pa[i])] += gy[i];
      }
    });
  }
  return y;
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tape* tape) {
  require_3d(x, "channel_affine input");
  const int c = x.dim(0);
  const int64_t plane = static_cast<int64_t>(x.dim(1)) * x.dim(2);
  require(gamma.defined() && gamma.size() == c && beta.defined() && beta.size() == c,
          "channel_affine params must have length " + std::to_string(c));
  Tensor y = Tensor::zeros(x.shape());
  const double* px = x.value().data();
  const double* pg = gamma.value().data();
  const double* pb = beta.value().data();
  double* py = y.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const double g = pg[ch], b = pb[ch];
    const double* xc = px + ch * plane;
    double* yc = py + ch * plane;
    for (int64_t i = 0; i < plane; ++i) yc[i] = g * xc[i] + b;
  }
  if (tape) {
    tape->record({x, gamma, beta, y}, [x, gamma, beta, y, c, plane]() mutable {
      const double* gy = y.grad().data();
      const double* px = x.value().data();
      const double* pg = gamma.value().data();
      double* gx = x.grad().data();
      double* gg = gamma.grad().data();
      double* gb = beta.grad().data();
      for (int ch = 0; ch < c; ++ch) {
        const double* gyc = gy + ch * plane;
        const double* xc = px + ch * plane;
        double* gxc = gx + ch * plane;
        double acc_g = 0.0, acc_b = 0.0;
        const double g = pg[ch];
        for (int64_t i = 0; i < plane; ++i) {
          gxc[i] += g * gyc[i];
          acc_g += gyc[i] * xc[i];
          acc_b += gyc[i];
        }
        gg[ch] += acc_g;
        gb[ch] += acc_b;
      }
    });
  }
  return y;
}

Tensor bilinear_upsample(const Tensor& x, int factor, Tape* tape) {
  require_3d(x, "bilinear_upsample input");
  require(factor >= 1, "bilinear_upsample factor must be >= 1");
  if (factor == 1) {
    Tensor y = x.clone();
    if (tape) {
      const int64_t n = x.size();
      tape->record({x, y}, [x, y, n]() mutable {
        const double* gy = y.grad().data();
        double* gx = x.grad().data();
        for (int64_t i = 0; i < n; ++i) gx[i] += gy[i];
      });
    }
    return y;
  }
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h * factor, wo = w * factor;
  Tensor y = Tensor::zeros({c, ho, wo});
  // precompute source offsets and weights per output coordinate
  std::vector<int> y0(ho), y1(ho), x0(wo), x1(wo);
  std::vector<double> wy(ho), wx(wo);
  for (int oy = 0; oy < ho; ++oy) {
    double sy = (oy + 0.5) / factor - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    y0[oy] = static_cast<int>(std::floor(sy));
    y1[oy] = std::min(y0[oy] + 1, h - 1);
    wy[oy] = sy - y0[oy];
  }
  for (int ox = 0; ox < wo; ++ox) {
    double sx = (ox + 0.5) / factor - 0.5;
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    x0[ox] = static_cast<int>(std::floor(sx));
    x1[ox] = std::min(x0[ox] + 1, w - 1);
    wx[ox] = sx - x0[ox];
  }
  {
    const double* px = x.value().data();
    double* py = y.value().data();
    for (int ch = 0; ch < c; ++ch) {
      const double* xc = px + static_cast<int64_t>(ch) * h * w;
      double* yc = py + static_cast<int64_t>(ch) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const double fy = wy[oy];
        const double* r0 = xc + static_cast<int64_t>(y0[oy]) * w;
        const double* r1 = xc + static_cast<int64_t>(y1[oy]) * w;
        double* yr = yc + static_cast<int64_t>(oy) * wo;
        for (int ox = 0; ox < wo; ++ox) {
          const double fx = wx[ox];
          yr[ox] = (1 - fy) * ((1 - fx) * r0[x0[ox]] + fx * r0[x1[ox]]) +
                   fy * ((1 - fx) * r1[x0[ox]] + fx * r1[x1[ox]]);
        }
      }
    }
  }
  if (tape) {
    tape->record({x, y}, [x, y, c, h, w, ho, wo, y0, y1, x0, x1, wy, wx]() mutable {
      const double* gy = y.grad().data();
      double* gx = x.grad().data();
      for (int ch = 0; ch < c; ++ch) {
        double* gxc = gx + static_cast<int64_t>(ch) * h * w;
        const double* gyc = gy + static_cast<int64_t>(ch) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const double fy = wy[oy];
          const double* gyr = gyc + static_cast<int64_t>(oy) * wo;
          double* g0 = gxc + static_cast<int64_t>(y0[oy]) * w;
          double* g1 = gxc + static_cast<int64_t>(y1[oy]) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const double g = gyr[ox];
            if (g == 0.0) continue;
            const double fx = wx[ox];
            g0[x0[ox]] += g * (1 - fy) * (1 - fx);
            g0[x1[ox]] += g * (1 - fy) * fx;
            g1[x0[ox]] += g * fy * (1 - fx);
            g1[x1[ox]] += g * fy * fx;
          }
        }
      }
    });
  }
  return y;
}

Tensor seq_from_chw(const Tensor& x, Tape* tape) {
  require_3d(x, "seq_from_chw input");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t len = static_cast<int64_t>(h) * w;
  Tensor y = Tensor::zeros({static_cast<int>(len), c});
  const double* px = x.value().data();
  double* py = y.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = px + static_cast<int64_t>(ch) * len;
    for (int64_t p = 0; p < len; ++p) py[p * c + ch] = xc[p];
  }
  if (tape) {
    tape->record({x, y}, [x, y, c, len]() mutable {
      const double* gy = y.grad().data();
      double* gx = x.grad().data();
      for (int ch = 0; ch < c; ++ch) {
        double* gxc = gx + static_cast<int64_t>(ch) * len;
        for (int64_t p = 0; p < len; ++p) gxc[p] += gy[p * c + ch];
      }
    });
  }
  return y;
}

Tensor chw_from_seq(const Tensor& x, int height, int width, Tape* tape) {
  require_2d(x, "chw_from_seq input");
  const int64_t len = static_cast<int64_t>(height) * width;
  require(x.dim(0) == len, "sequence length " + std::to_string(x.dim(0)) +
                               " != " + std::to_string(height) + "*" + std::to_string(width));
  const int c = x.dim(1);
  Tensor y = Tensor::zeros({c, height, width});
  const double* px = x.value().data();
  double* py = y.value().data();
  for (int ch = 0; ch < c; ++ch) {
    double* yc = py + static_cast<int64_t>(ch) * len;
    for (int64_t p = 0; p < len; ++p) yc[p] = px[p * c + ch];
  }
  if (tape) {
    tape->record({x, y}, [x, y, c, len]() mutable {
      const double* gy = y.grad().data();
      double* gx = x.grad().data();
      for (int ch = 0; ch < c; ++ch) {
        const double* gyc = gy + static_cast<int64_t>(ch) * len;
        for (int64_t p = 0; p < len; ++p) gx[p * c + ch] += gyc[p];
      }
    });
  }
  return y;
}

Tensor col_slice(const Tensor& x, int first, int count, Tape* tape) {
  require_2d(x, "col_slice input");
  require(first >= 0 && count >= 1 && first + count <= x.dim(1),
          "col_slice [" + std::to_string(first) + ", " + std::to_string(first + count) +
              ") out of range for " + shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor y = Tensor::zeros({rows, count});
  const double* px = x.value().data();
  double* py = y.value().data();
  for (int i = 0; i < rows; ++i) {
    const double* xr = px + static_cast<int64_t>(i) * cols + first;
    double* yr = py + static_cast<int64_t>(i) * count;
    for (int j = 0; j < count; ++j) yr[j] = xr[j];
  }
  if (tape) {
    tape->record({x, y}, [x, y, first, count, rows, cols]() mutable {
      const double* gy = y.grad().data();
      double* gx = x.grad().data();
      for (int i = 0; i < rows; ++i) {
        double* gxr = gx + static_cast<int64_t>(i) * cols + first;
        const double* gyr = gy + static_cast<int64_t>(i) * count;
        for (int j = 0; j < count; ++j) gxr[j] += gyr[j];
      }
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape) {
  require(!parts.empty(), "concat_cols needs at least one part");
  const int rows = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols part");
    require(p.dim(0) == rows, "concat_cols row counts disagree: " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
    cols += p.dim(1);
  }
  Tensor y = Tensor::zeros({rows, cols});
  double* py = y.value().data();
  int off = 0;
  for (const auto& p : parts) {
    const int pc = p.dim(1);
    const double* pp = p.value().data();
    for (int i = 0; i < rows; ++i) {
      double* yr = py + static_cast<int64_t>(i) * cols + off;
      const double* pr = pp + static_cast<int64_t>(i) * pc;
      for (int j = 0; j < pc; ++j) yr[j] = pr[j];
    }
    off += pc;
  }
  if (tape) {
    std::vector<Tensor> touched = parts;
    touched.push_back(y);
    tape->record(std::move(touched), [parts, y, rows, cols]() mutable {
      const double* gy = y.grad().data();
      int off = 0;
      for (auto& p : parts) {
        const int pc = p.dim(1);
        double* gp = p.grad().data();
        for (int i = 0; i < rows; ++i) {
          const double* gyr = gy + static_cast<int64_t>(i) * cols + off;
          double* gpr = gp + static_cast<int64_t>(i) * pc;
          for (int j = 0; j < pc; ++j) gpr[j] += gyr[j];
        }
        off += pc;
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& x, Tape* tape) {
  double acc = 0.0;
  for (double v : x.value()) acc += v;
  Tensor y = Tensor::scalar(acc);
  if (tape) {
    const int64_t n = x.size();
    tape->record({x, y}, [x, y, n]() mutable {
      const double g = y.grad()[0];
      double* gx = x.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return y;
}

Tensor select(const Tensor& x, int64_t flat_index, Tape* tape) {
  require(flat_index >= 0 && flat_index < x.size(),
          "select index " + std::to_string(flat_index) + " out of range for " +
              shape_str(x.shape()));
  Tensor y = Tensor::scalar(x.value()[static_cast<size_t>(flat_index)]);
  if (tape) {
    tape->record({x, y}, [x, y, flat_index]() mutable {
      x.grad()[static_cast<size_t>(flat_index)] += y.grad()[0];
    });
  }
  return y;
}

Tensor mse_masked(const Tensor& pred, const Tensor& target,
                  const std::vector<bool>& channel_mask, Tape* tape) {
  require_3d(pred, "mse_masked pred");
  require(target.defined() && pred.shape() == target.shape(),
          "mse_masked shapes disagree: " + shape_str(pred.shape()) + " vs " +
              shape_str(target.shape()));
  const int k = pred.dim(0);
  require(static_cast<int>(channel_mask.size()) == k,
          "mse_masked mask length " + std::to_string(channel_mask.size()) +
              " != channels " + std::to_string(k));
  const int64_t plane = static_cast<int64_t>(pred.dim(1)) * pred.dim(2);
  int64_t count = 0;
  for (bool b : channel_mask)
    if (b) count += plane;
  if (count == 0) return Tensor::scalar(0.0);
  double acc = 0.0;
  const double* pp = pred.value().data();
  const double* pt = target.value().data();
  for (int ch = 0; ch < k; ++ch) {
    if (!channel_mask[static_cast<size_t>(ch)]) continue;
    const double* a = pp + ch * plane;
    const double* b = pt + ch * plane;
    for (int64_t i = 0; i < plane; ++i) {
      const double d = a[i] - b[i];
      acc += d * d;
    }
  }
  Tensor y = Tensor::scalar(acc / static_cast<double>(count));
  if (tape) {
    tape->record({pred, y}, [pred, target, y, channel_mask, k, plane, count]() mutable {
      const double g = y.grad()[0] * 2.0 / static_cast<double>(count);
      const double* pp = pred.value().data();
      const double* pt = target.value().data();
      double* gp = pred.grad().data();
      for (int ch = 0; ch < k; ++ch) {
        if (!channel_mask[static_cast<size_t>(ch)]) continue;
        const double* a = pp + ch * plane;
        const double* b = pt + ch * plane;
        double* ga = gp + ch * plane;
        for (int64_t i = 0; i < plane; ++i) ga[i] += g * (a[i] - b[i]);
      }
    });
  }
  return y;
}

}  // namespace transpose
