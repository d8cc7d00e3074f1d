#pragma once

// Dense compute kernels behind the autodiff tape.
//
// Two implementations share every signature:
//   serial::   straight-line reference loops, one output element at a time.
//   parallel:: OpenMP kernels with row-vectorizable inner loops.
// Both accumulate each output element in the same term order, so with
// floating-point contraction disabled they agree bit-for-bit. The tape uses
// parallel::; tests and the benchmark compare it against serial::.

#include <cstddef>

namespace vqa::kernels {

/// Geometry of a stride-1 zero-padded square-kernel convolution on one image.
struct ConvGeometry {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t height;
  std::size_t width;
  std::size_t kernel;
  std::size_t pad;

  std::size_t out_height() const { return height + 2 * pad - kernel + 1; }
  std::size_t out_width() const { return width + 2 * pad - kernel + 1; }
};

namespace serial {

/// C[M,N] = op(A) * op(B). op(A) is MxK, op(B) is KxN. A is stored KxM when
/// trans_a, B is stored NxK when trans_b.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
          std::size_t k, bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = acc;
    }
  }
}

/// y[o,oy,ox] = bias[o] + sum_{c,ky,kx} w[o,c,ky,kx] * x[c, oy+ky-pad, ox+kx-pad]
template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y,
                    const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = bias ? bias[o] : T{0};
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = long(oy + ky) - long(g.pad);
              const long ix = long(ox + kx) - long(g.pad);
              if (iy < 0 || ix < 0 || iy >= long(g.height) ||
                  ix >= long(g.width)) {
                continue;
              }
              acc += w[((o * g.in_channels + c) * k + ky) * k + kx] *
                     x[(c * g.height + std::size_t(iy)) * g.width +
                       std::size_t(ix)];
            }
          }
        }
        y[(o * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

/// dx = gradient of conv2d_forward w.r.t. x given dy.
template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx,
                           const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t iy = 0; iy < g.height; ++iy) {
      for (std::size_t ix = 0; ix < g.width; ++ix) {
        T acc{0};
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long oy = long(iy + g.pad) - long(ky);
              const long ox = long(ix + g.pad) - long(kx);
              if (oy < 0 || ox < 0 || oy >= long(oh) || ox >= long(ow)) {
                continue;
              }
              acc += w[((o * g.in_channels + c) * k + ky) * k + kx] *
                     dy[(o * oh + std::size_t(oy)) * ow + std::size_t(ox)];
            }
          }
        }
        dx[(c * g.height + iy) * g.width + ix] = acc;
      }
    }
  }
}

/// dw, dbias = gradients of conv2d_forward w.r.t. weights and bias.
template <typename T>
void conv2d_backward_params(const T* dy, const T* x, T* dw, T* dbias,
                            const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          T acc{0};
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long iy = long(oy + ky) - long(g.pad);
              const long ix = long(ox + kx) - long(g.pad);
              if (iy < 0 || ix < 0 || iy >= long(g.height) ||
                  ix >= long(g.width)) {
                continue;
              }
              acc += dy[(o * oh + oy) * ow + ox] *
                     x[(c * g.height + std::size_t(iy)) * g.width +
                       std::size_t(ix)];
            }
          }
          dw[((o * g.in_channels + c) * k + ky) * k + kx] = acc;
        }
      }
    }
    if (dbias) {
      T acc{0};
      for (std::size_t p = 0; p < oh * ow; ++p) acc += dy[o * oh * ow + p];
      dbias[o] = acc;
    }
  }
}

}  // namespace serial

namespace parallel {

// Below this many multiply-adds a parallel region costs more than it saves.
inline constexpr std::size_t kMinParallelWork = std::size_t{1} << 15;

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
          std::size_t k, bool trans_a, bool trans_b) {
  const long rows = long(m);
  [[maybe_unused]] const bool big = m * n * k >= kMinParallelWork;
  if (trans_b) {
#pragma omp parallel for if (big) schedule(static)
    for (long i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc{0};
        if (trans_a) {
          for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
        } else {
          const T* arow = a + std::size_t(i) * k;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        }
        c[std::size_t(i) * n + j] = acc;
      }
    }
    return;
  }
#pragma omp parallel for if (big) schedule(static)
  for (long i = 0; i < rows; ++i) {
    T* crow = c + std::size_t(i) * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = T{0};
    for (std::size_t p = 0; p < k; ++p) {
      const T av = trans_a ? a[p * m + std::size_t(i)] : a[std::size_t(i) * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace detail {

// Valid output-column range [lo, hi) for a kernel tap offset so that the
// input column ox + kx - pad stays inside [0, width).
inline void tap_range(std::size_t kx, std::size_t pad, std::size_t width,
                      std::size_t out_width, std::size_t& lo,
                      std::size_t& hi) {
  lo = kx < pad ? pad - kx : 0;
  const long h = long(width) + long(pad) - long(kx);
  hi = h < 0 ? 0 : std::size_t(h);
  if (hi > out_width) hi = out_width;
  if (lo > hi) lo = hi;
}

}  // namespace detail

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y,
                    const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  [[maybe_unused]] const bool big =
      g.out_channels * g.in_channels * k * k * oh * ow >= kMinParallelWork;
#pragma omp parallel for if (big) schedule(static)
  for (long o = 0; o < long(g.out_channels); ++o) {
    T* yo = y + std::size_t(o) * oh * ow;
    const T b0 = bias ? bias[o] : T{0};
    for (std::size_t p = 0; p < oh * ow; ++p) yo[p] = b0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const T* xc = x + c * g.height * g.width;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = w[((std::size_t(o) * g.in_channels + c) * k + ky) * k + kx];
          std::size_t lo, hi;
          detail::tap_range(kx, g.pad, g.width, ow, lo, hi);
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = long(oy + ky) - long(g.pad);
            if (iy < 0 || iy >= long(g.height)) continue;
            const std::size_t base = std::size_t(iy) * g.width + kx;
            T* yrow = yo + oy * ow;
            for (std::size_t ox = lo; ox < hi; ++ox) {
              yrow[ox] += wv * xc[base + ox - g.pad];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx,
                           const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  [[maybe_unused]] const bool big =
      g.out_channels * g.in_channels * k * k * oh * ow >= kMinParallelWork;
#pragma omp parallel for if (big) schedule(static)
  for (long c = 0; c < long(g.in_channels); ++c) {
    T* dxc = dx + std::size_t(c) * g.height * g.width;
    for (std::size_t p = 0; p < g.height * g.width; ++p) dxc[p] = T{0};
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const T* dyo = dy + o * oh * ow;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = w[((o * g.in_channels + std::size_t(c)) * k + ky) * k + kx];
          // input column ix pairs with output column ix + pad - kx
          std::size_t lo, hi;
          detail::tap_range(g.pad, kx, ow, g.width, lo, hi);
          for (std::size_t iy = 0; iy < g.height; ++iy) {
            const long oy = long(iy + g.pad) - long(ky);
            if (oy < 0 || oy >= long(oh)) continue;
            const std::size_t base = std::size_t(oy) * ow + g.pad;
            T* dxrow = dxc + iy * g.width;
            for (std::size_t ix = lo; ix < hi; ++ix) {
              dxrow[ix] += wv * dyo[base + ix - kx];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_params(const T* dy, const T* x, T* dw, T* dbias,
                            const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  [[maybe_unused]] const bool big =
      g.out_channels * g.in_channels * k * k * oh * ow >= kMinParallelWork;
#pragma omp parallel for if (big) schedule(static)
  for (long o = 0; o < long(g.out_channels); ++o) {
    const T* dyo = dy + std::size_t(o) * oh * ow;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const T* xc = x + c * g.height * g.width;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          std::size_t lo, hi;
          detail::tap_range(kx, g.pad, g.width, ow, lo, hi);
          T acc{0};
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = long(oy + ky) - long(g.pad);
            if (iy < 0 || iy >= long(g.height)) continue;
            const std::size_t base = std::size_t(iy) * g.width + kx;
            const T* dyrow = dyo + oy * ow;
            for (std::size_t ox = lo; ox < hi; ++ox) {
              acc += dyrow[ox] * xc[base + ox - g.pad];
            }
          }
          dw[((std::size_t(o) * g.in_channels + c) * k + ky) * k + kx] = acc;
        }
      }
    }
    if (dbias) {
      T acc{0};
      for (std::size_t p = 0; p < oh * ow; ++p) acc += dyo[p];
      dbias[o] = acc;
    }
  }
}

}  // namespace parallel

}  // namespace vqa::kernels
