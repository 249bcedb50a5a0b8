#include "uroscan/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <sstream>

namespace uroscan::ops {
namespace {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using VecCol = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using VecRow = Eigen::Matrix<T, 1, Eigen::Dynamic>;

bool wants(Tape* tape, const Tensor& t) { return tape && tape->wants_grad(t); }

void check_dtype_match(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ValidationError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) +
                          " and " + dtype_name(b.dtype()));
}

[[noreturn]] void shape_fail(const char* op, const char* what, const Shape& got) {
  throw ShapeError(std::string(op) + ": " + what + ", got " + shape_str(got));
}

struct PoolDims {
  int64_t n, c, h, w, oh, ow;
  int window, stride, padding;
};

PoolDims pool_dims(const char* op, const Tensor& input, int window, int stride, int padding) {
  if (input.shape().size() != 4) shape_fail(op, "input must be [N,C,H,W]", input.shape());
  if (window < 1) throw ValidationError(std::string(op) + ": window must be >= 1");
  if (stride < 1) throw ValidationError(std::string(op) + ": stride must be >= 1");
  if (padding < 0 || padding >= window)
    throw ValidationError(std::string(op) + ": padding must be in [0, window)");
  PoolDims d{input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3],
             0,               0,               window,           stride,          padding};
  if (d.h + 2 * padding < window || d.w + 2 * padding < window)
    shape_fail(op, "window larger than padded input", input.shape());
  d.oh = (d.h + 2 * padding - window) / stride + 1;
  d.ow = (d.w + 2 * padding - window) / stride + 1;
  return d;
}

// Unpacks conv patches into a [C*kh*kw, OH*OW] row-major matrix, zero-filling
// padded positions.
template <class T>
void im2col(const T* in, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* col) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        T* dst = col + ((c * kh + i) * kw + j) * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + OW, T{0});
            dst += OW;
            continue;
          }
          const T* src = in + (c * H + iy) * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride - pad + j;
            *dst++ = (ix >= 0 && ix < W) ? src[ix] : T{0};
          }
        }
      }
}

/// Scatter-adds a column matrix back onto the input layout (adjoint of im2col).
template <class T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* gin) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        const T* src = col + ((c * kh + i) * kw + j) * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) {
            src += OW;
            continue;
          }
          T* dst = gin + (c * H + iy) * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride - pad + j;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
          src += OW;
        }
      }
}

}  // namespace

void ensure_finite(const Tensor& t, const char* context) {
  dispatch_dtype(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (size_t i = 0; i < d.size(); ++i)
      if (!std::isfinite(d[i])) {
        std::ostringstream os;
        os << context << ": non-finite value at flat index " << i << " of tensor "
           << shape_str(t.shape());
        throw NumericError(os.str());
      }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding, Tape* tape) {
  if (input.shape().size() != 4) shape_fail("conv2d", "input must be [N,C,H,W]", input.shape());
  if (kernel.shape().size() != 4)
    shape_fail("conv2d", "kernel must be [K,C,kh,kw]", kernel.shape());
  const int64_t N = input.shape()[0], C = input.shape()[1];
  const int64_t H = input.shape()[2], W = input.shape()[3];
  const int64_t K = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (kernel.shape()[1] != C)
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.shape()[1]) +
                     " input channels, input has " + std::to_string(C));
  if (bias.shape().size() != 1 || bias.shape()[0] != K)
    shape_fail("conv2d", "bias must be [K]", bias.shape());
  if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
  if (padding < 0) throw ValidationError("conv2d: padding must be >= 0");
  check_dtype_match(input, kernel, "conv2d");
  check_dtype_match(input, bias, "conv2d");
  if (H + 2 * padding < kh || W + 2 * padding < kw)
    shape_fail("conv2d", "kernel larger than padded input", input.shape());

  const int64_t OH = (H + 2 * padding - kh) / stride + 1;
  const int64_t OW = (W + 2 * padding - kw) / stride + 1;
  const int64_t CKK = C * kh * kw, OHW = OH * OW;
  Tensor out({N, K, OH, OW}, input.dtype());

  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = input.data<T>().data();
    AlignedVec<T> colbuf(static_cast<size_t>(CKK * OHW));
    Eigen::Map<const MatRM<T>> Wm(kernel.data<T>().data(), K, CKK);
    Eigen::Map<const VecCol<T>> b(bias.data<T>().data(), K);
    T* outp = out.data<T>().data();
    for (int64_t n = 0; n < N; ++n) {
      im2col(in + n * C * H * W, C, H, W, kh, kw, stride, padding, OH, OW, colbuf.data());
      Eigen::Map<const MatRM<T>> Col(colbuf.data(), CKK, OHW);
      Eigen::Map<MatRM<T>> Out(outp + n * K * OHW, K, OHW);
      Out.noalias() = Wm * Col;
      Out.colwise() += b;
    }
  });

  const bool wi = wants(tape, input), wk = wants(tape, kernel), wb = wants(tape, bias);
  if (wi || wk || wb) {
    tape->record(
        "conv2d", {input, kernel, bias}, out,
        [input = input, kernel = kernel, bias = bias, out, stride, padding, wi, wk, wb, N, C,
         H, W, K, kh, kw, OH, OW, CKK, OHW]() mutable {
          dispatch_dtype(input.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* in = input.data<T>().data();
            const T* go = out.grad<T>().data();
            T* gin = wi ? input.grad<T>().data() : nullptr;
            T* gk = wk ? kernel.grad<T>().data() : nullptr;
            T* gb = wb ? bias.grad<T>().data() : nullptr;
            AlignedVec<T> colbuf(wk ? static_cast<size_t>(CKK * OHW) : 0);
            AlignedVec<T> dcolbuf(wi ? static_cast<size_t>(CKK * OHW) : 0);
            Eigen::Map<const MatRM<T>> Wm(kernel.data<T>().data(), K, CKK);
            for (int64_t n = 0; n < N; ++n) {
              Eigen::Map<const MatRM<T>> GO(go + n * K * OHW, K, OHW);
              if (wk) {
                im2col(in + n * C * H * W, C, H, W, kh, kw, stride, padding, OH, OW,
                       colbuf.data());
                Eigen::Map<const MatRM<T>> Col(colbuf.data(), CKK, OHW);
                Eigen::Map<MatRM<T>> GK(gk, K, CKK);
                GK.noalias() += GO * Col.transpose();
              }
              if (wb) {
                Eigen::Map<VecCol<T>> GB(gb, K);
                GB.noalias() += GO.rowwise().sum();
              }
              if (wi) {
                Eigen::Map<MatRM<T>> DCol(dcolbuf.data(), CKK, OHW);
                DCol.noalias() = Wm.transpose() * GO;
                col2im_add(dcolbuf.data(), C, H, W, kh, kw, stride, padding, OH, OW,
                           gin + n * C * H * W);
              }
            }
          });
        });
  }
  return out;
}

Tensor max_pool2d(const Tensor& input, int window, int stride, int padding, Tape* tape) {
  const PoolDims d = pool_dims("max_pool2d", input, window, stride, padding);
  Tensor out({d.n, d.c, d.oh, d.ow}, input.dtype());
  const bool wi = wants(tape, input);
  auto argmax = std::make_shared<std::vector<int64_t>>(
      wi ? static_cast<size_t>(out.numel()) : size_t{0});

  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = input.data<T>().data();
    T* op = out.data<T>().data();
    int64_t o = 0;
    for (int64_t n = 0; n < d.n; ++n)
      for (int64_t c = 0; c < d.c; ++c) {
        const T* plane = in + (n * d.c + c) * d.h * d.w;
        const int64_t plane_off = (n * d.c + c) * d.h * d.w;
        for (int64_t oy = 0; oy < d.oh; ++oy)
          for (int64_t ox = 0; ox < d.ow; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            int64_t best_at = -1;
            for (int64_t i = 0; i < d.window; ++i) {
              const int64_t iy = oy * d.stride - d.padding + i;
              if (iy < 0 || iy >= d.h) continue;
              for (int64_t j = 0; j < d.window; ++j) {
                const int64_t ix = ox * d.stride - d.padding + j;
                if (ix < 0 || ix >= d.w) continue;
                const T v = plane[iy * d.w + ix];
                if (v > best) {
                  best = v;
                  best_at = plane_off + iy * d.w + ix;
                }
              }
            }
            op[o] = best;
            if (wi) (*argmax)[static_cast<size_t>(o)] = best_at;
          }
      }
  });

  if (wi) {
    tape->record("max_pool2d", {input}, out, [input = input, out, argmax]() mutable {
      dispatch_dtype(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto go = out.grad<T>();
        auto gin = input.grad<T>();
        for (size_t o = 0; o < go.size(); ++o) gin[(*argmax)[o]] += go[o];
      });
    });
  }
  return out;
}

Tensor avg_pool2d(const Tensor& input, int window, int stride, int padding, Tape* tape) {
  const PoolDims d = pool_dims("avg_pool2d", input, window, stride, padding);
  Tensor out({d.n, d.c, d.oh, d.ow}, input.dtype());

  // Window extents clipped to the input; the mean divides by the in-bounds
  // cell count, so padded rings do not dilute edge windows.
  auto cell_count = [d](int64_t oy, int64_t ox) {
    const int64_t y0 = std::max<int64_t>(0, oy * d.stride - d.padding);
    const int64_t y1 = std::min<int64_t>(d.h, oy * d.stride - d.padding + d.window);
    const int64_t x0 = std::max<int64_t>(0, ox * d.stride - d.padding);
    const int64_t x1 = std::min<int64_t>(d.w, ox * d.stride - d.padding + d.window);
    return (y1 - y0) * (x1 - x0);
  };

  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = input.data<T>().data();
    T* op = out.data<T>().data();
    int64_t o = 0;
    for (int64_t n = 0; n < d.n; ++n)
      for (int64_t c = 0; c < d.c; ++c) {
        const T* plane = in + (n * d.c + c) * d.h * d.w;
        for (int64_t oy = 0; oy < d.oh; ++oy)
          for (int64_t ox = 0; ox < d.ow; ++ox, ++o) {
            double acc = 0.0;
            for (int64_t i = 0; i < d.window; ++i) {
              const int64_t iy = oy * d.stride - d.padding + i;
              if (iy < 0 || iy >= d.h) continue;
              for (int64_t j = 0; j < d.window; ++j) {
                const int64_t ix = ox * d.stride - d.padding + j;
                if (ix < 0 || ix >= d.w) continue;
                acc += static_cast<double>(plane[iy * d.w + ix]);
              }
            }
            op[o] = static_cast<T>(acc / static_cast<double>(cell_count(oy, ox)));
          }
      }
  });

  if (wants(tape, input)) {
    tape->record("avg_pool2d", {input}, out, [input = input, out, d, cell_count]() mutable {
      dispatch_dtype(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto go = out.grad<T>();
        auto gin = input.grad<T>();
        int64_t o = 0;
        for (int64_t n = 0; n < d.n; ++n)
          for (int64_t c = 0; c < d.c; ++c) {
            const int64_t plane_off = (n * d.c + c) * d.h * d.w;
            for (int64_t oy = 0; oy < d.oh; ++oy)
              for (int64_t ox = 0; ox < d.ow; ++ox, ++o) {
                const T share =
                    static_cast<T>(static_cast<double>(go[static_cast<size_t>(o)]) /
                                   static_cast<double>(cell_count(oy, ox)));
                for (int64_t i = 0; i < d.window; ++i) {
                  const int64_t iy = oy * d.stride - d.padding + i;
                  if (iy < 0 || iy >= d.h) continue;
                  for (int64_t j = 0; j < d.window; ++j) {
                    const int64_t ix = ox * d.stride - d.padding + j;
                    if (ix < 0 || ix >= d.w) continue;
                    gin[static_cast<size_t>(plane_off + iy * d.w + ix)] += share;
                  }
                }
              }
          }
      });
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input, Tape* tape) {
  if (input.shape().size() != 4)
    shape_fail("global_avg_pool", "input must be [N,C,H,W]", input.shape());
  const int64_t N = input.shape()[0], C = input.shape()[1];
  const int64_t HW = input.shape()[2] * input.shape()[3];
  Tensor out({N, C}, input.dtype());

  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = input.data<T>().data();
    T* op = out.data<T>().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) acc += static_cast<double>(in[nc * HW + i]);
      op[nc] = static_cast<T>(acc / static_cast<double>(HW));
    }
  });

  if (wants(tape, input)) {
    tape->record("global_avg_pool", {input}, out, [input = input, out, N, C, HW]() mutable {
      dispatch_dtype(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto go = out.grad<T>();
        auto gin = input.grad<T>();
        const T inv = static_cast<T>(1.0 / static_cast<double>(HW));
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const T share = go[static_cast<size_t>(nc)] * inv;
          for (int64_t i = 0; i < HW; ++i) gin[static_cast<size_t>(nc * HW + i)] += share;
        }
      });
    });
  }
  return out;
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias, Tape* tape) {
  if (input.shape().size() != 2) shape_fail("dense", "input must be [N,F]", input.shape());
  if (weight.shape().size() != 2) shape_fail("dense", "weight must be [F,G]", weight.shape());
  const int64_t N = input.shape()[0], F = input.shape()[1], G = weight.shape()[1];
  if (weight.shape()[0] != F)
    throw ShapeError("dense: input features " + std::to_string(F) + " vs weight rows " +
                     std::to_string(weight.shape()[0]));
  if (bias.shape().size() != 1 || bias.shape()[0] != G)
    shape_fail("dense", "bias must be [G]", bias.shape());
  check_dtype_match(input, weight, "dense");
  check_dtype_match(input, bias, "dense");

  Tensor out({N, G}, input.dtype());
  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Eigen::Map<const MatRM<T>> In(input.data<T>().data(), N, F);
    Eigen::Map<const MatRM<T>> Wm(weight.data<T>().data(), F, G);
    Eigen::Map<const VecRow<T>> b(bias.data<T>().data(), G);
    Eigen::Map<MatRM<T>> Out(out.data<T>().data(), N, G);
    Out.noalias() = In * Wm;
    Out.rowwise() += b;
  });

  const bool wi = wants(tape, input), ww = wants(tape, weight), wb = wants(tape, bias);
  if (wi || ww || wb) {
    tape->record("dense", {input, weight, bias}, out,
                 [input = input, weight = weight, bias = bias, out, wi, ww, wb, N, F, G]() mutable {
                   dispatch_dtype(input.dtype(), [&](auto tag) {
                     using T = decltype(tag);
                     Eigen::Map<const MatRM<T>> GO(out.grad<T>().data(), N, G);
                     if (wi) {
                       Eigen::Map<const MatRM<T>> Wm(weight.data<T>().data(), F, G);
                       Eigen::Map<MatRM<T>> GI(input.grad<T>().data(), N, F);
                       GI.noalias() += GO * Wm.transpose();
                     }
                     if (ww) {
                       Eigen::Map<const MatRM<T>> In(input.data<T>().data(), N, F);
                       Eigen::Map<MatRM<T>> GW(weight.grad<T>().data(), F, G);
                       GW.noalias() += In.transpose() * GO;
                     }
                     if (wb) {
                       Eigen::Map<VecRow<T>> GB(bias.grad<T>().data(), G);
                       GB.noalias() += GO.colwise().sum();
                     }
                   });
                 });
  }
  return out;
}

Tensor relu(const Tensor& input, Tape* tape) {
  Tensor out(input.shape(), input.dtype());
  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = input.data<T>();
    auto op = out.data<T>();
    for (size_t i = 0; i < in.size(); ++i) op[i] = in[i] > T{0} ? in[i] : T{0};
  });

  if (wants(tape, input)) {
    tape->record("relu", {input}, out, [input = input, out]() mutable {
      dispatch_dtype(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto in = input.data<T>();
        auto go = out.grad<T>();
        auto gin = input.grad<T>();
        for (size_t i = 0; i < in.size(); ++i)
          if (in[i] > T{0}) gin[i] += go[i];
      });
    });
  }
  return out;
}

Tensor softmax(const Tensor& input, Tape* tape) {
  if (input.shape().size() != 2) shape_fail("softmax", "input must be [N,G]", input.shape());
  const int64_t N = input.shape()[0], G = input.shape()[1];
  Tensor out({N, G}, input.dtype());

  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = input.data<T>().data();
    T* op = out.data<T>().data();
    for (int64_t n = 0; n < N; ++n) {
      const T* row = in + n * G;
      T* orow = op + n * G;
      T m = row[0];
      for (int64_t j = 1; j < G; ++j) m = std::max(m, row[j]);
      double denom = 0.0;
      for (int64_t j = 0; j < G; ++j) {
        const double e = std::exp(static_cast<double>(row[j] - m));
        orow[j] = static_cast<T>(e);
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (int64_t j = 0; j < G; ++j) orow[j] = static_cast<T>(orow[j] * inv);
    }
  });

  if (wants(tape, input)) {
    tape->record("softmax", {input}, out, [input = input, out, N, G]() mutable {
      dispatch_dtype(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* y = out.data<T>().data();
        auto go = out.grad<T>();
        auto gin = input.grad<T>();
        for (int64_t n = 0; n < N; ++n) {
          double dot = 0.0;
          for (int64_t j = 0; j < G; ++j)
            dot += static_cast<double>(go[static_cast<size_t>(n * G + j)]) *
                   static_cast<double>(y[n * G + j]);
          for (int64_t j = 0; j < G; ++j) {
            const size_t at = static_cast<size_t>(n * G + j);
            gin[at] += static_cast<T>(static_cast<double>(y[n * G + j]) *
                                      (static_cast<double>(go[at]) - dot));
          }
        }
      });
    });
  }
  return out;
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training, double momentum,
                  double eps, Tape* tape) {
  const size_t rank = input.shape().size();
  if (rank != 2 && rank != 4)
    shape_fail("batch_norm", "input must be [N,C] or [N,C,H,W]", input.shape());
  const int64_t N = input.shape()[0], C = input.shape()[1];
  const int64_t HW = rank == 4 ? input.shape()[2] * input.shape()[3] : 1;
  const int64_t M = N * HW;  // elements per channel
  for (const Tensor* p : std::initializer_list<const Tensor*>{
           &gamma, &beta, &running_mean, &running_var}) {
    if (p->shape().size() != 1 || p->shape()[0] != C)
      shape_fail("batch_norm", "per-channel parameter must be [C]", p->shape());
    check_dtype_match(input, *p, "batch_norm");
  }
  if (momentum < 0.0 || momentum > 1.0)
    throw ValidationError("batch_norm: momentum must be in [0,1]");
  if (eps <= 0.0) throw ValidationError("batch_norm: eps must be positive");

  Tensor out(input.shape(), input.dtype());
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(C));

  dispatch_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = input.data<T>().data();
    const T* g = gamma.data<T>().data();
    const T* b = beta.data<T>().data();
    T* op = out.data<T>().data();
    auto for_channel = [&](int64_t c, auto&& fn) {
      for (int64_t n = 0; n < N; ++n) {
        const int64_t base = (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) fn(base + i);
      }
    };
    for (int64_t c = 0; c < C; ++c) {
      double mu, iv;
      if (training) {
        double sum = 0.0;
        for_channel(c, [&](int64_t at) { sum += static_cast<double>(in[at]); });
        mu = sum / static_cast<double>(M);
        double sq = 0.0;
        for_channel(c, [&](int64_t at) {
          const double dv = static_cast<double>(in[at]) - mu;
          sq += dv * dv;
        });
        const double var = std::max(sq / static_cast<double>(M), 0.0);
        iv = 1.0 / std::sqrt(var + eps);
        auto rm = running_mean.data<T>();
        auto rv = running_var.data<T>();
        rm[static_cast<size_t>(c)] = static_cast<T>(
            momentum * static_cast<double>(rm[static_cast<size_t>(c)]) +
            (1.0 - momentum) * mu);
        rv[static_cast<size_t>(c)] = static_cast<T>(
            momentum * static_cast<double>(rv[static_cast<size_t>(c)]) +
            (1.0 - momentum) * var);
      } else {
        mu = static_cast<double>(running_mean.data<T>()[static_cast<size_t>(c)]);
        const double var = static_cast<double>(running_var.data<T>()[static_cast<size_t>(c)]);
        if (var + eps <= 0.0)
          throw NumericError("batch_norm: running variance makes normalizer undefined");
        iv = 1.0 / std::sqrt(var + eps);
      }
      (*mean)[static_cast<size_t>(c)] = mu;
      (*inv_std)[static_cast<size_t>(c)] = iv;
      const double gc = static_cast<double>(g[c]), bc = static_cast<double>(b[c]);
      for_channel(c, [&](int64_t at) {
        op[at] = static_cast<T>((static_cast<double>(in[at]) - mu) * iv * gc + bc);
      });
    }
  });

  const bool wi = wants(tape, input), wg = wants(tape, gamma), wb = wants(tape, beta);
  if (wi || wg || wb) {
    tape->record(
        "batch_norm", {input, gamma, beta}, out,
        [input = input, gamma = gamma, beta = beta, out, mean, inv_std, training, wi, wg, wb,
         N, C, HW, M]() mutable {
          dispatch_dtype(input.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* in = input.data<T>().data();
            const T* g = gamma.data<T>().data();
            auto go = out.grad<T>();
            T* gin = wi ? input.grad<T>().data() : nullptr;
            T* gg = wg ? gamma.grad<T>().data() : nullptr;
            T* gb = wb ? beta.grad<T>().data() : nullptr;
            auto for_channel = [&](int64_t c, auto&& fn) {
              for (int64_t n = 0; n < N; ++n) {
                const int64_t base = (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) fn(base + i);
              }
            };
            for (int64_t c = 0; c < C; ++c) {
              const double mu = (*mean)[static_cast<size_t>(c)];
              const double iv = (*inv_std)[static_cast<size_t>(c)];
              double sum_dy = 0.0, sum_dy_xhat = 0.0;
              for_channel(c, [&](int64_t at) {
                const double dy = static_cast<double>(go[static_cast<size_t>(at)]);
                sum_dy += dy;
                sum_dy_xhat += dy * (static_cast<double>(in[at]) - mu) * iv;
              });
              if (wg) gg[c] += static_cast<T>(sum_dy_xhat);
              if (wb) gb[c] += static_cast<T>(sum_dy);
              if (wi) {
                const double gc = static_cast<double>(g[c]);
                if (training) {
                  const double k = gc * iv / static_cast<double>(M);
                  for_channel(c, [&](int64_t at) {
                    const double dy = static_cast<double>(go[static_cast<size_t>(at)]);
                    const double xhat = (static_cast<double>(in[at]) - mu) * iv;
                    gin[at] += static_cast<T>(
                        k * (static_cast<double>(M) * dy - sum_dy - xhat * sum_dy_xhat));
                  });
                } else {
                  // Frozen statistics: the normalizer is a constant affine map.
                  const double k = gc * iv;
                  for_channel(c, [&](int64_t at) {
                    gin[at] +=
                        static_cast<T>(k * static_cast<double>(go[static_cast<size_t>(at)]));
                  });
                }
              }
            }
          });
        });
  }
  return out;
}

Tensor cross_entropy(const Tensor& probs, const Tensor& onehot, Tape* tape) {
  if (probs.shape().size() != 2) shape_fail("cross_entropy", "probs must be [N,G]", probs.shape());
  if (onehot.shape() != probs.shape())
    throw ShapeError("cross_entropy: labels " + shape_str(onehot.shape()) +
                     " do not match probs " + shape_str(probs.shape()));
  check_dtype_match(probs, onehot, "cross_entropy");
  const int64_t N = probs.shape()[0], G = probs.shape()[1];

  auto targets = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N));
  dispatch_dtype(onehot.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* lab = onehot.data<T>().data();
    for (int64_t n = 0; n < N; ++n) {
      int64_t hot = -1;
      for (int64_t j = 0; j < G; ++j) {
        const T v = lab[n * G + j];
        if (v == T{1}) {
          if (hot >= 0) hot = -2;
          if (hot == -1) hot = j;
        } else if (v != T{0}) {
          hot = -2;
        }
        if (hot == -2) break;
      }
      if (hot < 0)
        throw ValidationError("cross_entropy: labels row " + std::to_string(n) +
                              " is not one-hot");
      (*targets)[static_cast<size_t>(n)] = hot;
    }
  });

  Tensor out({1}, probs.dtype());
  dispatch_dtype(probs.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* p = probs.data<T>().data();
    double acc = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      const double pt = static_cast<double>(p[n * G + (*targets)[static_cast<size_t>(n)]]);
      acc += std::log(std::max(pt, kLogClamp));
    }
    out.data<T>()[0] = static_cast<T>(-acc / static_cast<double>(N));
  });

  if (wants(tape, probs)) {
    tape->record("cross_entropy", {probs, onehot}, out, [probs = probs, out, targets, N, G]() mutable {
      dispatch_dtype(probs.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* p = probs.data<T>().data();
        const double gs = static_cast<double>(out.grad<T>()[0]);
        auto gp = probs.grad<T>();
        for (int64_t n = 0; n < N; ++n) {
          const int64_t at = n * G + (*targets)[static_cast<size_t>(n)];
          const double pt = static_cast<double>(p[at]);
          if (pt >= kLogClamp)
            gp[static_cast<size_t>(at)] +=
                static_cast<T>(-gs / (static_cast<double>(N) * pt));
          // Below the clamp the loss is locally constant in this probability.
        }
      });
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  check_dtype_match(a, b, "add");
  Tensor out(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] + pb[i];
  });
  const bool wa = wants(tape, a), wb = wants(tape, b);
  if (wa || wb) {
    tape->record("add", {a, b}, out, [a = a, b = b, out, wa, wb]() mutable {
      dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto go = out.grad<T>();
        if (wa) {
          auto ga = a.grad<T>();
          for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (wb) {
          auto gb = b.grad<T>();
          for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
      });
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  check_dtype_match(a, b, "mul");
  Tensor out(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] * pb[i];
  });
  const bool wa = wants(tape, a), wb = wants(tape, b);
  if (wa || wb) {
    tape->record("mul", {a, b}, out, [a = a, b = b, out, wa, wb]() mutable {
      dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto go = out.grad<T>();
        if (wa) {
          auto ga = a.grad<T>();
          auto pb = b.data<T>();
          for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb[i];
        }
        if (wb) {
          auto gb = b.grad<T>();
          auto pa = a.data<T>();
          for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa[i];
        }
      });
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c, Tape* tape) {
  if (!std::isfinite(c)) throw NumericError("scale: factor is not finite");
  Tensor out(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto po = out.data<T>();
    const T f = static_cast<T>(c);
    for (size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] * f;
  });
  if (wants(tape, a)) {
    tape->record("scale", {a}, out, [a = a, out, c]() mutable {
      dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto go = out.grad<T>();
        auto ga = a.grad<T>();
        const T f = static_cast<T>(c);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * f;
      });
    });
  }
  return out;
}

Tensor sum(const Tensor& a, Tape* tape) {
  Tensor out({1}, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    double acc = 0.0;
    for (T x : a.data<T>()) acc += static_cast<double>(x);
    out.data<T>()[0] = static_cast<T>(acc);
  });
  if (wants(tape, a)) {
    tape->record("sum", {a}, out, [a = a, out]() mutable {
      dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T g = out.grad<T>()[0];
        for (auto& x : a.grad<T>()) x += g;
      });
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape, Tape* tape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  Tensor out(std::move(shape), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::memcpy(out.data<T>().data(), a.data<T>().data(), a.data<T>().size_bytes());
  });
  if (wants(tape, a)) {
    tape->record("reshape", {a}, out, [a = a, out]() mutable {
      dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto go = out.grad<T>();
        auto ga = a.grad<T>();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      });
    });
  }
  return out;
}

Tensor flatten(const Tensor& a, Tape* tape) {
  if (a.shape().empty()) shape_fail("flatten", "input must have a batch axis", a.shape());
  const int64_t N = a.shape()[0];
  return reshape(a, {N, a.numel() / N}, tape);
}

Tensor concat_channels(std::span<const Tensor> parts, Tape* tape) {
  if (parts.empty()) throw ValidationError("concat_channels: no inputs");
  const Tensor& first = parts[0];
  if (first.shape().size() != 4)
    shape_fail("concat_channels", "inputs must be [N,C,H,W]", first.shape());
  const int64_t N = first.shape()[0], H = first.shape()[2], W = first.shape()[3];
  int64_t C = 0;
  for (const Tensor& p : parts) {
    if (p.shape().size() != 4 || p.shape()[0] != N || p.shape()[2] != H || p.shape()[3] != W)
      throw ShapeError("concat_channels: mismatched part " + shape_str(p.shape()) +
                       " against " + shape_str(first.shape()));
    check_dtype_match(first, p, "concat_channels");
    C += p.shape()[1];
  }
  Tensor out({N, C, H, W}, first.dtype());

  const int64_t HW = H * W;
  dispatch_dtype(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* op = out.data<T>().data();
    for (int64_t n = 0; n < N; ++n) {
      int64_t coff = 0;
      for (const Tensor& p : parts) {
        const int64_t pc = p.shape()[1];
        std::memcpy(op + (n * C + coff) * HW, p.data<T>().data() + n * pc * HW,
                    static_cast<size_t>(pc * HW) * sizeof(T));
        coff += pc;
      }
    }
  });

  bool any = false;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<char> want(parts.size(), 0);
  for (size_t i = 0; i < parts.size(); ++i) {
    want[i] = wants(tape, parts[i]) ? 1 : 0;
    any = any || want[i];
  }
  if (any) {
    tape->record("concat_channels", inputs, out, [inputs, out, want, N, C, HW]() mutable {
      dispatch_dtype(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* go = out.grad<T>().data();
        for (int64_t n = 0; n < N; ++n) {
          int64_t coff = 0;
          for (size_t i = 0; i < inputs.size(); ++i) {
            const int64_t pc = inputs[i].shape()[1];
            if (want[i]) {
              T* gp = inputs[i].grad<T>().data() + n * pc * HW;
              const T* src = go + (n * C + coff) * HW;
              for (int64_t k = 0; k < pc * HW; ++k) gp[k] += src[k];
            }
            coff += pc;
          }
        }
      });
    });
  }
  return out;
}

Tensor pick(const Tensor& a, int64_t flat_index, Tape* tape) {
  if (flat_index < 0 || flat_index >= a.numel())
    throw ShapeError("pick: index " + std::to_string(flat_index) + " out of range for " +
                     shape_str(a.shape()));
  Tensor out({1}, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    out.data<T>()[0] = a.data<T>()[static_cast<size_t>(flat_index)];
  });
  if (wants(tape, a)) {
    tape->record("pick", {a}, out, [a = a, out, flat_index]() mutable {
      dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        a.grad<T>()[static_cast<size_t>(flat_index)] += out.grad<T>()[0];
      });
    });
  }
  return out;
}

FiniteDiffReport finite_difference_check(const TensorFn& f, const Tensor& point, double eps,
                                         double tol, double atol) {
  if (eps <= 0.0) throw ValidationError("finite_difference_check: eps must be positive");

  Tensor x = point.clone();
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss = f(&tape, x);
  if (loss.numel() != 1)
    throw ShapeError("finite_difference_check: f must return a scalar, got " +
                     shape_str(loss.shape()));
  tape.backward(loss);

  const int64_t n = x.numel();
  FiniteDiffReport rep;
  rep.analytic.resize(static_cast<size_t>(n));
  rep.numeric.resize(static_cast<size_t>(n));
  rep.rel_err.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    rep.analytic[static_cast<size_t>(i)] = x.has_grad() ? x.grad_at(i) : 0.0;

  Tensor xp = point.clone();
  xp.set_requires_grad(false);
  for (int64_t i = 0; i < n; ++i) {
    const double orig = xp.value_at(i);
    xp.set_value(i, orig + eps);
    const double fp = f(nullptr, xp).item();
    xp.set_value(i, orig - eps);
    const double fm = f(nullptr, xp).item();
    xp.set_value(i, orig);
    rep.numeric[static_cast<size_t>(i)] = (fp - fm) / (2.0 * eps);
  }

  rep.pass = true;
  for (size_t i = 0; i < static_cast<size_t>(n); ++i) {
    const double a = rep.analytic[i], m = rep.numeric[i];
    const double diff = std::abs(a - m);
    const double scale = std::max(std::abs(a), std::abs(m));
    rep.rel_err[i] = diff / std::max(scale, atol);
    rep.max_rel_err = std::max(rep.max_rel_err, rep.rel_err[i]);
    rep.max_abs_err = std::max(rep.max_abs_err, diff);
    if (diff > atol + tol * scale) rep.pass = false;
  }
  return rep;
}

}  // namespace uroscan::ops
