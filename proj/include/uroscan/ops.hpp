#pragma once

#include <functional>
#include <span>

#include "uroscan/tensor.hpp"

namespace uroscan::ops {

/// Throws NumericError if any element is NaN/Inf.
void ensure_finite(const Tensor& t, const char* context);

// All ops compute the forward result eagerly. When a tape is supplied and
// gradient can flow to at least one input, a backward rule is recorded.
// Gradients accumulate additively into Tensor::grad buffers.

/// Cross-correlation of input [N,C,H,W] with kernel [K,C,kh,kw] plus bias [K].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding, Tape* tape = nullptr);

/// Max pooling; gradient routes to the first (row-major) maximal element of
/// each window. Out-of-bounds cells under padding never win.
Tensor max_pool2d(const Tensor& input, int window, int stride, int padding = 0,
                  Tape* tape = nullptr);

/// Mean pooling over in-bounds window cells.
Tensor avg_pool2d(const Tensor& input, int window, int stride, int padding = 0,
                  Tape* tape = nullptr);

/// [N,C,H,W] -> [N,C] channel means.
Tensor global_avg_pool(const Tensor& input, Tape* tape = nullptr);

/// Affine map: input [N,F] x weight [F,G] + bias [G] -> [N,G].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias,
             Tape* tape = nullptr);

Tensor relu(const Tensor& input, Tape* tape = nullptr);

/// Row-wise softmax over the last axis of a [N,G] tensor.
Tensor softmax(const Tensor& input, Tape* tape = nullptr);

/// Per-channel batch normalization of [N,C,H,W] (or per-column of [N,C]).
/// Training mode normalizes with batch statistics and updates the running
/// buffers in place: running = momentum * running + (1 - momentum) * batch.
/// Eval mode uses the frozen running statistics.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double momentum = 0.9, double eps = 1e-5, Tape* tape = nullptr);

/// Mean negative log-likelihood of one-hot labels under given probabilities,
/// with probabilities clamped at kLogClamp before the log.
Tensor cross_entropy(const Tensor& probs, const Tensor& onehot, Tape* tape = nullptr);

inline constexpr double kLogClamp = 1e-12;

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, double c, Tape* tape = nullptr);
Tensor sum(const Tensor& a, Tape* tape = nullptr);
Tensor reshape(const Tensor& a, Shape shape, Tape* tape = nullptr);
/// [N,...] -> [N, product of the rest].
Tensor flatten(const Tensor& a, Tape* tape = nullptr);
/// Concatenates [N,Ci,H,W] tensors along the channel axis.
Tensor concat_channels(std::span<const Tensor> parts, Tape* tape = nullptr);
/// Extracts one element as a scalar tensor.
Tensor pick(const Tensor& a, int64_t flat_index, Tape* tape = nullptr);

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// ---------------------------------------------------------------------------
// Gradient oracle: central finite differences against the taped gradient.
// f must map a tensor to a scalar tensor, recording on the given tape when
// one is passed (and running untaped otherwise).
// ---------------------------------------------------------------------------

using TensorFn = std::function<Tensor(Tape*, const Tensor&)>;

struct FiniteDiffReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_err;  // |a-n| / max(|a|,|n|,atol)
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool pass = false;  // per element: |a-n| <= atol + tol * max(|a|,|n|)
};

FiniteDiffReport finite_difference_check(const TensorFn& f, const Tensor& point,
                                         double eps = 1e-5, double tol = 1e-4,
                                         double atol = 1e-7);

}  // namespace uroscan::ops
