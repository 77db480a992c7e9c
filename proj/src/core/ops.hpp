#pragma once

#include <span>
#include <vector>

#include "core/tape.hpp"

namespace colidr {

// ---------------------------------------------------------------------------
// Elementwise / scalar
// ---------------------------------------------------------------------------
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value scale(Value x, double c);
Value add_scalar(Value x, double c);
Value exp(Value x);
Value log(Value x);
Value square(Value x);
Value abs(Value x);
Value sigmoid(Value x);
Value relu(Value x);
Value leaky_relu(Value x, double slope);

// ---------------------------------------------------------------------------
// Shape and selection
// ---------------------------------------------------------------------------
Value reshape(Value x, Shape s);
// Columns [lo, hi) of a rank-2 tensor.
Value slice_cols(Value x, int lo, int hi);
// Concatenate rank-2 tensors along columns.
Value concat_cols(const std::vector<Value>& parts);

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------
Value matmul(Value a, Value b);
// y = x * W^T + b, x:[N,D] W:[O,D] b:[O]
Value linear(Value x, Value w, Value b);

// ---------------------------------------------------------------------------
// Convolutions (NCHW, square kernels)
// ---------------------------------------------------------------------------
Value conv2d(Value x, Value w, Value b, int stride, int pad);
// w:[C,OC,KH,KW]; output spatial = (H-1)*stride - 2*pad + KH + out_pad
Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad, int out_pad);

// ---------------------------------------------------------------------------
// Batch normalization (NCHW)
// ---------------------------------------------------------------------------
struct BatchNormResult {
  Value y;
  Tensor batch_mean;  // populated in training mode, for running-stat updates
  Tensor batch_var;   // biased (divide by m)
};
// Training mode normalizes with batch statistics; inference mode is the
// deterministic affine map through running statistics.
BatchNormResult batchnorm2d(Value x, Value gamma, Value beta,
                            const Tensor& running_mean, const Tensor& running_var,
                            bool training, double eps);

// ---------------------------------------------------------------------------
// Reductions and rows
// ---------------------------------------------------------------------------
Value sum(Value x);       // scalar
Value mean_all(Value x);  // scalar
Value softmax_rows(Value x);

// ---------------------------------------------------------------------------
// Fused, numerically stabilized losses
// ---------------------------------------------------------------------------
// sum over columns of weighted BCE computed from logits, mean over rows.
// pos_weight scales the positive-label term per column.
Value bce_with_logits(Value logits, const Tensor& targets, const Tensor& pos_weight);
// mean over rows of -log softmax(logits)[label]
Value cross_entropy_logits(Value logits, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Raw kernels shared by ops and by oracle-free callers (row-major).
// ---------------------------------------------------------------------------
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);

}  // namespace colidr
