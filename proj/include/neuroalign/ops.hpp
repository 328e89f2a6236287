#pragma once

#include <vector>

#include "neuroalign/autodiff.hpp"

// Differentiable primitives over Tape nodes. All shapes are row-major
// matrices; "rows" means the leading axis (tokens, batch items).
namespace neuroalign::ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// a (N x C) + row (1 x C) broadcast over rows.
Var add_row(Var a, Var row);
// Each row i of a (N x C) scaled by w(i, 0), w is N x 1.
Var scale_rows(Var a, Var w);

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var rows(Var a, Eigen::Index start, Eigen::Index count);
Var cols(Var a, Eigen::Index start, Eigen::Index count);
Var vcat(const std::vector<Var>& parts);
Var hcat(const std::vector<Var>& parts);
// Row-major reinterpretation of the same elements.
Var reshape(Var a, Eigen::Index r, Eigen::Index c);
// Repeat a 1 x C row n times.
Var repeat_rows(Var row, Eigen::Index n);
Var mean_rows(Var a);  // 1 x C column means

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var sigmoid(Var a);
Var gelu(Var a);
Var tanh(Var a);
Var exp(Var a);
// Divides each row by its sum. Rows must have positive sums.
Var normalize_sum_rows(Var a);
// Throws NumericError on a zero-norm row.
Var l2_normalize_rows(Var a);
Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);

Var sum(Var a);
Var mean(Var a);
Var mean_square(Var a);
Var mean_abs(Var a);

// Splits a C x T signal into ceil(T/len) patches, each flattened time-major
// to len*C features. Timesteps past T are filled with `pad_value`.
Var patchify(Var signal, int len, double pad_value);
// Zero-padded sliding window along rows: L x D -> L x (k*D), window centred
// on each row (k odd).
Var unfold_rows(Var a, int k);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }

}  // namespace neuroalign::ad
