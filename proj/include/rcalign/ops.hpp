#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "rcalign/autodiff.hpp"

// Differentiable operations over tape variables. Binary elementwise ops take
// equal shapes, or an operand whose last axis is 1 (broadcast along it).
// Nothing else broadcasts; add_rows covers the bias/row-vector case.
namespace rcalign::ops {

// [m x k] . [k x n] -> [m x n]; a rank-1 left operand is a single row.
Var matmul(Var a, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

// x[... x n] + row[n], row broadcast over all leading positions.
Var add_rows(Var x, Var row);
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);
// 1 - x
Var one_minus(Var x);

Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
// ln(1 + e^x), computed without overflow.
Var softplus(Var x);
Var relu(Var x);

// Numerically stable softmax along `axis` (max subtracted first).
Var softmax(Var x, std::size_t axis);
Var concat(Var a, Var b, std::size_t axis);

// Gathers rows of a [V x d] table. Gradient rows are scatter-added, so
// duplicate ids accumulate.
Var embedding_lookup(Var table, std::span<const std::size_t> ids);

// Same data, new shape with an equal element count.
Var reshape(Var x, Shape shape);

// Single row of a matrix as a rank-1 tensor.
Var row(Var x, std::size_t index);
// Contiguous slice [begin, begin + length) of a rank-1 tensor.
Var slice(Var x, std::size_t begin, std::size_t length);
// Stacks equally sized rank-1 tensors into a [count x n] matrix.
Var stack_rows(std::span<const Var> rows);

Var sum(Var x);
Var mean(Var x);
// x / sum(x) over all entries.
Var normalize(Var x);

// Standard LSTM cell, gate order (input, forget, cell, output).
// weights: [(d_in + d_h) x 4 d_h], applied to concat(x, h_prev); bias: [4 d_h].
struct LstmOut {
  Var h;
  Var c;
};
LstmOut lstm_cell(Var x, Var h_prev, Var c_prev, Var weights, Var bias);

// "Same" zero-padded cross-correlation. signal: [n x c_in];
// kernel: [k x c_in x c_out] with odd k.
Var conv1d(Var signal, Var kernel);

// Mean squared error over all entries.
Var mse(Var prediction, Var target);
// Mean binary cross-entropy on logits against 0/1 targets; positive targets
// are weighted by pos_weight.
Var bce_with_logits(Var logits, Var targets, double pos_weight = 1.0);

// Elementwise mask multiply (dropout with a precomputed scaled mask).
Var apply_mask(Var x, const Tensor& mask);

}  // namespace rcalign::ops

namespace rcalign {

inline Var operator+(Var a, Var b) { return ops::add(a, b); }
inline Var operator-(Var a, Var b) { return ops::sub(a, b); }
inline Var operator*(Var a, Var b) { return ops::mul(a, b); }

}  // namespace rcalign
