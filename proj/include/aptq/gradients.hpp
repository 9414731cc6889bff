#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>

#include "aptq/attention.hpp"
#include "aptq/errors.hpp"
#include "aptq/matrix.hpp"
#include "aptq/rng.hpp"

// Closed-form gradients of the scalar objective <s, F(w, x)> with respect to
// each attention projection, where <.,.> is the elementwise inner product and
// s is a configurable output-space seed. Scalarizing against a seed makes
// every formula checkable against central finite differences.
//
// The default seed is "identity-padded": the n x d_model matrix with ones on
// the main diagonal. With it, <s, F> sums the first n output columns along
// the diagonal, and grad_wo reduces to the plain effective-input form c^T s
// whose Gram matrix equals c^T c when n <= d_model.

namespace aptq {

struct sensitivity_seed {
    matrix s; // n x d_model, shape of the attention output
    std::string kind;

    static sensitivity_seed identity_padded(std::size_t n, std::size_t d_model) {
        sensitivity_seed seed;
        seed.s = matrix(n, d_model);
        for (std::size_t i = 0; i < n && i < d_model; ++i) seed.s(i, i) = 1.0;
        seed.kind = "identity-padded";
        return seed;
    }

    static sensitivity_seed random_gaussian(std::size_t n, std::size_t d_model, rng& r) {
        sensitivity_seed seed;
        seed.s = aptq::random_gaussian(n, d_model, r);
        seed.kind = "random-gaussian";
        return seed;
    }

    static sensitivity_seed basis(std::size_t n, std::size_t d_model, std::size_t i,
                                  std::size_t j) {
        if (i >= n || j >= d_model) throw shape_error("sensitivity_seed::basis: index out of range");
        sensitivity_seed seed;
        seed.s = matrix(n, d_model);
        seed.s(i, j) = 1.0;
        seed.kind = "basis";
        return seed;
    }
};

/// Forward intermediates plus the input, frozen for gradient evaluation.
struct gradient_workspace {
    matrix x; // n x d_model
    attention_trace trace;

    const attention_shape& shape() const { return trace.shape; }
};

inline gradient_workspace make_workspace(const attention_weights& w,
                                         const calibration_batch& batch, bool causal = false) {
    gradient_workspace ws;
    ws.x = batch.x;
    ws.trace = attention_intermediates(w, batch, causal);
    return ws;
}

namespace detail {

inline void check_seed(const gradient_workspace& ws, const sensitivity_seed& seed) {
    if (seed.s.rows() != ws.shape().n || seed.s.cols() != ws.shape().d_model)
        throw shape_error("sensitivity seed shape does not match attention output");
}

/// Row-wise softmax backward: given probabilities p and the sensitivity b of
/// the objective w.r.t. p's inputs-after-softmax, returns the sensitivity
/// w.r.t. the pre-softmax scores: p .* (b - rowsum(p .* b)).
inline matrix softmax_backward_rows(const matrix& p, const matrix& b) {
    if (!p.same_shape(b)) throw shape_error("softmax_backward_rows: shape mismatch");
    matrix t(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) dot += p(i, j) * b(i, j);
        for (std::size_t j = 0; j < p.cols(); ++j) t(i, j) = p(i, j) * (b(i, j) - dot);
    }
    return t;
}

/// Sensitivity of <s, F> w.r.t. head h's pre-softmax scores: the softmax
/// backward of b_h = (s wo_h^T) (x wv_h)^T.
inline matrix score_sensitivity(const gradient_workspace& ws, const sensitivity_seed& seed,
                                const attention_weights& w, std::size_t h) {
    const std::size_t d_k = ws.shape().d_k;
    matrix d_head = matmul(seed.s, transpose(head_rows(w.wo, h, d_k)));   // n x d_k
    matrix value = matmul(ws.x, head_cols(w.wv, h, d_k));                 // n x d_k
    matrix b = matmul(d_head, transpose(value));                          // n x n
    return softmax_backward_rows(ws.trace.probs[h], b);
}

} // namespace detail

/// How the value path enters grad_wv. The pre-projection reading treats the
/// per-head value input as p_h x and is the one that passes finite-difference
/// checks; the post-projection reading treats it as the projected head output
/// and is kept only as a documented comparison point.
enum class value_reading { pre_projection, post_projection };

/// Gradient of <s, F> w.r.t. wo: exactly c^T s, since F is linear in wo.
inline matrix grad_wo(const gradient_workspace& ws, const sensitivity_seed& seed) {
    detail::check_seed(ws, seed);
    return matmul(transpose(ws.trace.concat), seed.s);
}

/// Gradient of <s, F> w.r.t. wv, assembled head block by head block:
/// block h is (p_h x)^T s (wo_h)^T, placed at wv's columns for head h.
inline matrix grad_wv(const gradient_workspace& ws, const sensitivity_seed& seed,
                      const attention_weights& w,
                      value_reading reading = value_reading::pre_projection) {
    detail::check_seed(ws, seed);
    const std::size_t d_k = ws.shape().d_k;
    const std::size_t d_model = ws.shape().d_model;
    if (reading == value_reading::post_projection)
        return matmul(transpose(ws.trace.concat), matmul(seed.s, transpose(w.wo)));
    matrix g(d_model, d_model);
    for (std::size_t h = 0; h < w.heads; ++h) {
        matrix m = matmul(ws.trace.probs[h], ws.x);                        // n x d_model
        matrix block = matmul(transpose(m), matmul(seed.s, transpose(head_rows(w.wo, h, d_k))));
        set_col_slice(g, h * d_k, block);
    }
    return g;
}

/// Gradient of <s, F> w.r.t. head h's query projection:
/// (1/sqrt(d_k)) x^T t_h x wk_h, with t_h the softmax-backward score
/// sensitivity of head h.
inline matrix grad_wq(const gradient_workspace& ws, const sensitivity_seed& seed,
                      const attention_weights& w, std::size_t h) {
    detail::check_seed(ws, seed);
    if (h >= w.heads) throw shape_error("grad_wq: head index out of range");
    const std::size_t d_k = ws.shape().d_k;
    matrix t = detail::score_sensitivity(ws, seed, w, h);
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));
    return scale(matmul(transpose(ws.x), matmul(t, matmul(ws.x, head_cols(w.wk, h, d_k)))),
                 inv_sqrt_dk);
}

/// Mirror of grad_wq with the score sensitivity transposed:
/// (1/sqrt(d_k)) x^T t_h^T x wq_h.
inline matrix grad_wk(const gradient_workspace& ws, const sensitivity_seed& seed,
                      const attention_weights& w, std::size_t h) {
    detail::check_seed(ws, seed);
    if (h >= w.heads) throw shape_error("grad_wk: head index out of range");
    const std::size_t d_k = ws.shape().d_k;
    matrix t = detail::score_sensitivity(ws, seed, w, h);
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));
    return scale(matmul(transpose(ws.x), matmul(transpose(t), matmul(ws.x, head_cols(w.wq, h, d_k)))),
                 inv_sqrt_dk);
}

/// Central-difference gradient of a scalar function of one weight matrix:
/// (f(w + eps e_ij) - f(w - eps e_ij)) / (2 eps) per entry.
inline matrix finite_diff_grad(const std::function<double(const matrix&)>& f, const matrix& w0,
                               double step) {
    if (!(step > 0.0)) throw value_error("finite_diff_grad: step must be positive");
    matrix g(w0.rows(), w0.cols());
    matrix w = w0;
    for (std::size_t i = 0; i < w0.rows(); ++i) {
        for (std::size_t j = 0; j < w0.cols(); ++j) {
            const double saved = w(i, j);
            w(i, j) = saved + step;
            double up = f(w);
            w(i, j) = saved - step;
            double down = f(w);
            w(i, j) = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw numeric_error("finite_diff_grad: non-finite objective evaluation");
            g(i, j) = (up - down) / (2.0 * step);
        }
    }
    return g;
}

/// Max relative entrywise deviation with the denominator floored, the metric
/// used by all gradient verification tests.
inline double max_relative_error(const matrix& a, const matrix& b, double floor = 1e-8) {
    if (!a.same_shape(b)) throw shape_error("max_relative_error: shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double denom = std::max({std::abs(a.data()[i]), std::abs(b.data()[i]), floor});
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
    }
    return worst;
}

} // namespace aptq
