#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "aptq/errors.hpp"
#include "aptq/matrix.hpp"

// Minimal multi-head self-attention block plus a two-matrix feed-forward
// block. Per head h:
//   scores  n_h = (x wq_h)(x wk_h)^T / sqrt(d_k)
//   probs   p_h = softmax_rows(n_h)          (upper triangle masked when causal)
//   head_h  = p_h (x wv_h)
//   output  = concat(head_1..head_H) * wo
// Self-attention only: queries, keys and values all derive from the same x.
// No rotary embeddings, no dropout, no layer norm — the closed-form gradients
// in gradients.hpp depend on this exact structure.

namespace aptq {

struct attention_shape {
    std::size_t n = 0;       // sequence length (tokens)
    std::size_t d_model = 0; // model width
    std::size_t heads = 0;
    std::size_t d_k = 0;     // per-head width; d_v == d_k throughout

    attention_shape() = default;

    attention_shape(std::size_t n_, std::size_t d_model_, std::size_t heads_)
        : n(n_), d_model(d_model_), heads(heads_) {
        if (n < 1 || d_model < 1 || heads < 1)
            throw shape_error("attention_shape: all counts must be >= 1");
        if (d_model % heads != 0)
            throw shape_error("attention_shape: d_model " + std::to_string(d_model) +
                              " not divisible by heads " + std::to_string(heads));
        d_k = d_model / heads;
    }
};

struct attention_weights {
    std::size_t heads = 1;
    matrix wq, wk, wv, wo; // each d_model x d_model

    attention_weights() = default;

    attention_weights(std::size_t heads_, matrix wq_, matrix wk_, matrix wv_, matrix wo_)
        : heads(heads_), wq(std::move(wq_)), wk(std::move(wk_)), wv(std::move(wv_)),
          wo(std::move(wo_)) {
        validate();
    }

    std::size_t d_model() const { return wq.rows(); }

    void validate() const {
        const std::size_t d = wq.rows();
        for (const matrix* m : {&wq, &wk, &wv, &wo})
            if (m->rows() != d || m->cols() != d)
                throw shape_error("attention_weights: all matrices must be d_model x d_model");
        if (heads < 1 || d % heads != 0)
            throw shape_error("attention_weights: d_model not divisible by heads");
        for (const matrix* m : {&wq, &wk, &wv, &wo})
            ensure_finite(*m, "attention_weights");
    }
};

struct calibration_batch {
    matrix x; // n x d_model token activations feeding the block
    std::string id;
};

enum class activation_kind { relu, identity };

struct feed_forward_weights {
    matrix w1; // d_model x d_ff
    matrix w2; // d_ff x d_model
    activation_kind activation = activation_kind::relu;

    void validate() const {
        if (w1.cols() != w2.rows())
            throw shape_error("feed_forward_weights: w1 cols must match w2 rows");
        ensure_finite(w1, "feed_forward_weights.w1");
        ensure_finite(w2, "feed_forward_weights.w2");
    }
};

/// Column slice for head h of a d_model x d_model projection (wq/wk/wv layout).
inline matrix head_cols(const matrix& w, std::size_t h, std::size_t d_k) {
    return col_slice(w, h * d_k, (h + 1) * d_k);
}

/// Row slice for head h of the output projection (wo layout).
inline matrix head_rows(const matrix& w, std::size_t h, std::size_t d_k) {
    return row_slice(w, h * d_k, (h + 1) * d_k);
}

/// Everything the forward pass produces, exposed for the gradient module.
struct attention_trace {
    attention_shape shape;
    std::vector<matrix> scores; // n_h, n x n per head
    std::vector<matrix> probs;  // p_h, rows sum to 1
    std::vector<matrix> heads;  // p_h (x wv_h), n x d_k
    matrix concat;              // heads side by side, n x d_model
    matrix output;              // concat * wo, n x d_model
};

inline attention_trace attention_intermediates(const attention_weights& w,
                                               const calibration_batch& batch,
                                               bool causal = false) {
    const matrix& x = batch.x;
    if (x.cols() != w.d_model())
        throw shape_error("attention: batch width " + std::to_string(x.cols()) +
                          " != d_model " + std::to_string(w.d_model()));
    ensure_finite(x, "attention input");

    attention_trace t;
    t.shape = attention_shape(x.rows(), w.d_model(), w.heads);
    const std::size_t n = t.shape.n;
    const std::size_t d_k = t.shape.d_k;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));

    t.concat = matrix(n, w.d_model());
    for (std::size_t h = 0; h < w.heads; ++h) {
        matrix q = matmul(x, head_cols(w.wq, h, d_k));
        matrix k = matmul(x, head_cols(w.wk, h, d_k));
        matrix v = matmul(x, head_cols(w.wv, h, d_k));
        matrix scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
        if (causal) {
            const double neg_inf = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i + 1; j < n; ++j) scores(i, j) = neg_inf;
        }
        matrix probs = softmax_rows(scores);
        matrix head = matmul(probs, v);
        set_col_slice(t.concat, h * d_k, head);
        t.scores.push_back(std::move(scores));
        t.probs.push_back(std::move(probs));
        t.heads.push_back(std::move(head));
    }
    t.output = matmul(t.concat, w.wo);
    return t;
}

inline matrix attention_forward(const attention_weights& w, const calibration_batch& batch,
                                bool causal = false) {
    return attention_intermediates(w, batch, causal).output;
}

inline matrix apply_activation(matrix m, activation_kind kind) {
    if (kind == activation_kind::relu)
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = std::max(0.0, m.data()[i]);
    return m;
}

inline matrix feedforward_forward(const feed_forward_weights& w, const matrix& x) {
    w.validate();
    if (x.cols() != w.w1.rows())
        throw shape_error("feedforward: input width " + std::to_string(x.cols()) +
                          " != w1 rows " + std::to_string(w.w1.rows()));
    return matmul(apply_activation(matmul(x, w.w1), w.activation), w.w2);
}

/// Hidden activations (after the nonlinearity), needed to calibrate w2.
inline matrix feedforward_hidden(const feed_forward_weights& w, const matrix& x) {
    return apply_activation(matmul(x, w.w1), w.activation);
}

} // namespace aptq
