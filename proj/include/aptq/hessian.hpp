#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "aptq/attention.hpp"
#include "aptq/errors.hpp"
#include "aptq/gradients.hpp"
#include "aptq/matrix.hpp"

// Per-layer proxy Hessians over a weight matrix's input features:
//   feed-forward   h = 2 x x^T   (x in features x tokens orientation)
//   attention      h = 2 sum_g g g^T over gradient matrices g
// accumulated as a weighted running mean across calibration samples (tokens
// for the linear path, samples for the gradient path) so that damping and
// trace comparisons do not depend on calibration-set size.

namespace aptq {

struct sensitivity_record {
    std::string layer_id;
    double avg_trace = 0.0; // trace(h)/dim, measured before damping
    std::size_t param_count = 0;
};

class hessian_state {
public:
    hessian_state() = default;

    hessian_state(std::size_t dim, std::string layer_id, std::size_t param_count)
        : dim_(dim), h_(dim, dim), layer_id_(std::move(layer_id)), param_count_(param_count) {
        if (dim < 1) throw shape_error("hessian_state: dim must be >= 1");
    }

    std::size_t dim() const { return dim_; }
    const matrix& h() const { return h_; }
    std::size_t nsamples() const { return nsamples_; }
    bool damped() const { return damped_; }
    const std::string& layer_id() const { return layer_id_; }
    std::size_t param_count() const { return param_count_; }

    /// Accumulate 2 x x^T for a linear layer. Accepts x as features x tokens;
    /// a tokens x features matrix is transposed on the way in (a square x is
    /// taken to be features x tokens as given).
    void accumulate_linear(const matrix& x) {
        matrix xf = x;
        if (xf.rows() != dim_) {
            if (xf.cols() == dim_) xf = transpose(xf);
            else
                throw shape_error("accumulate_linear: neither dimension matches dim " +
                                  std::to_string(dim_));
        }
        ensure_finite(xf, "accumulate_linear");
        add_contribution(matmul(xf, transpose(xf)), static_cast<double>(xf.cols()));
        ++nsamples_;
    }

    /// Accumulate 2 sum g g^T for one calibration sample's gradient matrices
    /// (one per head, or a single assembled matrix). Rows of every g index the
    /// weight's input features.
    void accumulate_attention(const std::vector<matrix>& grads) {
        matrix sum(dim_, dim_);
        for (const matrix& g : grads) {
            if (g.rows() != dim_)
                throw shape_error("accumulate_attention: gradient has " +
                                  std::to_string(g.rows()) + " rows, want " + std::to_string(dim_));
            ensure_finite(g, "accumulate_attention");
            sum = add(sum, matmul(g, transpose(g)));
        }
        add_contribution(sum, 1.0);
        ++nsamples_;
    }

    /// Weighted-mean merge of two partial accumulations (associative and
    /// commutative, so per-batch states may be built concurrently).
    void merge(const hessian_state& other) {
        if (other.dim_ != dim_) throw shape_error("merge: dim mismatch");
        if (damped_ || other.damped_) throw value_error("merge: states must be undamped");
        const double total = weight_ + other.weight_;
        if (total > 0.0) {
            for (std::size_t i = 0; i < h_.size(); ++i)
                h_.data()[i] = (h_.data()[i] * weight_ + other.h_.data()[i] * other.weight_) / total;
        }
        weight_ = total;
        nsamples_ += other.nsamples_;
    }

    /// Add percent * mean(diag) to the diagonal (percent alone when the
    /// diagonal is all zero) so the inverse factor is well-defined.
    void damp(double percent) {
        if (!(percent > 0.0)) throw value_error("damp: percent must be positive");
        if (!damped_) pre_damp_trace_ = trace();
        double mean_diag = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) mean_diag += h_(i, i);
        mean_diag /= static_cast<double>(dim_);
        const double shift = mean_diag == 0.0 ? percent : percent * mean_diag;
        for (std::size_t i = 0; i < dim_; ++i) h_(i, i) += shift;
        damped_ = true;
    }

    /// Upper-triangular factor u with h^{-1} = u^T u, consumed by the
    /// column-wise quantization loop. Throws a definiteness error when the
    /// damped matrix still fails to factorize (caller should raise percent).
    matrix inverse_upper_factor() const {
        if (!damped_) throw value_error("inverse_upper_factor: state not damped");
        if (nsamples_ < 1) throw value_error("inverse_upper_factor: no samples accumulated");
        matrix hinv = invert_spd(h_);
        return transpose(cholesky(hinv).to_dense());
    }

    /// Average trace statistic for precision planning, always measured on the
    /// undamped accumulation.
    sensitivity_record avg_trace() const {
        if (nsamples_ < 1) throw value_error("avg_trace: no samples accumulated");
        const double t = damped_ ? pre_damp_trace_ : trace();
        return sensitivity_record{layer_id_, t / static_cast<double>(dim_), param_count_};
    }

private:
    double trace() const {
        double t = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) t += h_(i, i);
        return t;
    }

    void add_contribution(const matrix& gram, double sample_weight) {
        // h is the running weighted mean of 2 * gram contributions.
        const double total = weight_ + sample_weight;
        for (std::size_t i = 0; i < h_.size(); ++i)
            h_.data()[i] = (h_.data()[i] * weight_ + 2.0 * gram.data()[i]) / total;
        weight_ = total;
    }

    std::size_t dim_ = 0;
    matrix h_;
    double weight_ = 0.0;
    std::size_t nsamples_ = 0;
    bool damped_ = false;
    double pre_damp_trace_ = 0.0;
    std::string layer_id_;
    std::size_t param_count_ = 0;
};

/// Shifted-Cholesky probe: true when h + shift*I factorizes, i.e. no
/// eigenvalue below -shift.
inline bool passes_psd_probe(const matrix& h, double shift = 1e-8) {
    matrix shifted = h;
    for (std::size_t i = 0; i < shifted.rows(); ++i) shifted(i, i) += shift;
    try {
        cholesky(shifted);
        return true;
    } catch (const definiteness_error&) {
        return false;
    }
}

enum class weight_family { wq, wk, wv, wo, ffn1, ffn2 };

inline const char* family_name(weight_family f) {
    switch (f) {
        case weight_family::wq: return "wq";
        case weight_family::wk: return "wk";
        case weight_family::wv: return "wv";
        case weight_family::wo: return "wo";
        case weight_family::ffn1: return "ffn1";
        case weight_family::ffn2: return "ffn2";
    }
    return "?";
}

/// Exact small-scale Gauss-Newton reference: seeds every output basis
/// direction e, accumulates the resulting gradient Gram matrices, and
/// normalizes by the output column count so a purely linear layer reproduces
/// 2 x^T x exactly. Ground truth for how far the single-seed production
/// Hessian deviates.
inline matrix gauss_newton_oracle(const attention_weights& w, const calibration_batch& batch,
                                  weight_family target, bool causal = false) {
    const std::size_t n = batch.x.rows();
    const std::size_t d_model = w.d_model();
    if (n * d_model > 64)
        throw value_error("gauss_newton_oracle: instance too large (n*d_model > 64)");
    gradient_workspace ws = make_workspace(w, batch, causal);
    matrix acc(d_model, d_model);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d_model; ++j) {
            sensitivity_seed e = sensitivity_seed::basis(n, d_model, i, j);
            std::vector<matrix> grads;
            switch (target) {
                case weight_family::wo: grads.push_back(grad_wo(ws, e)); break;
                case weight_family::wv: grads.push_back(grad_wv(ws, e, w)); break;
                case weight_family::wq:
                    for (std::size_t h = 0; h < w.heads; ++h) grads.push_back(grad_wq(ws, e, w, h));
                    break;
                case weight_family::wk:
                    for (std::size_t h = 0; h < w.heads; ++h) grads.push_back(grad_wk(ws, e, w, h));
                    break;
                default: throw value_error("gauss_newton_oracle: target must be an attention family");
            }
            for (const matrix& g : grads) acc = add(acc, matmul(g, transpose(g)));
        }
    }
    return scale(acc, 2.0 / static_cast<double>(d_model));
}

/// Basis-seeded reference for a plain linear layer y = x w: collapses to
/// 2 x^T x up to the same output-count normalization.
inline matrix gauss_newton_oracle_linear(const matrix& x_tokens_major, std::size_t d_out) {
    const std::size_t n = x_tokens_major.rows();
    const std::size_t d_in = x_tokens_major.cols();
    if (n * d_in > 64) throw value_error("gauss_newton_oracle_linear: instance too large");
    matrix acc(d_in, d_in);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d_out; ++j) {
            // d<e_ij, x w>/dw has x's row i in column j and zeros elsewhere, so
            // its Gram matrix is the outer product of that row with itself.
            matrix g(d_in, 1);
            for (std::size_t k = 0; k < d_in; ++k) g(k, 0) = x_tokens_major(i, k);
            acc = add(acc, matmul(g, transpose(g)));
        }
    }
    return scale(acc, 2.0 / static_cast<double>(d_out));
}

} // namespace aptq
