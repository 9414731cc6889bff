#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aptq/attention.hpp"
#include "aptq/errors.hpp"
#include "aptq/hessian.hpp"
#include "aptq/matrix.hpp"

// Column-wise, group-quantized, error-compensating quantization.
//
// The layer is processed in quantizer orientation: rows are output features,
// columns are input features, and the Hessian state is square over the
// columns. Columns are quantized in fixed ascending order inside blocks of
// size B. Quantizing column j against the inverse-factor diagonal u(j,j)
// yields per-row errors e = (w - w_hat)/u(j,j); columns k > j inside the block
// absorb -e*u(j,k) immediately, and columns beyond the block receive the
// accumulated update once per block. Group scale/zero-point pairs are fitted
// lazily, at the moment the loop first reaches each group, from the weights
// as already compensated.

namespace aptq {

struct quant_config {
    int bits = 4;                // 2 or 4
    std::size_t group_size = 128;
    std::size_t block_size = 128;
    double damp_percent = 0.01;
    bool symmetric = false;      // asymmetric min-max grid
    bool clip_grid_search = false;

    void validate() const {
        if (bits != 2 && bits != 4) throw value_error("quant_config: bits must be 2 or 4");
        if (group_size < 1 || block_size < 1)
            throw value_error("quant_config: group_size and block_size must be >= 1");
        if (!(damp_percent > 0.0)) throw value_error("quant_config: damp_percent must be > 0");
    }
};

struct group_quant_params {
    double scale = 1.0;      // > 0
    int zero_point = 0;      // in [0, 2^bits - 1]
    std::size_t group_index = 0;
};

/// Asymmetric min-max grid fit over a slice of weights. The range is extended
/// to include zero so that zero always lands on the grid; a constant slice
/// at zero degenerates to the 1e-12 scale floor.
inline group_quant_params fit_group_params(const double* values, std::size_t count, int bits,
                                           std::size_t group_index = 0) {
    if (count == 0) throw value_error("fit_group_params: empty slice");
    const int maxq = (1 << bits) - 1;
    double lo = 0.0, hi = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        lo = std::min(lo, values[i]);
        hi = std::max(hi, values[i]);
    }
    group_quant_params p;
    p.scale = std::max((hi - lo) / static_cast<double>(maxq), 1e-12);
    p.zero_point = static_cast<int>(
        std::clamp(std::round(-lo / p.scale), 0.0, static_cast<double>(maxq)));
    p.group_index = group_index;
    return p;
}

inline group_quant_params fit_group_params(const matrix& w_cols, int bits,
                                           std::size_t group_index = 0) {
    return fit_group_params(w_cols.data(), w_cols.size(), bits, group_index);
}

/// Nearest-grid mapping: code = clamp(round(w/scale) + zero_point, 0, 2^bits-1)
/// and w_hat = (code - zero_point) * scale.
inline std::pair<int, double> quant_dequant(double w, const group_quant_params& p, int bits) {
    const int maxq = (1 << bits) - 1;
    const int code = static_cast<int>(
        std::clamp(std::round(w / p.scale) + static_cast<double>(p.zero_point), 0.0,
                   static_cast<double>(maxq)));
    return {code, (code - p.zero_point) * p.scale};
}

struct quantized_layer {
    std::string layer_id;
    int bits = 4;
    std::size_t rows = 0; // output features
    std::size_t cols = 0; // input features (quantization axis)
    std::size_t group_size = 128;
    std::vector<std::uint8_t> codes; // row-major rows x cols
    std::vector<group_quant_params> groups; // one per column group
    double recon_error = 0.0; // sum over columns of per-row e^2

    std::uint8_t code_at(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }

    const group_quant_params& group_for_col(std::size_t c) const {
        return groups[c / group_size];
    }

    /// Dequantized matrix, every entry exactly (code - zero_point) * scale.
    matrix dequant() const {
        matrix m(rows, cols);
        for (std::size_t c = 0; c < cols; ++c) {
            const group_quant_params& p = group_for_col(c);
            for (std::size_t r = 0; r < rows; ++r)
                m(r, c) = (static_cast<int>(code_at(r, c)) - p.zero_point) * p.scale;
        }
        return m;
    }
};

namespace detail {

inline matrix group_slice_for_fit(const matrix& w, std::size_t c0, std::size_t c1) {
    return col_slice(w, c0, std::min(c1, w.cols()));
}

} // namespace detail

/// Error-compensating column loop. The Hessian state must already be damped;
/// its dimension must equal the column count of w (quantizer orientation).
inline quantized_layer quantize_layer(const matrix& w_in, const hessian_state& h,
                                      const quant_config& cfg) {
    cfg.validate();
    if (h.dim() != w_in.cols())
        throw shape_error("quantize_layer: hessian dim " + std::to_string(h.dim()) +
                          " != weight cols " + std::to_string(w_in.cols()));
    if (!h.damped()) throw value_error("quantize_layer: hessian state not damped");
    ensure_finite(w_in, "quantize_layer input");

    const matrix u = h.inverse_upper_factor(); // h^{-1} = u^T u
    const std::size_t rows = w_in.rows();
    const std::size_t cols = w_in.cols();

    quantized_layer out;
    out.layer_id = h.layer_id();
    out.bits = cfg.bits;
    out.rows = rows;
    out.cols = cols;
    out.group_size = cfg.group_size;
    out.codes.assign(rows * cols, 0);
    out.groups.reserve((cols + cfg.group_size - 1) / cfg.group_size);

    matrix w = w_in; // mutated in place as compensation proceeds
    std::vector<double> err(rows * cfg.block_size, 0.0);

    for (std::size_t block_start = 0; block_start < cols; block_start += cfg.block_size) {
        const std::size_t block_end = std::min(block_start + cfg.block_size, cols);
        std::fill(err.begin(), err.end(), 0.0);

        for (std::size_t j = block_start; j < block_end; ++j) {
            if (j % cfg.group_size == 0)
                out.groups.push_back(fit_group_params(
                    detail::group_slice_for_fit(w, j, j + cfg.group_size), cfg.bits,
                    j / cfg.group_size));
            const group_quant_params& p = out.groups.back();
            const double d = u(j, j);
            for (std::size_t r = 0; r < rows; ++r) {
                auto [code, w_hat] = quant_dequant(w(r, j), p, cfg.bits);
                const double e = (w(r, j) - w_hat) / d;
                out.codes[r * cols + j] = static_cast<std::uint8_t>(code);
                w(r, j) = w_hat;
                err[r * cfg.block_size + (j - block_start)] = e;
                out.recon_error += e * e;
                for (std::size_t k = j + 1; k < block_end; ++k) w(r, k) -= e * u(j, k);
            }
        }

        // Deferred update: columns beyond the block absorb the whole block's
        // accumulated errors at once.
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = block_end; k < cols; ++k) {
                double upd = 0.0;
                for (std::size_t j = block_start; j < block_end; ++j)
                    upd += err[r * cfg.block_size + (j - block_start)] * u(j, k);
                w(r, k) -= upd;
            }
    }

    if (!w.is_finite()) throw numeric_error("quantize_layer: compensation diverged");
    return out;
}

/// Round-to-nearest baseline: same group fitting, no compensation. When a
/// Hessian state is supplied, recon_error reports the same proxy statistic as
/// quantize_layer (per-row error over u(j,j)) so the two are comparable on
/// identical footing; otherwise it is the plain squared rounding error.
inline quantized_layer rtn_quantize(const matrix& w, const quant_config& cfg,
                                    const hessian_state* h = nullptr,
                                    const std::string& layer_id = "") {
    cfg.validate();
    ensure_finite(w, "rtn_quantize input");
    matrix u;
    if (h != nullptr) {
        if (h->dim() != w.cols()) throw shape_error("rtn_quantize: hessian dim mismatch");
        u = h->inverse_upper_factor();
    }

    quantized_layer out;
    out.layer_id = h != nullptr ? h->layer_id() : layer_id;
    out.bits = cfg.bits;
    out.rows = w.rows();
    out.cols = w.cols();
    out.group_size = cfg.group_size;
    out.codes.assign(w.rows() * w.cols(), 0);

    for (std::size_t c0 = 0; c0 < w.cols(); c0 += cfg.group_size) {
        const std::size_t c1 = std::min(c0 + cfg.group_size, w.cols());
        out.groups.push_back(fit_group_params(col_slice(w, c0, c1), cfg.bits, c0 / cfg.group_size));
        const group_quant_params& p = out.groups.back();
        for (std::size_t j = c0; j < c1; ++j) {
            const double denom = h != nullptr ? u(j, j) : 1.0;
            for (std::size_t r = 0; r < w.rows(); ++r) {
                auto [code, w_hat] = quant_dequant(w(r, j), p, cfg.bits);
                out.codes[r * w.cols() + j] = static_cast<std::uint8_t>(code);
                const double e = (w(r, j) - w_hat) / denom;
                out.recon_error += e * e;
            }
        }
    }
    return out;
}

/// Squared output deviation ||F(w) - F(w_hat)||^2 summed over calibration
/// batches, for an attention block.
inline double reconstruction_error(const attention_weights& original,
                                   const attention_weights& quantized,
                                   const std::vector<calibration_batch>& batches,
                                   bool causal = false) {
    double total = 0.0;
    for (const calibration_batch& b : batches) {
        matrix d = sub(attention_forward(original, b, causal), attention_forward(quantized, b, causal));
        total += frobenius_inner(d, d);
    }
    return total;
}

/// Same metric for the feed-forward block.
inline double reconstruction_error(const feed_forward_weights& original,
                                   const feed_forward_weights& quantized,
                                   const std::vector<calibration_batch>& batches) {
    double total = 0.0;
    for (const calibration_batch& b : batches) {
        matrix d = sub(feedforward_forward(original, b.x), feedforward_forward(quantized, b.x));
        total += frobenius_inner(d, d);
    }
    return total;
}

} // namespace aptq
