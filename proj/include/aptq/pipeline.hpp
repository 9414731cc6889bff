#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <future>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "aptq/attention.hpp"
#include "aptq/errors.hpp"
#include "aptq/gradients.hpp"
#include "aptq/hessian.hpp"
#include "aptq/matrix.hpp"
#include "aptq/model_io.hpp"
#include "aptq/planner.hpp"
#include "aptq/quantizer.hpp"
#include "aptq/rng.hpp"

// End-to-end orchestration: sensitivity scan -> precision plan -> per-layer
// quantization -> evaluation, shared by the command-line tool and the test
// harnesses.
//
// Calibration activations propagate through the FULL-PRECISION model: block
// k+1 is calibrated on block k's original output. The attention mask is off
// during calibration and reconstruction measurement (matching the objective
// the quantizer minimizes) and on for the toy language-model evaluation.

namespace aptq {

enum class hessian_mode { attention, layerwise };

inline const char* mode_name(hessian_mode m) {
    return m == hessian_mode::attention ? "attention" : "layerwise";
}

inline constexpr weight_family all_families[6] = {weight_family::wq,   weight_family::wk,
                                                  weight_family::wv,   weight_family::wo,
                                                  weight_family::ffn1, weight_family::ffn2};

struct sensitivity_result {
    // One entry per quantizable matrix, in block-major model order.
    std::vector<hessian_state> states;         // undamped proxy Hessians
    std::vector<sensitivity_record> records;   // avg_trace per state
    std::vector<matrix> input_grams;           // sum of x^T x over batches, per layer
    std::vector<std::string> layer_ids;

    std::size_t index_of(const std::string& layer_id) const {
        for (std::size_t i = 0; i < layer_ids.size(); ++i)
            if (layer_ids[i] == layer_id) return i;
        throw value_error("sensitivity_result: unknown layer " + layer_id);
    }
};

/// Builds every layer's proxy Hessian in one pass over the calibration set.
/// Attention mode seeds the block output with the identity-padded direction
/// and accumulates gradient Gram matrices for wq/wk/wv/wo; layerwise mode
/// uses each matrix's immediate input (2 x x^T) everywhere. Feed-forward
/// matrices always use their immediate input.
inline sensitivity_result compute_sensitivities(const toy_model& model,
                                                const calibration_set& calib,
                                                hessian_mode mode) {
    model.validate();
    if (calib.batches.empty()) throw value_error("compute_sensitivities: empty calibration set");
    if (calib.d_model != model.shape.d_model)
        throw shape_error("compute_sensitivities: calibration width mismatch");

    const model_shape& shape = model.shape;
    sensitivity_result out;
    for (std::size_t b = 0; b < shape.blocks; ++b) {
        for (weight_family role : all_families) {
            const matrix& w = model.tensor(b, role);
            out.layer_ids.push_back(layer_name(b, role));
            out.states.emplace_back(w.rows(), out.layer_ids.back(), w.rows() * w.cols());
            out.input_grams.emplace_back(w.rows(), w.rows());
        }
    }

    for (const calibration_batch& batch : calib.batches) {
        matrix x = batch.x;
        for (std::size_t b = 0; b < shape.blocks; ++b) {
            const transformer_block& block = model.blocks[b];
            const calibration_batch local{x, batch.id};
            attention_trace trace = attention_intermediates(block.attn, local, false);
            matrix hidden = feedforward_hidden(block.ffn, trace.output);
            matrix block_out = matmul(hidden, block.ffn.w2);

            auto gram_into = [&](weight_family role, const matrix& tokens_major) {
                matrix& g = out.input_grams[b * 6 + static_cast<std::size_t>(role)];
                g = add(g, matmul(transpose(tokens_major), tokens_major));
            };
            auto state_of = [&](weight_family role) -> hessian_state& {
                return out.states[b * 6 + static_cast<std::size_t>(role)];
            };

            if (mode == hessian_mode::attention) {
                gradient_workspace ws;
                ws.x = x;
                ws.trace = trace;
                sensitivity_seed seed =
                    sensitivity_seed::identity_padded(x.rows(), shape.d_model);
                std::vector<matrix> gq, gk;
                for (std::size_t h = 0; h < shape.heads; ++h) {
                    gq.push_back(grad_wq(ws, seed, block.attn, h));
                    gk.push_back(grad_wk(ws, seed, block.attn, h));
                }
                state_of(weight_family::wq).accumulate_attention(gq);
                state_of(weight_family::wk).accumulate_attention(gk);
                state_of(weight_family::wv)
                    .accumulate_attention({grad_wv(ws, seed, block.attn)});
                state_of(weight_family::wo).accumulate_attention({grad_wo(ws, seed)});
            } else {
                state_of(weight_family::wq).accumulate_linear(transpose(x));
                state_of(weight_family::wk).accumulate_linear(transpose(x));
                state_of(weight_family::wv).accumulate_linear(transpose(x));
                state_of(weight_family::wo).accumulate_linear(transpose(trace.concat));
            }
            state_of(weight_family::ffn1).accumulate_linear(transpose(trace.output));
            state_of(weight_family::ffn2).accumulate_linear(transpose(hidden));

            gram_into(weight_family::wq, x);
            gram_into(weight_family::wk, x);
            gram_into(weight_family::wv, x);
            gram_into(weight_family::wo, trace.concat);
            gram_into(weight_family::ffn1, trace.output);
            gram_into(weight_family::ffn2, hidden);

            x = std::move(block_out);
        }
    }

    for (const hessian_state& s : out.states) out.records.push_back(s.avg_trace());
    return out;
}

inline precision_plan make_uniform_plan(const std::vector<sensitivity_record>& records, int bits) {
    if (bits != 2 && bits != 4) throw value_error("make_uniform_plan: bits must be 2 or 4");
    precision_plan plan;
    plan.ratio_r = bits == 4 ? 1.0 : 0.0;
    plan.ranking = rank_layers(records);
    for (const sensitivity_record& r : plan.ranking) plan.assignments[r.layer_id] = bits;
    plan.achieved_avg_bits = static_cast<double>(bits);
    return plan;
}

/// Groups sensitivity records by transformer block (model order) for the
/// block-uniform baseline planner, keyed on the "blockNN." prefix.
inline std::vector<std::vector<sensitivity_record>> group_records_by_block(
    const std::vector<sensitivity_record>& records) {
    std::map<std::string, std::vector<sensitivity_record>> by_block;
    for (const sensitivity_record& r : records) {
        const std::size_t dot = r.layer_id.find('.');
        if (dot == std::string::npos)
            throw value_error("group_records_by_block: layer id '" + r.layer_id +
                              "' has no block prefix");
        by_block[r.layer_id.substr(0, dot)].push_back(r);
    }
    std::vector<std::vector<sensitivity_record>> blocks;
    for (auto& [key, recs] : by_block) blocks.push_back(std::move(recs));
    return blocks;
}

enum class plan_kind { trace, manual_blockwise, uniform };

struct quantize_options {
    quant_config cfg;
    hessian_mode mode = hessian_mode::attention;
    plan_kind plan = plan_kind::trace;
    double ratio = 1.0;     // trace / manual_blockwise plans
    int uniform_bits = 4;   // uniform plan
    bool compensate = true; // false = round-to-nearest baseline
    std::size_t threads = 0; // 0 = hardware concurrency
};

struct layer_run {
    std::string layer_id;
    int bits = 4;
    double avg_trace = 0.0;
    double proxy_error = 0.0; // sum of squared compensated errors
    double recon_error = 0.0; // || x (w - w_hat) ||^2 against the layer's own input
};

struct quantize_result {
    precision_plan plan;
    std::vector<quantized_layer> layers; // sorted by layer_id
    std::vector<layer_run> per_layer;    // sorted by layer_id
    toy_model quantized;
};

/// Replaces every quantized tensor in a copy of the model by its dequantized
/// values (transposed back from quantizer orientation).
inline toy_model apply_quantized(const toy_model& model,
                                 const std::vector<quantized_layer>& layers) {
    toy_model q = model;
    for (const quantized_layer& l : layers) {
        const std::size_t dot = l.layer_id.find('.');
        if (l.layer_id.rfind("block", 0) != 0 || dot == std::string::npos)
            throw value_error("apply_quantized: unrecognized layer id " + l.layer_id);
        const std::size_t block = std::stoul(l.layer_id.substr(5, dot - 5));
        const weight_family role = family_from_name(l.layer_id.substr(dot + 1));
        matrix& target = q.tensor(block, role);
        if (l.rows != target.cols() || l.cols != target.rows())
            throw shape_error("apply_quantized: layer " + l.layer_id + " shape mismatch");
        target = transpose(l.dequant());
    }
    q.validate();
    return q;
}

inline precision_plan plan_for(const sensitivity_result& sens, const quantize_options& opt) {
    switch (opt.plan) {
        case plan_kind::trace: return allocate_bits(rank_layers(sens.records), opt.ratio);
        case plan_kind::manual_blockwise:
            return manual_blockwise_plan(group_records_by_block(sens.records), opt.ratio);
        case plan_kind::uniform: return make_uniform_plan(sens.records, opt.uniform_bits);
    }
    throw value_error("plan_for: bad plan kind");
}

/// Full quantization pass: sensitivities -> plan -> per-layer column loop,
/// fanned out across worker threads with results in layer_id order.
inline quantize_result quantize_model(const toy_model& model, const calibration_set& calib,
                                      const quantize_options& opt) {
    opt.cfg.validate();
    sensitivity_result sens = compute_sensitivities(model, calib, opt.mode);
    precision_plan plan = plan_for(sens, opt);

    std::vector<std::size_t> order(sens.layer_ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return sens.layer_ids[a] < sens.layer_ids[b];
    });

    const std::size_t n_layers = order.size();
    std::vector<quantized_layer> layers(n_layers);
    const std::size_t hw = std::thread::hardware_concurrency();
    const std::size_t workers =
        std::max<std::size_t>(1, std::min(opt.threads == 0 ? (hw == 0 ? 1 : hw) : opt.threads,
                                          n_layers));

    auto run_one = [&](std::size_t slot) {
        const std::size_t idx = order[slot];
        const std::string& id = sens.layer_ids[idx];
        const std::size_t dot = id.find('.');
        const std::size_t block = std::stoul(id.substr(5, dot - 5));
        const weight_family role = family_from_name(id.substr(dot + 1));

        hessian_state state = sens.states[idx];
        state.damp(opt.cfg.damp_percent);
        quant_config cfg = opt.cfg;
        cfg.bits = plan.bits_for(id);
        const matrix w_t = transpose(model.tensor(block, role));
        layers[slot] = opt.compensate ? quantize_layer(w_t, state, cfg)
                                      : rtn_quantize(w_t, cfg, &state);
    };

    if (workers <= 1) {
        for (std::size_t slot = 0; slot < n_layers; ++slot) run_one(slot);
    } else {
        std::vector<std::future<void>> futures;
        for (std::size_t w = 0; w < workers; ++w)
            futures.push_back(std::async(std::launch::async, [&, w] {
                for (std::size_t slot = w; slot < n_layers; slot += workers) run_one(slot);
            }));
        for (std::future<void>& f : futures) f.get(); // rethrows worker exceptions
    }

    quantize_result result;
    result.quantized = apply_quantized(model, layers);
    result.per_layer.reserve(n_layers);
    for (std::size_t slot = 0; slot < n_layers; ++slot) {
        const std::size_t idx = order[slot];
        const std::string& id = sens.layer_ids[idx];
        const std::size_t dot = id.find('.');
        const std::size_t block = std::stoul(id.substr(5, dot - 5));
        const weight_family role = family_from_name(id.substr(dot + 1));

        layer_run run;
        run.layer_id = id;
        run.bits = layers[slot].bits;
        run.avg_trace = sens.records[idx].avg_trace;
        run.proxy_error = layers[slot].recon_error;
        matrix dw = sub(model.tensor(block, role), result.quantized.tensor(block, role));
        run.recon_error = frobenius_inner(dw, matmul(sens.input_grams[idx], dw));
        result.per_layer.push_back(std::move(run));
    }
    result.plan = std::move(plan);
    result.layers = std::move(layers);
    return result;
}

// ---------------------------------------------------------------------------
// evaluation

struct block_eval {
    std::string block_id;
    double attn_recon = 0.0;  // attention output deviation
    double block_recon = 0.0; // full block output deviation
};

struct eval_result {
    std::vector<block_eval> per_block;
    double total_recon = 0.0;
    bool has_ppl = false;
    double ppl_original = 0.0;
    double ppl_quantized = 0.0;
};

/// Per-block squared output deviation, both models fed the same full-precision
/// activations block by block.
inline std::vector<block_eval> block_reconstruction(const toy_model& original,
                                                    const toy_model& quantized,
                                                    const calibration_set& calib) {
    original.validate();
    quantized.validate();
    if (original.shape.blocks != quantized.shape.blocks ||
        original.shape.d_model != quantized.shape.d_model)
        throw shape_error("block_reconstruction: model shapes differ");

    std::vector<block_eval> evals(original.shape.blocks);
    for (std::size_t b = 0; b < original.shape.blocks; ++b) {
        char id[16];
        std::snprintf(id, sizeof(id), "block%02zu", b);
        evals[b].block_id = id;
    }
    for (const calibration_batch& batch : calib.batches) {
        matrix x = batch.x;
        for (std::size_t b = 0; b < original.shape.blocks; ++b) {
            const calibration_batch local{x, batch.id};
            matrix ao = attention_forward(original.blocks[b].attn, local, false);
            matrix aq = attention_forward(quantized.blocks[b].attn, local, false);
            matrix yo = feedforward_forward(original.blocks[b].ffn, ao);
            matrix yq = feedforward_forward(quantized.blocks[b].ffn, aq);
            matrix da = sub(ao, aq);
            matrix dy = sub(yo, yq);
            evals[b].attn_recon += frobenius_inner(da, da);
            evals[b].block_recon += frobenius_inner(dy, dy);
            x = std::move(yo);
        }
    }
    return evals;
}

/// Next-token negative-log-likelihood harness over deterministic synthetic
/// sequences: a fixed gaussian embedding table, the model run with the causal
/// mask on, logits through the tied (transposed) embedding, perplexity
/// exp(mean nll). Original and quantized models see identical tokens and
/// embeddings for a like-for-like comparison.
inline double toy_perplexity(const toy_model& model, std::uint64_t seed, std::size_t vocab = 32,
                             std::size_t segments = 4) {
    model.validate();
    if (vocab < 2) throw value_error("toy_perplexity: vocab must be >= 2");
    const std::size_t n = model.shape.n;
    const std::size_t d_model = model.shape.d_model;
    if (n < 2) throw value_error("toy_perplexity: need sequences of >= 2 tokens");

    rng embed_rng = rng::stream(seed, "eval/embed");
    matrix embed = random_gaussian(vocab, d_model, embed_rng,
                                   1.0 / std::sqrt(static_cast<double>(d_model)));

    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < segments; ++s) {
        char name[48];
        std::snprintf(name, sizeof(name), "eval/tokens/seg%03zu", s);
        rng tok_rng = rng::stream(seed, name);
        std::vector<std::size_t> tokens(n);
        for (std::size_t t = 0; t < n; ++t) tokens[t] = tok_rng.below(vocab);

        matrix x(n, d_model);
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j = 0; j < d_model; ++j) x(t, j) = embed(tokens[t], j);

        for (const transformer_block& block : model.blocks) {
            matrix a = attention_forward(block.attn, {x, name}, true);
            x = feedforward_forward(block.ffn, a);
        }
        matrix logits = matmul(x, transpose(embed));
        for (std::size_t t = 0; t + 1 < n; ++t) {
            double row_max = logits(t, 0);
            for (std::size_t v = 1; v < vocab; ++v) row_max = std::max(row_max, logits(t, v));
            double lse = 0.0;
            for (std::size_t v = 0; v < vocab; ++v) lse += std::exp(logits(t, v) - row_max);
            nll += row_max + std::log(lse) - logits(t, tokens[t + 1]);
            ++count;
        }
    }
    return std::exp(nll / static_cast<double>(count));
}

inline eval_result evaluate_models(const toy_model& original, const toy_model& quantized,
                                   const calibration_set& calib, bool with_ppl = false,
                                   std::uint64_t seed = 0, std::size_t vocab = 32,
                                   std::size_t ppl_segments = 4) {
    eval_result result;
    result.per_block = block_reconstruction(original, quantized, calib);
    for (const block_eval& b : result.per_block) result.total_recon += b.block_recon;
    if (with_ppl) {
        result.has_ppl = true;
        result.ppl_original = toy_perplexity(original, seed, vocab, ppl_segments);
        result.ppl_quantized = toy_perplexity(quantized, seed, vocab, ppl_segments);
    }
    return result;
}

// ---------------------------------------------------------------------------
// method comparison grid

enum class compare_method { aptq, layerwise_hessian, rtn, manual_blockwise };

inline const char* method_name(compare_method m) {
    switch (m) {
        case compare_method::aptq: return "aptq";
        case compare_method::layerwise_hessian: return "layerwise-hessian";
        case compare_method::rtn: return "rtn";
        case compare_method::manual_blockwise: return "manual-blockwise";
    }
    return "?";
}

inline compare_method method_from_name(const std::string& name) {
    for (compare_method m : {compare_method::aptq, compare_method::layerwise_hessian,
                             compare_method::rtn, compare_method::manual_blockwise})
        if (name == method_name(m)) return m;
    throw value_error("unknown comparison method: " + name);
}

struct compare_cell {
    std::string method;
    double ratio = 1.0;
    double achieved_bits = 4.0;
    double total_recon = 0.0;
    double proxy_total = 0.0;
    bool has_ppl = false;
    double ppl_quantized = 0.0;
};

inline quantize_options options_for_method(compare_method m, const quant_config& cfg,
                                           double ratio) {
    quantize_options opt;
    opt.cfg = cfg;
    opt.ratio = ratio;
    switch (m) {
        case compare_method::aptq: break;
        case compare_method::layerwise_hessian: opt.mode = hessian_mode::layerwise; break;
        case compare_method::rtn: opt.compensate = false; break;
        case compare_method::manual_blockwise: opt.plan = plan_kind::manual_blockwise; break;
    }
    return opt;
}

/// (method x ratio) grid of total reconstruction error (and optionally toy
/// perplexity), rows in the order given.
inline std::vector<compare_cell> compare_methods(const toy_model& model,
                                                 const calibration_set& calib,
                                                 const std::vector<compare_method>& methods,
                                                 const std::vector<double>& ratios,
                                                 const quant_config& cfg, bool with_ppl = false,
                                                 std::uint64_t seed = 0) {
    if (methods.empty() || ratios.empty()) throw value_error("compare_methods: empty grid");
    std::vector<compare_cell> cells;
    for (compare_method m : methods) {
        for (double r : ratios) {
            quantize_result qr = quantize_model(model, calib, options_for_method(m, cfg, r));
            compare_cell cell;
            cell.method = method_name(m);
            cell.ratio = r;
            cell.achieved_bits = qr.plan.achieved_avg_bits;
            for (const layer_run& lr : qr.per_layer) cell.proxy_total += lr.proxy_error;
            eval_result ev = evaluate_models(model, qr.quantized, calib, with_ppl, seed);
            cell.total_recon = ev.total_recon;
            if (with_ppl) {
                cell.has_ppl = true;
                cell.ppl_quantized = ev.ppl_quantized;
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

// ---------------------------------------------------------------------------
// standalone attention-block quantization (statistical harnesses)

/// How gradient-based Hessian accumulation seeds the output direction: one
/// diagonal seed per calibration sample (cheap default), or a sweep over
/// every output coordinate, which sums to the exact Gauss-Newton matrix and
/// is affordable at small sizes.
enum class sensitivity_policy { identity_seed, basis_sweep };

/// Quantizes the four projections of a single attention block against either
/// gradient-based or input-Gram Hessians and returns the dequantized weights.
inline attention_weights quantize_attention_weights(
    const attention_weights& w, const std::vector<calibration_batch>& batches, hessian_mode mode,
    const quant_config& cfg, sensitivity_policy policy = sensitivity_policy::identity_seed) {
    w.validate();
    if (batches.empty()) throw value_error("quantize_attention_weights: no batches");
    const std::size_t d = w.d_model();
    hessian_state hq(d, "wq", d * d), hk(d, "wk", d * d), hv(d, "wv", d * d), ho(d, "wo", d * d);

    for (const calibration_batch& batch : batches) {
        attention_trace trace = attention_intermediates(w, batch, false);
        if (mode == hessian_mode::attention) {
            gradient_workspace ws;
            ws.x = batch.x;
            ws.trace = trace;
            const std::size_t n = batch.x.rows();
            std::vector<sensitivity_seed> seeds;
            if (policy == sensitivity_policy::identity_seed) {
                seeds.push_back(sensitivity_seed::identity_padded(n, d));
            } else {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        seeds.push_back(sensitivity_seed::basis(n, d, i, j));
            }
            for (const sensitivity_seed& seed : seeds) {
                std::vector<matrix> gq, gk;
                for (std::size_t h = 0; h < w.heads; ++h) {
                    gq.push_back(grad_wq(ws, seed, w, h));
                    gk.push_back(grad_wk(ws, seed, w, h));
                }
                hq.accumulate_attention(gq);
                hk.accumulate_attention(gk);
                hv.accumulate_attention({grad_wv(ws, seed, w)});
                ho.accumulate_attention({grad_wo(ws, seed)});
            }
        } else {
            hq.accumulate_linear(transpose(batch.x));
            hk.accumulate_linear(transpose(batch.x));
            hv.accumulate_linear(transpose(batch.x));
            ho.accumulate_linear(transpose(trace.concat));
        }
    }

    auto quantize_one = [&](const matrix& weight, hessian_state& state) {
        state.damp(cfg.damp_percent);
        return transpose(quantize_layer(transpose(weight), state, cfg).dequant());
    };
    attention_weights out = w;
    out.wq = quantize_one(w.wq, hq);
    out.wk = quantize_one(w.wk, hk);
    out.wv = quantize_one(w.wv, hv);
    out.wo = quantize_one(w.wo, ho);
    return out;
}

// ---------------------------------------------------------------------------
// tabular serialization

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

} // namespace detail

/// Tab-separated sensitivity table, rows sorted by layer_id.
inline std::string sensitivity_table(std::vector<sensitivity_record> records) {
    std::sort(records.begin(), records.end(),
              [](const sensitivity_record& a, const sensitivity_record& b) {
                  return a.layer_id < b.layer_id;
              });
    std::string out = "# layer_id\tavg_trace\tparam_count\n";
    for (const sensitivity_record& r : records)
        out += r.layer_id + "\t" + detail::fmt_double(r.avg_trace) + "\t" +
               std::to_string(r.param_count) + "\n";
    return out;
}

inline std::vector<sensitivity_record> parse_sensitivity_table(const std::string& text) {
    std::vector<sensitivity_record> records;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const std::vector<std::string> f = detail::split_tabs(line);
        if (f.size() != 3) throw io_error("sensitivity table: malformed line '" + line + "'");
        try {
            records.push_back({f[0], std::stod(f[1]),
                               static_cast<std::size_t>(std::stoull(f[2]))});
        } catch (const std::exception&) {
            throw io_error("sensitivity table: bad numeric field in '" + line + "'");
        }
    }
    if (records.empty()) throw io_error("sensitivity table: no records");
    return records;
}

/// Tab-separated plan table: summary comment lines, then one row per layer
/// sorted by layer_id.
inline std::string plan_table(const precision_plan& plan) {
    std::string out;
    out += "# target_r\t" + detail::fmt_double(plan.ratio_r) + "\n";
    out += "# achieved_avg_bits\t" + detail::fmt_double(plan.achieved_avg_bits) + "\n";
    out += "# layer_id\tbits\tavg_trace\tparam_count\n";
    std::vector<sensitivity_record> rows = plan.ranking;
    std::sort(rows.begin(), rows.end(),
              [](const sensitivity_record& a, const sensitivity_record& b) {
                  return a.layer_id < b.layer_id;
              });
    for (const sensitivity_record& r : rows)
        out += r.layer_id + "\t" + std::to_string(plan.bits_for(r.layer_id)) + "\t" +
               detail::fmt_double(r.avg_trace) + "\t" + std::to_string(r.param_count) + "\n";
    return out;
}

inline precision_plan parse_plan_table(const std::string& text) {
    precision_plan plan;
    std::vector<sensitivity_record> records;
    std::istringstream in(text);
    std::string line;
    bool have_r = false, have_bits = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const std::vector<std::string> f = detail::split_tabs(line);
            if (f.size() == 2 && f[0] == "# target_r") {
                plan.ratio_r = std::stod(f[1]);
                have_r = true;
            } else if (f.size() == 2 && f[0] == "# achieved_avg_bits") {
                plan.achieved_avg_bits = std::stod(f[1]);
                have_bits = true;
            }
            continue;
        }
        const std::vector<std::string> f = detail::split_tabs(line);
        if (f.size() != 4) throw io_error("plan table: malformed line '" + line + "'");
        try {
            const int bits = std::stoi(f[1]);
            if (bits != 2 && bits != 4) throw io_error("plan table: bits must be 2 or 4");
            plan.assignments[f[0]] = bits;
            records.push_back({f[0], std::stod(f[2]),
                               static_cast<std::size_t>(std::stoull(f[3]))});
        } catch (const io_error&) {
            throw;
        } catch (const std::exception&) {
            throw io_error("plan table: bad numeric field in '" + line + "'");
        }
    }
    if (records.empty()) throw io_error("plan table: no records");
    if (!have_r || !have_bits) throw io_error("plan table: missing summary lines");
    plan.ranking = rank_layers(records);
    return plan;
}

} // namespace aptq
