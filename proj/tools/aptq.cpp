// aptq: post-training quantization workbench for toy transformer stacks.
//
// Subcommands cover the full pipeline: generate synthetic model/calibration
// pairs, scan layer sensitivities, plan mixed 2/4-bit precision, run the
// error-compensating quantizer, evaluate reconstruction and toy perplexity,
// and sweep method x ratio comparison grids. All outputs are deterministic
// functions of the inputs; --report writes machine-readable JSONL.
//
// Exit codes: 0 success, 2 input/usage errors, 3 numeric failures.

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "aptq/aptq.hpp"

namespace {

using nlohmann::json;

class report_writer {
  public:
    explicit report_writer(const std::string& path) {
        if (path.empty()) return;
        out_.emplace(path, std::ios::binary | std::ios::trunc);
        if (!*out_) throw aptq::io_error("cannot open report file " + path);
    }

    void line(const json& j) {
        if (!out_) return;
        *out_ << j.dump() << "\n";
        if (!*out_) throw aptq::io_error("report write failed");
    }

  private:
    std::optional<std::ofstream> out_;
};

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = s.find(',', start);
        if (comma == std::string::npos) {
            parts.push_back(s.substr(start));
            break;
        }
        parts.push_back(s.substr(start, comma - start));
        start = comma + 1;
    }
    return parts;
}

aptq::hessian_mode parse_mode(const std::string& name) {
    if (name == "attention") return aptq::hessian_mode::attention;
    if (name == "layerwise") return aptq::hessian_mode::layerwise;
    throw aptq::value_error("unknown sensitivity mode: " + name);
}

std::string fmt(double v) { return aptq::detail::fmt_double(v); }

// ---------------------------------------------------------------------------

struct generate_args {
    std::string out, calib_out;
    std::uint64_t seed = 1;
    std::size_t blocks = 2, d_model = 16, heads = 2, n = 12, d_ff = 0, segments = 4;
};

int cmd_generate(const generate_args& a) {
    aptq::model_shape shape;
    shape.n = a.n;
    shape.d_model = a.d_model;
    shape.heads = a.heads;
    shape.d_ff = a.d_ff == 0 ? 4 * a.d_model : a.d_ff;
    shape.blocks = a.blocks;

    auto [model, calib] = aptq::generate_synthetic(a.seed, shape, a.segments);
    aptq::save_model(model, a.out);
    aptq::save_calibration(calib, a.calib_out);

    std::printf("wrote model %s (blocks=%zu d_model=%zu heads=%zu n=%zu d_ff=%zu)\n",
                a.out.c_str(), shape.blocks, shape.d_model, shape.heads, shape.n, shape.d_ff);
    std::printf("wrote calibration %s (%zu segments of %zux%zu)\n", a.calib_out.c_str(),
                a.segments, shape.n, shape.d_model);
    return 0;
}

struct sensitivity_args {
    std::string model, calib, out, report, mode = "attention";
};

int cmd_sensitivity(const sensitivity_args& a) {
    const aptq::toy_model model = aptq::load_model(a.model);
    const aptq::calibration_set calib = aptq::load_calibration(a.calib);
    const aptq::sensitivity_result sens =
        aptq::compute_sensitivities(model, calib, parse_mode(a.mode));

    const std::string table = aptq::sensitivity_table(sens.records);
    aptq::detail::write_file(a.out, table);

    report_writer report(a.report);
    std::vector<aptq::sensitivity_record> rows = aptq::rank_layers(sens.records);
    std::printf("sensitivity (%s mode, %zu segments), most sensitive first:\n", a.mode.c_str(),
                calib.batches.size());
    for (const aptq::sensitivity_record& r : rows) {
        std::printf("  %-16s avg_trace=%-12.6g params=%zu\n", r.layer_id.c_str(), r.avg_trace,
                    r.param_count);
        report.line(json{{"record", "sensitivity"},
                         {"layer_id", r.layer_id},
                         {"avg_trace", r.avg_trace},
                         {"param_count", r.param_count},
                         {"mode", a.mode}});
    }
    std::printf("wrote %s (%zu layers)\n", a.out.c_str(), rows.size());
    return 0;
}

struct plan_args {
    std::string sens, out, report, method = "trace";
    double ratio = 1.0;
};

int cmd_plan(const plan_args& a) {
    const std::vector<aptq::sensitivity_record> records =
        aptq::parse_sensitivity_table(aptq::detail::read_file(a.sens));

    aptq::precision_plan plan;
    if (a.method == "trace") {
        plan = aptq::allocate_bits(aptq::rank_layers(records), a.ratio);
    } else if (a.method == "manual-blockwise") {
        plan = aptq::manual_blockwise_plan(aptq::group_records_by_block(records), a.ratio);
    } else {
        throw aptq::value_error("unknown planning method: " + a.method);
    }

    aptq::detail::write_file(a.out, aptq::plan_table(plan));

    report_writer report(a.report);
    report.line(json{{"record", "plan"},
                     {"method", a.method},
                     {"target_r", plan.ratio_r},
                     {"achieved_avg_bits", plan.achieved_avg_bits}});
    for (const aptq::sensitivity_record& r : plan.ranking)
        report.line(json{{"record", "assignment"},
                         {"layer_id", r.layer_id},
                         {"bits", plan.bits_for(r.layer_id)}});

    std::printf("plan (%s, target_r=%s): achieved_avg_bits=%s over %zu layers\n",
                a.method.c_str(), fmt(plan.ratio_r).c_str(),
                fmt(plan.achieved_avg_bits).c_str(), plan.ranking.size());
    std::printf("wrote %s\n", a.out.c_str());
    return 0;
}

struct quantize_args {
    std::string model, calib, out, report;
    std::string mode = "attention", plan_method = "trace";
    double ratio = 1.0;
    int bits = 0; // 0 = use ratio
    std::size_t group_size = 128, block_size = 128, threads = 0;
    double damp = 0.01;
    bool no_compensate = false;
};

int cmd_quantize(const quantize_args& a) {
    const aptq::toy_model model = aptq::load_model(a.model);
    const aptq::calibration_set calib = aptq::load_calibration(a.calib);

    aptq::quantize_options opt;
    opt.cfg.group_size = a.group_size;
    opt.cfg.block_size = a.block_size;
    opt.cfg.damp_percent = a.damp;
    opt.mode = parse_mode(a.mode);
    opt.threads = a.threads;
    opt.compensate = !a.no_compensate;
    if (a.bits != 0) {
        opt.plan = aptq::plan_kind::uniform;
        opt.uniform_bits = a.bits;
    } else {
        opt.plan = a.plan_method == "manual-blockwise" ? aptq::plan_kind::manual_blockwise
                                                       : aptq::plan_kind::trace;
        if (a.plan_method != "trace" && a.plan_method != "manual-blockwise")
            throw aptq::value_error("unknown planning method: " + a.plan_method);
        opt.ratio = a.ratio;
    }

    const aptq::quantize_result result = aptq::quantize_model(model, calib, opt);
    aptq::save_packed(result.plan, result.layers, model.shape, a.out);

    report_writer report(a.report);
    report.line(json{{"record", "plan"},
                     {"mode", a.mode},
                     {"compensate", opt.compensate},
                     {"group_size", a.group_size},
                     {"block_size", a.block_size},
                     {"damp_percent", a.damp},
                     {"target_r", result.plan.ratio_r},
                     {"achieved_avg_bits", result.plan.achieved_avg_bits}});
    double proxy_total = 0.0, recon_total = 0.0;
    for (const aptq::layer_run& lr : result.per_layer) {
        proxy_total += lr.proxy_error;
        recon_total += lr.recon_error;
        report.line(json{{"record", "layer"},
                         {"layer_id", lr.layer_id},
                         {"bits", lr.bits},
                         {"avg_trace", lr.avg_trace},
                         {"proxy_error", lr.proxy_error},
                         {"recon_error", lr.recon_error}});
    }
    report.line(json{{"record", "total"},
                     {"proxy_total", proxy_total},
                     {"recon_total", recon_total}});

    std::printf("quantized %zu layers (achieved_avg_bits=%s, mode=%s, compensate=%s)\n",
                result.layers.size(), fmt(result.plan.achieved_avg_bits).c_str(),
                a.mode.c_str(), opt.compensate ? "yes" : "no");
    for (const aptq::layer_run& lr : result.per_layer)
        std::printf("  %-16s bits=%d avg_trace=%-12.6g proxy=%-12.6g recon=%.6g\n",
                    lr.layer_id.c_str(), lr.bits, lr.avg_trace, lr.proxy_error,
                    lr.recon_error);
    std::printf("proxy_total=%s recon_total=%s\n", fmt(proxy_total).c_str(),
                fmt(recon_total).c_str());
    std::printf("wrote %s\n", a.out.c_str());
    return 0;
}

struct eval_args {
    std::string model, packed, calib, report;
    bool toy_ppl = false;
    std::uint64_t seed = 0;
    std::size_t vocab = 32, ppl_segments = 4;
};

int cmd_eval(const eval_args& a) {
    const aptq::toy_model model = aptq::load_model(a.model);
    const aptq::packed_model pm = aptq::load_packed(a.packed);
    const aptq::calibration_set calib = aptq::load_calibration(a.calib);
    const aptq::toy_model quantized = aptq::apply_quantized(model, pm.layers);

    const aptq::eval_result ev =
        aptq::evaluate_models(model, quantized, calib, a.toy_ppl, a.seed, a.vocab,
                              a.ppl_segments);

    report_writer report(a.report);
    for (const aptq::block_eval& b : ev.per_block) {
        std::printf("  %-10s attn_recon=%-14.8g block_recon=%.8g\n", b.block_id.c_str(),
                    b.attn_recon, b.block_recon);
        report.line(json{{"record", "block"},
                         {"block_id", b.block_id},
                         {"attn_recon", b.attn_recon},
                         {"block_recon", b.block_recon}});
    }
    std::printf("total_recon=%s achieved_avg_bits=%s\n", fmt(ev.total_recon).c_str(),
                fmt(pm.achieved_avg_bits).c_str());
    report.line(json{{"record", "total"},
                     {"total_recon", ev.total_recon},
                     {"achieved_avg_bits", pm.achieved_avg_bits}});
    if (ev.has_ppl) {
        std::printf("ppl_original=%s ppl_quantized=%s\n", fmt(ev.ppl_original).c_str(),
                    fmt(ev.ppl_quantized).c_str());
        report.line(json{{"record", "ppl"},
                         {"seed", a.seed},
                         {"vocab", a.vocab},
                         {"original", ev.ppl_original},
                         {"quantized", ev.ppl_quantized}});
    }
    return 0;
}

struct compare_args {
    std::string model, calib, report;
    std::string methods = "aptq,layerwise-hessian,rtn,manual-blockwise";
    std::string ratios = "0.5,0.75,1.0";
    std::size_t group_size = 128, block_size = 128;
    double damp = 0.01;
    bool toy_ppl = false;
    std::uint64_t seed = 0;
};

int cmd_compare(const compare_args& a) {
    const aptq::toy_model model = aptq::load_model(a.model);
    const aptq::calibration_set calib = aptq::load_calibration(a.calib);

    std::vector<aptq::compare_method> methods;
    for (const std::string& m : split_commas(a.methods))
        methods.push_back(aptq::method_from_name(m));
    std::vector<double> ratios;
    for (const std::string& r : split_commas(a.ratios)) {
        try {
            ratios.push_back(std::stod(r));
        } catch (const std::exception&) {
            throw aptq::value_error("bad ratio value: " + r);
        }
    }

    aptq::quant_config cfg;
    cfg.group_size = a.group_size;
    cfg.block_size = a.block_size;
    cfg.damp_percent = a.damp;

    const std::vector<aptq::compare_cell> cells =
        aptq::compare_methods(model, calib, methods, ratios, cfg, a.toy_ppl, a.seed);

    report_writer report(a.report);
    std::printf("%-18s %-6s %-9s %-14s %-14s %s\n", "method", "r", "avg_bits", "total_recon",
                "proxy_total", a.toy_ppl ? "ppl" : "");
    for (const aptq::compare_cell& c : cells) {
        std::printf("%-18s %-6.3g %-9.4g %-14.8g %-14.8g", c.method.c_str(), c.ratio,
                    c.achieved_bits, c.total_recon, c.proxy_total);
        if (c.has_ppl)
            std::printf(" %.6g", c.ppl_quantized);
        std::printf("\n");
        json j{{"record", "cell"},
               {"method", c.method},
               {"ratio", c.ratio},
               {"achieved_bits", c.achieved_bits},
               {"total_recon", c.total_recon},
               {"proxy_total", c.proxy_total}};
        if (c.has_ppl) j["ppl_quantized"] = c.ppl_quantized;
        report.line(j);
    }
    return 0;
}

struct inspect_args {
    std::string file;
};

int cmd_inspect(const inspect_args& a) {
    const std::string bytes = aptq::detail::read_file(a.file);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), aptq::detail::file_magic, 4) != 0)
        throw aptq::io_error(a.file + ": not a recognized container (bad magic)");
    aptq::detail::byte_reader r(bytes, 4);
    const std::uint32_t header_len = r.u32le();
    if (8 + static_cast<std::size_t>(header_len) > bytes.size())
        throw aptq::io_error(a.file + ": truncated header");
    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::exception& e) {
        throw aptq::io_error(a.file + ": header parse error: " + e.what());
    }

    const std::string kind = header.value("kind", "?");
    std::printf("kind=%s format_version=%d payload_bytes=%zu\n", kind.c_str(),
                header.value("format_version", 0), bytes.size() - 8 - header_len);
    if (header.contains("shape")) {
        const json& s = header["shape"];
        std::printf("shape: blocks=%zu d_model=%zu heads=%zu d_ff=%zu n=%zu\n",
                    s.value("blocks", std::size_t{0}), s.value("d_model", std::size_t{0}),
                    s.value("heads", std::size_t{0}), s.value("d_ff", std::size_t{0}),
                    s.value("n", std::size_t{0}));
    }
    if (kind == "model" && header.contains("tensors"))
        std::printf("tensors: %zu\n", header["tensors"].size());
    if (kind == "calib" && header.contains("batches"))
        std::printf("segments: %zu source: %s\n", header["batches"].size(),
                    header.value("source", "?").c_str());
    if (kind == "packed" && header.contains("layers")) {
        std::printf("layers: %zu group_size=%zu target_r=%s achieved_avg_bits=%s\n",
                    header["layers"].size(), header.value("group_size", std::size_t{0}),
                    fmt(header.value("ratio_r", 0.0)).c_str(),
                    fmt(header.value("achieved_avg_bits", 0.0)).c_str());
        for (const json& l : header["layers"])
            std::printf("  %-16s bits=%d rows=%zu cols=%zu recon_proxy=%.6g\n",
                        l.value("layer_id", "?").c_str(), l.value("bits", 0),
                        l.value("rows", std::size_t{0}), l.value("cols", std::size_t{0}),
                        l.value("recon_proxy", 0.0));
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"post-training quantization workbench for toy transformer stacks"};
    app.require_subcommand(1);

    generate_args g;
    CLI::App* gen = app.add_subcommand("generate", "write a synthetic model + calibration pair");
    gen->add_option("--out", g.out, "model output path")->required();
    gen->add_option("--calib-out", g.calib_out, "calibration output path")->required();
    gen->add_option("--seed", g.seed, "master seed");
    gen->add_option("--blocks", g.blocks, "transformer blocks");
    gen->add_option("--d-model", g.d_model, "model width");
    gen->add_option("--heads", g.heads, "attention heads");
    gen->add_option("--n", g.n, "tokens per segment");
    gen->add_option("--d-ff", g.d_ff, "feed-forward width (0 = 4*d_model)");
    gen->add_option("--segments", g.segments, "calibration segments");

    sensitivity_args s;
    CLI::App* sen = app.add_subcommand("sensitivity", "accumulate per-layer hessian traces");
    sen->add_option("--model", s.model)->required();
    sen->add_option("--calib", s.calib)->required();
    sen->add_option("--mode", s.mode, "attention | layerwise")
        ->check(CLI::IsMember({"attention", "layerwise"}));
    sen->add_option("--out", s.out, "sensitivity table path")->required();
    sen->add_option("--report", s.report, "jsonl report path");

    plan_args p;
    CLI::App* pln = app.add_subcommand("plan", "allocate mixed 2/4-bit precision");
    pln->add_option("--sens", p.sens, "sensitivity table path")->required();
    pln->add_option("--ratio", p.ratio, "fraction of parameters at 4 bits");
    pln->add_option("--method", p.method, "trace | manual-blockwise")
        ->check(CLI::IsMember({"trace", "manual-blockwise"}));
    pln->add_option("--out", p.out, "plan table path")->required();
    pln->add_option("--report", p.report, "jsonl report path");

    quantize_args q;
    CLI::App* qnt = app.add_subcommand("quantize", "run the compensated column quantizer");
    qnt->add_option("--model", q.model)->required();
    qnt->add_option("--calib", q.calib)->required();
    qnt->add_option("--out", q.out, "packed model path")->required();
    CLI::Option* ropt = qnt->add_option("--ratio", q.ratio, "fraction of parameters at 4 bits");
    CLI::Option* bopt = qnt->add_option("--bits", q.bits, "uniform bit width (2 or 4)");
    ropt->excludes(bopt);
    qnt->add_option("--mode", q.mode, "attention | layerwise")
        ->check(CLI::IsMember({"attention", "layerwise"}));
    qnt->add_option("--plan-method", q.plan_method, "trace | manual-blockwise")
        ->check(CLI::IsMember({"trace", "manual-blockwise"}));
    qnt->add_option("--group-size", q.group_size, "columns per scale/zero-point group");
    qnt->add_option("--block-size", q.block_size, "columns per deferred-update block");
    qnt->add_option("--damp", q.damp, "diagonal damping fraction");
    qnt->add_option("--threads", q.threads, "worker threads (0 = auto)");
    qnt->add_flag("--no-compensate", q.no_compensate, "round-to-nearest baseline");
    qnt->add_option("--report", q.report, "jsonl report path");

    eval_args e;
    CLI::App* evl = app.add_subcommand("eval", "measure reconstruction of a packed model");
    evl->add_option("--model", e.model)->required();
    evl->add_option("--packed", e.packed)->required();
    evl->add_option("--calib", e.calib)->required();
    evl->add_flag("--toy-ppl", e.toy_ppl, "also run the toy perplexity harness");
    evl->add_option("--seed", e.seed, "perplexity stream seed");
    evl->add_option("--vocab", e.vocab, "perplexity vocabulary size");
    evl->add_option("--ppl-segments", e.ppl_segments, "perplexity segments");
    evl->add_option("--report", e.report, "jsonl report path");

    compare_args c;
    CLI::App* cmp = app.add_subcommand("compare", "method x ratio comparison grid");
    cmp->add_option("--model", c.model)->required();
    cmp->add_option("--calib", c.calib)->required();
    cmp->add_option("--methods", c.methods, "comma-separated method list");
    cmp->add_option("--ratios", c.ratios, "comma-separated ratio list");
    cmp->add_option("--group-size", c.group_size);
    cmp->add_option("--block-size", c.block_size);
    cmp->add_option("--damp", c.damp);
    cmp->add_flag("--toy-ppl", c.toy_ppl, "include toy perplexity per cell");
    cmp->add_option("--seed", c.seed, "perplexity stream seed");
    cmp->add_option("--report", c.report, "jsonl report path");

    inspect_args i;
    CLI::App* ins = app.add_subcommand("inspect", "print a container file's header");
    ins->add_option("--file", i.file)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& help) {
        return app.exit(help);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(g);
        if (sen->parsed()) return cmd_sensitivity(s);
        if (pln->parsed()) return cmd_plan(p);
        if (qnt->parsed()) return cmd_quantize(q);
        if (evl->parsed()) return cmd_eval(e);
        if (cmp->parsed()) return cmd_compare(c);
        if (ins->parsed()) return cmd_inspect(i);
    } catch (const aptq::numeric_error& err) {
        std::fprintf(stderr, "numeric error: %s\n", err.what());
        return 3;
    } catch (const aptq::definiteness_error& err) {
        std::fprintf(stderr, "numeric error: %s\n", err.what());
        return 3;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 2;
    }
    return 0;
}
