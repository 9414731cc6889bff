#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aptq/attention.hpp"
#include "aptq/errors.hpp"
#include "aptq/hessian.hpp"
#include "aptq/matrix.hpp"
#include "aptq/planner.hpp"
#include "aptq/quantizer.hpp"
#include "aptq/rng.hpp"

// Bit-exact container formats. Every file is
//   magic "APTQ" | u32 LE header length | JSON header | raw payload
// with all multi-byte payload values written least-significant byte first,
// independent of host endianness. Headers are dumped with sorted keys, so
// identical inputs always produce identical bytes. Tensor/layer payload
// regions carry 64-bit FNV-1a checksums (16 hex digits) in the header.
//
// Three kinds share the container: "model" (full-precision f64 tensors),
// "calib" (activation segments), and "packed" (grouped low-bit codes).

namespace aptq {

struct model_shape {
    std::size_t n = 0;       // nominal sequence length for calibration/eval
    std::size_t d_model = 0;
    std::size_t heads = 0;
    std::size_t d_ff = 0;
    std::size_t blocks = 0;

    void validate() const {
        if (n < 1 || d_model < 1 || heads < 1 || d_ff < 1 || blocks < 1)
            throw shape_error("model_shape: all counts must be >= 1");
        if (d_model % heads != 0)
            throw shape_error("model_shape: d_model " + std::to_string(d_model) +
                              " not divisible by heads " + std::to_string(heads));
    }
};

struct transformer_block {
    attention_weights attn;
    feed_forward_weights ffn;
};

inline std::string layer_name(std::size_t block, weight_family role) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "block%02zu.%s", block, family_name(role));
    return buf;
}

inline weight_family family_from_name(const std::string& role) {
    for (weight_family f : {weight_family::wq, weight_family::wk, weight_family::wv,
                            weight_family::wo, weight_family::ffn1, weight_family::ffn2})
        if (role == family_name(f)) return f;
    throw value_error("unknown tensor role: " + role);
}

struct toy_model {
    model_shape shape;
    std::vector<transformer_block> blocks;

    matrix& tensor(std::size_t block, weight_family role) {
        transformer_block& b = blocks.at(block);
        switch (role) {
            case weight_family::wq: return b.attn.wq;
            case weight_family::wk: return b.attn.wk;
            case weight_family::wv: return b.attn.wv;
            case weight_family::wo: return b.attn.wo;
            case weight_family::ffn1: return b.ffn.w1;
            case weight_family::ffn2: return b.ffn.w2;
        }
        throw value_error("toy_model::tensor: bad role");
    }

    const matrix& tensor(std::size_t block, weight_family role) const {
        return const_cast<toy_model*>(this)->tensor(block, role);
    }

    void validate() const {
        shape.validate();
        if (blocks.size() != shape.blocks)
            throw shape_error("toy_model: block count mismatch");
        for (const transformer_block& b : blocks) {
            b.attn.validate();
            b.ffn.validate();
            if (b.attn.d_model() != shape.d_model || b.attn.heads != shape.heads ||
                b.ffn.w1.rows() != shape.d_model || b.ffn.w1.cols() != shape.d_ff)
                throw shape_error("toy_model: block shape inconsistent with manifest shape");
        }
    }
};

struct calibration_set {
    std::string source; // "synthetic(<seed>)" or "file(<path>)"
    std::size_t n = 0;
    std::size_t d_model = 0;
    std::vector<calibration_batch> batches;
};

struct packed_model {
    int format_version = 1;
    model_shape shape;
    double ratio_r = 1.0;
    double achieved_avg_bits = 4.0;
    std::size_t group_size = 128;
    std::vector<quantized_layer> layers; // sorted by layer_id

    const quantized_layer& layer(const std::string& layer_id) const {
        for (const quantized_layer& l : layers)
            if (l.layer_id == layer_id) return l;
        throw value_error("packed_model: no layer " + layer_id);
    }
};

// ---------------------------------------------------------------------------
// code packing

/// Packs codes (row-major, values < 2^bits) into little-endian 32-bit words.
/// Stream order is column-major within each column group: group by group,
/// column by column, row by row. Codes fill each word from the least
/// significant bits upward.
inline std::vector<std::uint32_t> pack_codes(const std::vector<std::uint8_t>& codes,
                                             std::size_t rows, std::size_t cols, int bits,
                                             std::size_t group_size) {
    if (bits != 2 && bits != 4) throw value_error("pack_codes: bits must be 2 or 4");
    if (codes.size() != rows * cols) throw shape_error("pack_codes: code count mismatch");
    const std::size_t per_word = 32 / static_cast<std::size_t>(bits);
    std::vector<std::uint32_t> words((codes.size() + per_word - 1) / per_word, 0);
    std::size_t idx = 0;
    for (std::size_t g0 = 0; g0 < cols; g0 += group_size)
        for (std::size_t j = g0; j < std::min(g0 + group_size, cols); ++j)
            for (std::size_t r = 0; r < rows; ++r) {
                const std::uint32_t code = codes[r * cols + j];
                if (code >> bits) throw value_error("pack_codes: code out of range for bit width");
                words[idx / per_word] |=
                    code << static_cast<std::uint32_t>((idx % per_word) * bits);
                ++idx;
            }
    return words;
}

inline std::vector<std::uint8_t> unpack_codes(const std::vector<std::uint32_t>& words,
                                              std::size_t rows, std::size_t cols, int bits,
                                              std::size_t group_size) {
    if (bits != 2 && bits != 4) throw value_error("unpack_codes: bits must be 2 or 4");
    const std::size_t per_word = 32 / static_cast<std::size_t>(bits);
    if (words.size() != (rows * cols + per_word - 1) / per_word)
        throw io_error("unpack_codes: word count does not match shape");
    const std::uint32_t mask = (1u << bits) - 1u;
    std::vector<std::uint8_t> codes(rows * cols, 0);
    std::size_t idx = 0;
    for (std::size_t g0 = 0; g0 < cols; g0 += group_size)
        for (std::size_t j = g0; j < std::min(g0 + group_size, cols); ++j)
            for (std::size_t r = 0; r < rows; ++r) {
                codes[r * cols + j] = static_cast<std::uint8_t>(
                    (words[idx / per_word] >> ((idx % per_word) * bits)) & mask);
                ++idx;
            }
    return codes;
}

// ---------------------------------------------------------------------------
// byte-level helpers

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64le(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_u64le(out, bits);
}

inline void put_f32le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    put_u32le(out, bits);
}

class byte_reader {
public:
    byte_reader(const std::string& bytes, std::size_t pos = 0) : bytes_(bytes), pos_(pos) {}

    std::uint32_t u32le() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64le() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64le() {
        std::uint64_t bits = u64le();
        double d;
        std::memcpy(&d, &bits, sizeof(d));
        return d;
    }

    float f32le() {
        std::uint32_t bits = u32le();
        float f;
        std::memcpy(&f, &bits, sizeof(f));
        return f;
    }

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t k) const {
        if (pos_ + k > bytes_.size()) throw io_error("unexpected end of payload");
    }

    const std::string& bytes_;
    std::size_t pos_;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string checksum_hex(const std::string& bytes, std::size_t offset, std::size_t len) {
    return hex64(fnv1a64(bytes.data() + offset, len));
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw io_error("read failed: " + path);
    return bytes;
}

inline constexpr char file_magic[4] = {'A', 'P', 'T', 'Q'};
inline constexpr int format_version = 1;

inline std::string assemble_container(const nlohmann::json& header, const std::string& payload) {
    std::string out(file_magic, 4);
    const std::string header_text = header.dump();
    put_u32le(out, static_cast<std::uint32_t>(header_text.size()));
    out += header_text;
    out += payload;
    return out;
}

struct container {
    nlohmann::json header;
    std::string payload;
};

/// Splits a container file and validates magic + version + kind.
inline container parse_container(const std::string& path, const char* expect_kind) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), file_magic, 4) != 0)
        throw io_error(path + ": not a recognized container (bad magic)");
    byte_reader r(bytes, 4);
    const std::uint32_t header_len = r.u32le();
    if (8 + static_cast<std::size_t>(header_len) > bytes.size())
        throw io_error(path + ": truncated header");
    container c;
    try {
        c.header = nlohmann::json::parse(bytes.substr(8, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw io_error(path + ": header parse error: " + e.what());
    }
    if (!c.header.contains("format_version") || !c.header["format_version"].is_number_integer())
        throw io_error(path + ": missing format_version");
    if (c.header["format_version"].get<int>() != format_version)
        throw io_error(path + ": unsupported format_version " +
                       c.header["format_version"].dump());
    if (!c.header.contains("kind") || c.header["kind"] != expect_kind)
        throw io_error(path + ": expected kind '" + expect_kind + "'");
    c.payload = bytes.substr(8 + header_len);
    return c;
}

inline void check_region(const std::string& payload, std::size_t offset, std::size_t len,
                         const std::string& checksum, const std::string& name) {
    if (offset + len > payload.size())
        throw io_error("truncated payload at " + name);
    if (checksum_hex(payload, offset, len) != checksum)
        throw io_error("checksum mismatch at " + name);
}

inline matrix read_matrix(const std::string& payload, std::size_t offset, std::size_t rows,
                          std::size_t cols) {
    byte_reader r(payload, offset);
    matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = r.f64le();
    return m;
}

inline void append_matrix(std::string& payload, const matrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i) put_f64le(payload, m.data()[i]);
}

inline nlohmann::json shape_json(const model_shape& s) {
    return {{"n", s.n},
            {"d_model", s.d_model},
            {"heads", s.heads},
            {"d_ff", s.d_ff},
            {"blocks", s.blocks}};
}

inline model_shape shape_from_json(const nlohmann::json& j) {
    model_shape s;
    try {
        s.n = j.at("n").get<std::size_t>();
        s.d_model = j.at("d_model").get<std::size_t>();
        s.heads = j.at("heads").get<std::size_t>();
        s.d_ff = j.at("d_ff").get<std::size_t>();
        s.blocks = j.at("blocks").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("bad shape header: ") + e.what());
    }
    s.validate();
    return s;
}

} // namespace detail

// ---------------------------------------------------------------------------
// model files

inline void save_model(const toy_model& model, const std::string& path) {
    model.validate();
    std::string payload;
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        for (weight_family role : {weight_family::wq, weight_family::wk, weight_family::wv,
                                   weight_family::wo, weight_family::ffn1, weight_family::ffn2}) {
            const matrix& m = model.tensor(b, role);
            const std::size_t offset = payload.size();
            detail::append_matrix(payload, m);
            tensors.push_back({{"name", layer_name(b, role)},
                               {"role", family_name(role)},
                               {"rows", m.rows()},
                               {"cols", m.cols()},
                               {"offset", offset},
                               {"checksum",
                                detail::checksum_hex(payload, offset, payload.size() - offset)}});
        }
    }
    nlohmann::json header = {{"kind", "model"},
                             {"format_version", detail::format_version},
                             {"shape", detail::shape_json(model.shape)},
                             {"tensors", tensors}};
    detail::write_file(path, detail::assemble_container(header, payload));
}

inline toy_model load_model(const std::string& path) {
    detail::container c = detail::parse_container(path, "model");
    toy_model model;
    model.shape = detail::shape_from_json(c.header.at("shape"));
    model.blocks.resize(model.shape.blocks);
    for (transformer_block& b : model.blocks) b.attn.heads = model.shape.heads;

    if (!c.header.contains("tensors") || !c.header["tensors"].is_array())
        throw io_error(path + ": missing tensor table");
    std::size_t seen = 0;
    for (const nlohmann::json& t : c.header["tensors"]) {
        std::string name, role_str, checksum;
        std::size_t rows, cols, offset;
        try {
            name = t.at("name").get<std::string>();
            role_str = t.at("role").get<std::string>();
            rows = t.at("rows").get<std::size_t>();
            cols = t.at("cols").get<std::size_t>();
            offset = t.at("offset").get<std::size_t>();
            checksum = t.at("checksum").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw io_error(path + ": bad tensor entry: " + e.what());
        }
        const weight_family role = family_from_name(role_str);
        std::size_t block = model.shape.blocks; // invalid until parsed
        if (name.rfind("block", 0) == 0) {
            const std::size_t dot = name.find('.');
            if (dot != std::string::npos) block = std::stoul(name.substr(5, dot - 5));
        }
        if (block >= model.shape.blocks)
            throw io_error(path + ": tensor name '" + name + "' does not address a block");
        detail::check_region(c.payload, offset, rows * cols * 8, checksum, name);

        const std::size_t want_rows =
            role == weight_family::ffn2 ? model.shape.d_ff : model.shape.d_model;
        const std::size_t want_cols =
            role == weight_family::ffn1 ? model.shape.d_ff : model.shape.d_model;
        if (rows != want_rows || cols != want_cols)
            throw shape_error(path + ": tensor '" + name + "' has shape " + std::to_string(rows) +
                              "x" + std::to_string(cols) + ", manifest implies " +
                              std::to_string(want_rows) + "x" + std::to_string(want_cols));
        model.tensor(block, role) = detail::read_matrix(c.payload, offset, rows, cols);
        ++seen;
    }
    if (seen != model.shape.blocks * 6)
        throw io_error(path + ": tensor table incomplete (" + std::to_string(seen) + " of " +
                       std::to_string(model.shape.blocks * 6) + ")");
    model.validate();
    return model;
}

// ---------------------------------------------------------------------------
// calibration files

inline void save_calibration(const calibration_set& calib, const std::string& path) {
    std::string payload;
    nlohmann::json batches = nlohmann::json::array();
    for (const calibration_batch& b : calib.batches) {
        if (b.x.rows() != calib.n || b.x.cols() != calib.d_model)
            throw shape_error("save_calibration: batch '" + b.id + "' shape mismatch");
        const std::size_t offset = payload.size();
        detail::append_matrix(payload, b.x);
        batches.push_back({{"id", b.id},
                           {"offset", offset},
                           {"checksum",
                            detail::checksum_hex(payload, offset, payload.size() - offset)}});
    }
    nlohmann::json header = {{"kind", "calib"},
                             {"format_version", detail::format_version},
                             {"n", calib.n},
                             {"d_model", calib.d_model},
                             {"segments", calib.batches.size()},
                             {"source", calib.source}};
    header["batches"] = batches;
    detail::write_file(path, detail::assemble_container(header, payload));
}

inline calibration_set load_calibration(const std::string& path) {
    detail::container c = detail::parse_container(path, "calib");
    calibration_set calib;
    try {
        calib.n = c.header.at("n").get<std::size_t>();
        calib.d_model = c.header.at("d_model").get<std::size_t>();
        calib.source = c.header.at("source").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(path + ": bad calibration header: " + e.what());
    }
    for (const nlohmann::json& b : c.header.at("batches")) {
        std::string id = b.at("id").get<std::string>();
        const std::size_t offset = b.at("offset").get<std::size_t>();
        detail::check_region(c.payload, offset, calib.n * calib.d_model * 8,
                             b.at("checksum").get<std::string>(), id);
        calib.batches.push_back(
            {detail::read_matrix(c.payload, offset, calib.n, calib.d_model), std::move(id)});
    }
    if (calib.batches.empty()) throw io_error(path + ": calibration set has no segments");
    return calib;
}

// ---------------------------------------------------------------------------
// packed files

inline void save_packed(const precision_plan& plan, const std::vector<quantized_layer>& layers,
                        const model_shape& shape, const std::string& path) {
    if (layers.empty()) throw value_error("save_packed: no layers");
    const std::size_t group_size = layers.front().group_size;

    std::vector<const quantized_layer*> ordered;
    for (const quantized_layer& l : layers) ordered.push_back(&l);
    std::sort(ordered.begin(), ordered.end(),
              [](const quantized_layer* a, const quantized_layer* b) {
                  return a->layer_id < b->layer_id;
              });

    std::map<std::string, bool> covered;
    for (const auto& [layer_id, bits] : plan.assignments) covered[layer_id] = false;

    std::string payload;
    nlohmann::json layer_table = nlohmann::json::array();
    for (const quantized_layer* l : ordered) {
        const int planned_bits = plan.bits_for(l->layer_id); // throws on unplanned layer
        if (planned_bits != l->bits)
            throw value_error("save_packed: layer " + l->layer_id + " packed at " +
                              std::to_string(l->bits) + " bits but planned for " +
                              std::to_string(planned_bits));
        covered[l->layer_id] = true;
        if (l->group_size != group_size)
            throw value_error("save_packed: inconsistent group_size across layers");

        const std::size_t groups_offset = payload.size();
        for (const group_quant_params& g : l->groups) {
            detail::put_f32le(payload, static_cast<float>(g.scale));
            payload.push_back(static_cast<char>(static_cast<std::uint8_t>(g.zero_point)));
        }
        const std::size_t codes_offset = payload.size();
        const std::vector<std::uint32_t> words =
            pack_codes(l->codes, l->rows, l->cols, l->bits, l->group_size);
        for (std::uint32_t wrd : words) detail::put_u32le(payload, wrd);

        layer_table.push_back(
            {{"layer_id", l->layer_id},
             {"bits", l->bits},
             {"rows", l->rows},
             {"cols", l->cols},
             {"groups_offset", groups_offset},
             {"groups_count", l->groups.size()},
             {"codes_offset", codes_offset},
             {"codes_words", words.size()},
             {"recon_proxy", l->recon_error},
             {"checksum",
              detail::checksum_hex(payload, groups_offset, payload.size() - groups_offset)}});
    }
    for (const auto& [layer_id, was_packed] : covered)
        if (!was_packed) throw value_error("save_packed: plan covers missing layer " + layer_id);

    nlohmann::json header = {{"kind", "packed"},
                             {"format_version", detail::format_version},
                             {"shape", detail::shape_json(shape)},
                             {"group_size", group_size},
                             {"ratio_r", plan.ratio_r},
                             {"achieved_avg_bits", plan.achieved_avg_bits},
                             {"layers", layer_table}};
    detail::write_file(path, detail::assemble_container(header, payload));
}

inline packed_model load_packed(const std::string& path) {
    detail::container c = detail::parse_container(path, "packed");
    packed_model pm;
    pm.format_version = c.header["format_version"].get<int>();
    pm.shape = detail::shape_from_json(c.header.at("shape"));
    try {
        pm.group_size = c.header.at("group_size").get<std::size_t>();
        pm.ratio_r = c.header.at("ratio_r").get<double>();
        pm.achieved_avg_bits = c.header.at("achieved_avg_bits").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(path + ": bad packed header: " + e.what());
    }

    for (const nlohmann::json& t : c.header.at("layers")) {
        quantized_layer l;
        std::size_t groups_offset, groups_count, codes_offset, codes_words;
        std::string checksum;
        try {
            l.layer_id = t.at("layer_id").get<std::string>();
            l.bits = t.at("bits").get<int>();
            l.rows = t.at("rows").get<std::size_t>();
            l.cols = t.at("cols").get<std::size_t>();
            l.recon_error = t.at("recon_proxy").get<double>();
            groups_offset = t.at("groups_offset").get<std::size_t>();
            groups_count = t.at("groups_count").get<std::size_t>();
            codes_offset = t.at("codes_offset").get<std::size_t>();
            codes_words = t.at("codes_words").get<std::size_t>();
            checksum = t.at("checksum").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw io_error(path + ": bad layer entry: " + e.what());
        }
        if (l.bits != 2 && l.bits != 4)
            throw io_error(path + ": layer " + l.layer_id + " has unsupported bit width");
        l.group_size = pm.group_size;
        if (groups_count != (l.cols + pm.group_size - 1) / pm.group_size)
            throw io_error(path + ": layer " + l.layer_id + " group count mismatch");

        const std::size_t region_len = codes_offset + codes_words * 4 - groups_offset;
        detail::check_region(c.payload, groups_offset, region_len, checksum, l.layer_id);

        detail::byte_reader r(c.payload, groups_offset);
        const int maxq = (1 << l.bits) - 1;
        for (std::size_t g = 0; g < groups_count; ++g) {
            group_quant_params p;
            p.scale = static_cast<double>(r.f32le());
            p.zero_point = static_cast<int>(r.u8());
            p.group_index = g;
            if (!(p.scale > 0.0) || p.zero_point > maxq)
                throw io_error(path + ": layer " + l.layer_id + " has corrupt group params");
            l.groups.push_back(p);
        }
        detail::byte_reader cr(c.payload, codes_offset);
        std::vector<std::uint32_t> words(codes_words);
        for (std::uint32_t& wrd : words) wrd = cr.u32le();
        l.codes = unpack_codes(words, l.rows, l.cols, l.bits, l.group_size);
        for (std::uint8_t code : l.codes)
            if (code > maxq) throw io_error(path + ": layer " + l.layer_id + " has out-of-range code");
        pm.layers.push_back(std::move(l));
    }
    if (pm.layers.empty()) throw io_error(path + ": packed file has no layers");
    return pm;
}

// ---------------------------------------------------------------------------
// synthetic generation

/// Deterministic model + calibration pair: every tensor draws from its own
/// named stream of the master seed, weights scaled by 1/sqrt(fan_in) so
/// activations stay O(1) through the stack.
inline std::pair<toy_model, calibration_set> generate_synthetic(std::uint64_t seed,
                                                                const model_shape& shape,
                                                                std::size_t segments) {
    shape.validate();
    if (segments < 1) throw value_error("generate_synthetic: need at least one segment");

    toy_model model;
    model.shape = shape;
    for (std::size_t b = 0; b < shape.blocks; ++b) {
        transformer_block block;
        block.attn.heads = shape.heads;
        for (weight_family role : {weight_family::wq, weight_family::wk, weight_family::wv,
                                   weight_family::wo, weight_family::ffn1, weight_family::ffn2}) {
            const std::size_t rows = role == weight_family::ffn2 ? shape.d_ff : shape.d_model;
            const std::size_t cols = role == weight_family::ffn1 ? shape.d_ff : shape.d_model;
            rng r = rng::stream(seed, "model/" + layer_name(b, role));
            matrix m = random_gaussian(rows, cols, r, 1.0 / std::sqrt(static_cast<double>(rows)));
            switch (role) {
                case weight_family::wq: block.attn.wq = std::move(m); break;
                case weight_family::wk: block.attn.wk = std::move(m); break;
                case weight_family::wv: block.attn.wv = std::move(m); break;
                case weight_family::wo: block.attn.wo = std::move(m); break;
                case weight_family::ffn1: block.ffn.w1 = std::move(m); break;
                case weight_family::ffn2: block.ffn.w2 = std::move(m); break;
            }
        }
        model.blocks.push_back(std::move(block));
    }
    model.validate();

    calibration_set calib;
    calib.source = "synthetic(" + std::to_string(seed) + ")";
    calib.n = shape.n;
    calib.d_model = shape.d_model;
    for (std::size_t s = 0; s < segments; ++s) {
        char id[32];
        std::snprintf(id, sizeof(id), "seg%03zu", s);
        rng r = rng::stream(seed, std::string("calib/") + id);
        calib.batches.push_back({random_gaussian(shape.n, shape.d_model, r), id});
    }
    return {std::move(model), std::move(calib)};
}

} // namespace aptq
