#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ropekv/chunk_select.hpp"
#include "ropekv/error.hpp"
#include "ropekv/lowrank.hpp"
#include "ropekv/model.hpp"
#include "ropekv/selection.hpp"

namespace ropekv {

using ordered_json = nlohmann::ordered_json;

inline constexpr std::string_view model_magic = "RKV1";
inline constexpr std::string_view factor_magic = "RKF1";
inline constexpr std::string_view calib_magic = "RKC1";
inline constexpr std::uint16_t format_version = 1;

// Little-endian byte sink.
class ByteWriter {
public:
    void put_bytes(std::string_view s) { buf_.append(s); }
    void put_u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void put_u16(std::uint16_t v) { put_le(v, 2); }
    void put_u32(std::uint32_t v) { put_le(v, 4); }
    void put_f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }

    void put_count(std::size_t v) {
        if (v > 0xffffffffu) throw IoError("count does not fit in u32");
        put_u32(static_cast<std::uint32_t>(v));
    }

    void put_values(const Matrix& m) {
        for (double v : m.values()) put_f64(v);
    }

    const std::string& bytes() const noexcept { return buf_; }

private:
    void put_le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::string_view get_bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t get_u8() { return static_cast<std::uint8_t>(get_le(1)); }
    std::uint16_t get_u16() { return static_cast<std::uint16_t>(get_le(2)); }
    std::uint32_t get_u32() { return static_cast<std::uint32_t>(get_le(4)); }
    double get_f64() { return std::bit_cast<double>(get_le(8)); }

    Matrix get_matrix(std::size_t rows, std::size_t cols) {
        if (cols != 0 && rows > (data_.size() - pos_) / 8 / cols) throw IoError("unexpected end of file");
        std::vector<double> v(rows * cols);
        for (double& x : v) x = get_f64();
        try {
            return Matrix(rows, cols, std::move(v));
        } catch (const Error& e) {
            throw IoError(std::string("malformed matrix: ") + e.what());
        }
    }

    void expect_magic(std::string_view magic) {
        if (get_bytes(magic.size()) != magic) throw IoError("bad magic, expected " + std::string(magic));
        const auto version = get_u16();
        if (version != format_version) throw IoError("unsupported format version " + std::to_string(version));
    }

    void expect_end() const {
        if (pos_ != data_.size()) throw IoError("trailing bytes after payload");
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw IoError("unexpected end of file");
    }
    std::uint64_t get_le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

// ---- model file: "RKV1" u16 version, u32 l n_h d_h d, f64 base, per layer wq wk wv wo ----

inline std::string encode_model(const Model& m) {
    m.validate();
    ByteWriter w;
    w.put_bytes(model_magic);
    w.put_u16(format_version);
    w.put_count(m.cfg.n_layers);
    w.put_count(m.cfg.n_heads);
    w.put_count(m.cfg.head_dim);
    w.put_count(m.cfg.embed_dim);
    w.put_f64(m.cfg.rope_base);
    for (const auto& l : m.layers) {
        w.put_values(l.wq);
        w.put_values(l.wk);
        w.put_values(l.wv);
        w.put_values(l.wo);
    }
    return w.bytes();
}

inline Model decode_model(std::string_view bytes) {
    ByteReader r(bytes);
    r.expect_magic(model_magic);
    Model m;
    m.cfg.n_layers = r.get_u32();
    m.cfg.n_heads = r.get_u32();
    m.cfg.head_dim = r.get_u32();
    m.cfg.embed_dim = r.get_u32();
    m.cfg.rope_base = r.get_f64();
    try {
        m.cfg.validate();
    } catch (const Error& e) {
        throw IoError(std::string("model header: ") + e.what());
    }
    const std::size_t d = m.cfg.embed_dim, p = m.cfg.proj_dim();
    for (std::size_t l = 0; l < m.cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = r.get_matrix(d, p);
        lw.wk = r.get_matrix(d, p);
        lw.wv = r.get_matrix(d, p);
        lw.wo = r.get_matrix(p, d);
        m.layers.push_back(std::move(lw));
    }
    r.expect_end();
    return m;
}

// ---- calibration file: "RKC1" u16 version, u32 n_seq, u32 d, per sequence u32 len + len*d f64 ----

inline std::string encode_calibration(const CalibrationBatch& c) {
    ByteWriter w;
    w.put_bytes(calib_magic);
    w.put_u16(format_version);
    w.put_count(c.sequences.size());
    w.put_count(c.sequences.empty() ? 0 : c.sequences[0].cols());
    for (const auto& s : c.sequences) {
        w.put_count(s.rows());
        w.put_values(s);
    }
    return w.bytes();
}

inline CalibrationBatch decode_calibration(std::string_view bytes) {
    ByteReader r(bytes);
    r.expect_magic(calib_magic);
    const std::size_t n = r.get_u32();
    const std::size_t d = r.get_u32();
    CalibrationBatch c;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = r.get_u32();
        c.sequences.push_back(r.get_matrix(len, d));
    }
    r.expect_end();
    return c;
}

// ---- elite selection: {"method": ..., "r": ..., "layers": [[[chunk, ...] per head] per layer]} ----

inline ordered_json selection_to_json(const EliteSelection& s) {
    ordered_json layers = ordered_json::array();
    for (const auto& heads : s.layers) {
        ordered_json hl = ordered_json::array();
        for (const auto& set : heads) hl.push_back(std::vector<std::size_t>(set.indices().begin(), set.indices().end()));
        layers.push_back(std::move(hl));
    }
    ordered_json j;
    j["method"] = to_string(s.method);
    j["r"] = s.r;
    j["layers"] = std::move(layers);
    return j;
}

inline std::string encode_selection(const EliteSelection& s) { return selection_to_json(s).dump() + "\n"; }

inline EliteSelection decode_selection(std::string_view text) {
    try {
        const auto j = ordered_json::parse(text);
        EliteSelection s;
        s.method = parse_selection_method(j.at("method").get<std::string>());
        s.r = j.at("r").get<std::size_t>();
        for (const auto& hl : j.at("layers")) {
            std::vector<ChunkSet> heads;
            for (const auto& set : hl) heads.emplace_back(set.get<std::vector<std::size_t>>());
            s.layers.push_back(std::move(heads));
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed elite file: ") + e.what());
    }
}

// ---- factor file ----
// "RKF1" u16 version, u8 mode (0 jlrd, 1 slrd), u32 l n_h d_h d r rank_k rank_v,
// per layer: n_h * r u32 elite chunk indices, then matrices as (u32 rows, u32 cols, f64 data):
//   jlrd: A^kv, B^k, B^v     slrd: A^k, B^k, A^v, B^v

struct FactorFile {
    ModelConfig cfg;  // rope_base is not stored
    LrdMode mode = LrdMode::jlrd;
    std::size_t r = 0;
    std::size_t rank_k = 0;  // d_ckv or d_ck
    std::size_t rank_v = 0;  // d_cv (slrd), 0 for jlrd
    EliteSelection elite;
    std::vector<LowRankFactors> layers;
};

inline std::string encode_factors(const FactorFile& f) {
    ByteWriter w;
    w.put_bytes(factor_magic);
    w.put_u16(format_version);
    w.put_u8(static_cast<std::uint8_t>(f.mode));
    for (std::size_t v : {f.cfg.n_layers, f.cfg.n_heads, f.cfg.head_dim, f.cfg.embed_dim, f.r, f.rank_k, f.rank_v})
        w.put_count(v);
    auto put_matrix = [&](const Matrix& m) {
        w.put_count(m.rows());
        w.put_count(m.cols());
        w.put_values(m);
    };
    for (std::size_t l = 0; l < f.layers.size(); ++l) {
        for (const auto& set : f.elite.layers.at(l))
            for (std::size_t c : set.indices()) w.put_count(c);
        const auto& lf = f.layers[l];
        put_matrix(lf.a_key);
        put_matrix(lf.b_key);
        if (f.mode == LrdMode::slrd) put_matrix(lf.a_value);
        put_matrix(lf.b_value);
    }
    return w.bytes();
}

// Structural decode only; shape consistency is left to the accounting checks.
inline FactorFile decode_factors(std::string_view bytes) {
    ByteReader r(bytes);
    r.expect_magic(factor_magic);
    FactorFile f;
    const auto mode = r.get_u8();
    if (mode > 1) throw IoError("unknown factor mode byte " + std::to_string(mode));
    f.mode = static_cast<LrdMode>(mode);
    f.cfg.n_layers = r.get_u32();
    f.cfg.n_heads = r.get_u32();
    f.cfg.head_dim = r.get_u32();
    f.cfg.embed_dim = r.get_u32();
    f.r = r.get_u32();
    f.rank_k = r.get_u32();
    f.rank_v = r.get_u32();
    if (f.cfg.head_dim < 2 || f.cfg.head_dim % 2 || 2 * f.r > f.cfg.head_dim || f.cfg.n_heads == 0)
        throw IoError("factor header has an invalid head layout");
    f.elite = {SelectionMethod::ropelite, f.r, {}};
    auto get_matrix = [&] {
        const std::size_t rows = r.get_u32();
        const std::size_t cols = r.get_u32();
        return r.get_matrix(rows, cols);
    };
    for (std::size_t l = 0; l < f.cfg.n_layers; ++l) {
        std::vector<ChunkSet> heads;
        for (std::size_t h = 0; h < f.cfg.n_heads; ++h) {
            std::vector<std::size_t> idx(f.r);
            for (auto& c : idx) c = r.get_u32();
            try {
                heads.emplace_back(std::move(idx));
            } catch (const Error& e) {
                throw IoError(std::string("factor elite indices: ") + e.what());
            }
        }
        LowRankFactors lf;
        lf.mode = f.mode;
        try {
            lf.layout = key_layout(heads, f.cfg.head_dim);
        } catch (const Error& e) {
            throw IoError(std::string("factor elite indices: ") + e.what());
        }
        lf.a_key = get_matrix();
        lf.b_key = get_matrix();
        if (f.mode == LrdMode::slrd) lf.a_value = get_matrix();
        lf.b_value = get_matrix();
        f.elite.layers.push_back(std::move(heads));
        f.layers.push_back(std::move(lf));
    }
    r.expect_end();
    return f;
}

inline ordered_json cost_to_json(const CostReport& c) {
    ordered_json j;
    j["params_original"] = c.params_original;
    j["params_after"] = c.params_after;
    j["cache_per_token_layer"] = c.cache_per_token_layer;
    j["cache_ratio"] = c.cache_ratio.str();
    j["cache_ratio_value"] = c.cache_ratio.value();
    return j;
}

} // namespace ropekv
