#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ropekv/attention.hpp"
#include "ropekv/chunk_select.hpp"
#include "ropekv/error.hpp"
#include "ropekv/io.hpp"
#include "ropekv/lowrank.hpp"
#include "ropekv/synth.hpp"

namespace ropekv {

// Everything that determines a pipeline run. Identical manifests give
// byte-identical artifacts regardless of thread count.
struct RunManifest {
    std::uint64_t seed = 42;
    std::string model_path;
    std::string calib_path;  // empty: synthesize from seed
    std::size_t calib_sequences = 4;
    std::size_t calib_length = 16;
    SelectionMethod method = SelectionMethod::ropelite;
    std::size_t r = 1;
    ScoreMode score = ScoreMode::pre_softmax;
    LrdMode lrd_mode = LrdMode::jlrd;
    // Ranks; when zero they are derived from target_ratio.
    std::size_t d_ckv = 0;
    std::size_t d_ck = 0;
    std::size_t d_cv = 0;
    std::optional<double> target_ratio;
    std::size_t decode_steps = 16;
    bool residual_norm = false;
    std::string out_dir;  // empty: keep artifacts in memory only
    unsigned threads = 1;
};

inline RunManifest manifest_from_json(const ordered_json& j) {
    RunManifest m;
    try {
        m.seed = j.value("seed", m.seed);
        m.model_path = j.at("model").get<std::string>();
        m.calib_path = j.value("calib", std::string{});
        m.calib_sequences = j.value("calib_sequences", m.calib_sequences);
        m.calib_length = j.value("calib_length", m.calib_length);
        m.method = parse_selection_method(j.value("method", std::string("ropelite")));
        m.r = j.at("r").get<std::size_t>();
        m.score = parse_score_mode(j.value("score", std::string("pre")));
        m.lrd_mode = parse_lrd_mode(j.value("lrd_mode", std::string("jlrd")));
        m.d_ckv = j.value("d_ckv", m.d_ckv);
        m.d_ck = j.value("d_ck", m.d_ck);
        m.d_cv = j.value("d_cv", m.d_cv);
        if (j.contains("target_ratio")) m.target_ratio = j.at("target_ratio").get<double>();
        m.decode_steps = j.value("decode_steps", m.decode_steps);
        m.residual_norm = j.value("residual_norm", m.residual_norm);
        m.out_dir = j.value("out_dir", std::string{});
        m.threads = j.value("threads", m.threads);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

inline ordered_json manifest_to_json(const RunManifest& m) {
    ordered_json j;
    j["seed"] = m.seed;
    j["model"] = m.model_path;
    if (!m.calib_path.empty()) j["calib"] = m.calib_path;
    j["calib_sequences"] = m.calib_sequences;
    j["calib_length"] = m.calib_length;
    j["method"] = to_string(m.method);
    j["r"] = m.r;
    j["score"] = to_string(m.score);
    j["lrd_mode"] = to_string(m.lrd_mode);
    j["d_ckv"] = m.d_ckv;
    j["d_ck"] = m.d_ck;
    j["d_cv"] = m.d_cv;
    if (m.target_ratio) j["target_ratio"] = *m.target_ratio;
    j["decode_steps"] = m.decode_steps;
    j["residual_norm"] = m.residual_norm;
    if (!m.out_dir.empty()) j["out_dir"] = m.out_dir;
    return j;
}

class PipelineError : public Error {
public:
    PipelineError(const std::string& stage, const Error& cause)
        : Error(cause.kind(), stage + ": " + cause.what()), stage_(stage) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct EquivalenceReport {
    double full_vs_ropelite = 0.0;
    double ropelite_vs_compressed = 0.0;
    double full_vs_compressed = 0.0;
    // Compressed decode vs. ropelite forward on the reassembled weights A·B.
    double reconstructed_vs_compressed = 0.0;
};

struct PipelineArtifacts {
    std::string elite_json;
    std::string factor_bytes;
    std::string report_jsonl;
    SearchStats search;
    CostReport cost;
    EquivalenceReport equivalence;
    Rational cache_ratio;
};

inline constexpr std::uint64_t decode_seed_offset = 0x9e3779b97f4a7c15ull;

namespace detail {

template <typename Fn>
auto stage(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const PipelineError&) {
        throw;
    } catch (const Error& e) {
        throw PipelineError(name, e);
    }
}

inline double max_abs_delta(const std::vector<DecodeOutput>& a, const std::vector<DecodeOutput>& b) {
    double m = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t i = 0; i < a[t].hidden.size(); ++i) m = std::max(m, std::abs(a[t].hidden[i] - b[t].hidden[i]));
    return m;
}

// Root-sum-square spectrum across layers, used to pick one (d_ck, d_cv) for the whole model.
inline std::vector<double> pooled_spectrum(const std::vector<std::vector<double>>& per_layer) {
    std::vector<double> out(per_layer.empty() ? 0 : per_layer[0].size(), 0.0);
    for (const auto& s : per_layer)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += s[i] * s[i];
    for (double& v : out) v = std::sqrt(v);
    return out;
}

} // namespace detail

// select -> split -> decompose -> simulate decode -> verify equivalence.
inline PipelineArtifacts run_pipeline(const RunManifest& man) {
    const Model model = detail::stage("load", [&] {
        if (man.model_path.empty()) throw InputError("manifest has no model path");
        return decode_model(read_file(man.model_path));
    });
    const auto& cfg = model.cfg;
    const CalibrationBatch calib = detail::stage("load", [&] {
        if (!man.calib_path.empty()) return decode_calibration(read_file(man.calib_path));
        return gen_calibration(man.seed, cfg.embed_dim, man.calib_sequences, man.calib_length);
    });

    SearchOptions sopts;
    sopts.score = man.score;
    sopts.threads = man.threads;
    sopts.forward.residual_norm = man.residual_norm;

    PipelineArtifacts out;
    const SearchResult search =
        detail::stage("select", [&] { return run_selection(man.method, model, calib, man.r, sopts); });
    const EliteSelection& elite = search.selection;
    out.search = search.stats;
    out.elite_json = encode_selection(elite);

    std::vector<KeySplit> splits = detail::stage("split", [&] {
        std::vector<KeySplit> s;
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            s.push_back(split_key_projection(model.layers[l].wk, elite, l, cfg.head_dim));
        return s;
    });

    FactorFile ff{cfg, man.lrd_mode, elite.r, 0, 0, elite, {}};
    detail::stage("decompose", [&] {
        const std::size_t elite_width = 2 * elite.r * cfg.n_heads;
        std::optional<std::size_t> budget;
        if (man.target_ratio) {
            const auto b = std::llround(*man.target_ratio * static_cast<double>(2 * cfg.proj_dim()));
            if (b <= static_cast<long long>(elite_width)) throw BudgetError("target ratio leaves no latent budget");
            budget = static_cast<std::size_t>(b);
        }
        if (man.lrd_mode == LrdMode::jlrd) {
            std::size_t rank = man.d_ckv;
            if (rank == 0) {
                if (!budget) throw InputError("jlrd needs d_ckv or target_ratio");
                rank = *budget - elite_width;
            }
            ff.rank_k = rank;
            for (std::size_t l = 0; l < cfg.n_layers; ++l)
                ff.layers.push_back(decompose_jlrd(splits[l], model.layers[l].wv, rank));
            out.cost = cost_jlrd(cfg, elite.r, rank);
        } else {
            std::size_t ck = man.d_ck, cv = man.d_cv;
            if (ck == 0 && cv == 0) {
                if (!budget) throw InputError("slrd needs d_ck/d_cv or target_ratio");
                std::vector<std::vector<double>> sk, sv;
                for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                    if (splits[l].wk_rest.cols() == 0) throw BudgetError("no non-elite key columns to factorize");
                    sk.push_back(svd(splits[l].wk_rest).sigma);
                    sv.push_back(svd(model.layers[l].wv).sigma);
                }
                const auto split = allocate_slrd_split(detail::pooled_spectrum(sk), detail::pooled_spectrum(sv),
                                                       *budget, elite.r, cfg);
                ck = split.d_ck;
                cv = split.d_cv;
            }
            ff.rank_k = ck;
            ff.rank_v = cv;
            for (std::size_t l = 0; l < cfg.n_layers; ++l)
                ff.layers.push_back(decompose_slrd(splits[l], model.layers[l].wv, ck, cv));
            out.cost = cost_slrd(cfg, elite.r, ck, cv);
        }
        return 0;
    });
    out.factor_bytes = encode_factors(ff);

    double recon_error_sq = 0.0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
        recon_error_sq += reconstruction_error_sq(splits[l], model.layers[l].wv, ff.layers[l]);

    const auto cm = detail::stage("simulate", [&] { return compress(model, elite, ff.layers); });
    Rng rng(man.seed ^ decode_seed_offset);
    const Matrix tokens = gaussian_matrix(rng, man.decode_steps, cfg.embed_dim, 1.0 / std::sqrt(double(cfg.embed_dim)));
    const ForwardOptions fwd{man.residual_norm, false};
    auto cache = make_compressed_cache(cm);
    std::vector<DecodeOutput> compressed;
    detail::stage("simulate", [&] {
        for (std::size_t t = 0; t < tokens.rows(); ++t)
            compressed.push_back(decode_step_compressed(cm, cache, tokens.row(t), fwd));
        return 0;
    });
    out.cache_ratio = cache_ratio(cache);

    detail::stage("verify", [&] {
        const auto full = forward_full(model, tokens, fwd);
        const auto lite = forward_ropelite(model, elite, tokens, fwd);
        const auto rebuilt = forward_ropelite(reassemble(model, ff.layers), elite, tokens, fwd);
        out.equivalence = {detail::max_abs_delta(full, lite), detail::max_abs_delta(lite, compressed),
                           detail::max_abs_delta(full, compressed), detail::max_abs_delta(rebuilt, compressed)};
        const Rational expected(out.cost.cache_per_token_layer, static_cast<std::int64_t>(2 * cfg.proj_dim()));
        if (!(expected == out.cache_ratio))
            throw NumericError("cache width disagrees with the cost formula", out.cache_ratio.value() - expected.value());
        return 0;
    });

    std::string report;
    {
        ordered_json j;
        j["kind"] = "selection";
        j["method"] = to_string(elite.method);
        j["r"] = elite.r;
        j["score"] = to_string(man.score);
        j["forward_passes"] = out.search.forward_passes;
        j["candidate_evaluations"] = out.search.candidate_evaluations;
        report += j.dump() + "\n";
    }
    {
        ordered_json j;
        j["kind"] = "cost";
        j["mode"] = to_string(man.lrd_mode);
        j["r"] = elite.r;
        if (man.lrd_mode == LrdMode::jlrd) {
            j["d_ckv"] = ff.rank_k;
        } else {
            j["d_ck"] = ff.rank_k;
            j["d_cv"] = ff.rank_v;
        }
        j.update(cost_to_json(out.cost));
        j["reconstruction_error"] = std::sqrt(recon_error_sq);
        report += j.dump() + "\n";
    }
    {
        ordered_json j;
        j["kind"] = "cache";
        j["layout"] = "compressed";
        j["tokens"] = cache.tokens();
        j["width"] = cache.width();
        j["bytes"] = cache_bytes(cache, cache.tokens());
        j["full_bytes"] = cache_bytes(KVCacheStore::make_full(cfg), cache.tokens());
        j["ratio"] = out.cache_ratio.str();
        report += j.dump() + "\n";
    }
    {
        ordered_json j;
        j["kind"] = "equivalence";
        j["full_vs_ropelite"] = out.equivalence.full_vs_ropelite;
        j["ropelite_vs_compressed"] = out.equivalence.ropelite_vs_compressed;
        j["full_vs_compressed"] = out.equivalence.full_vs_compressed;
        j["reconstructed_vs_compressed"] = out.equivalence.reconstructed_vs_compressed;
        report += j.dump() + "\n";
    }
    out.report_jsonl = std::move(report);

    if (!man.out_dir.empty()) {
        detail::stage("write", [&] {
            std::error_code ec;
            std::filesystem::create_directories(man.out_dir, ec);
            if (ec) throw IoError("cannot create " + man.out_dir + ": " + ec.message());
            const std::filesystem::path dir(man.out_dir);
            write_file(dir / "elite.json", out.elite_json);
            write_file(dir / "factors.rkf", out.factor_bytes);
            write_file(dir / "report.jsonl", out.report_jsonl);
            return 0;
        });
    }
    return out;
}

} // namespace ropekv
