#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "ropekv/allocate.hpp"
#include "ropekv/pipeline.hpp"
#include "ropekv/verify.hpp"

using namespace ropekv;

namespace {

struct Globals {
    std::uint64_t seed = 42;
    unsigned threads = 1;
};

struct ShapeFlags {
    std::size_t layers = 2, heads = 2, head_dim = 8, embed_dim = 0;
    double base = 10000.0;

    void add(CLI::App* app) {
        app->add_option("--layers", layers, "layer count");
        app->add_option("--heads", heads, "heads per layer");
        app->add_option("--head-dim", head_dim, "head dimension");
        app->add_option("--embed-dim", embed_dim, "embedding dimension (default heads * head-dim)");
        app->add_option("--base", base, "RoPE base");
    }
    ModelConfig config() const {
        ModelConfig c{layers, heads, head_dim, embed_dim ? embed_dim : heads * head_dim, base};
        c.validate();
        return c;
    }
};

void emit(const ordered_json& j) { std::cout << j.dump() << "\n"; }

Model load_model(const std::string& path) { return decode_model(read_file(path)); }

CalibrationBatch load_or_gen_calib(const std::string& path, const Globals& g, std::size_t d, std::size_t n,
                                   std::size_t len) {
    if (!path.empty()) return decode_calibration(read_file(path));
    return gen_calibration(g.seed, d, n, len);
}

ordered_json search_json(const SearchResult& res, std::size_t r, const ModelConfig& cfg) {
    ordered_json j;
    j["kind"] = "search";
    j["method"] = to_string(res.selection.method);
    j["r"] = r;
    j["forward_passes"] = res.stats.forward_passes;
    j["expected_forward_passes"] =
        res.selection.method == SelectionMethod::ropelite ? greedy_forward_passes(r, cfg.chunk_count()) : 0;
    j["candidate_evaluations"] = res.stats.candidate_evaluations;
    double total = 0.0;
    for (const auto& heads : res.distance)
        for (double d : heads) total += d;
    j["distance"] = total;
    j["selection"] = selection_to_json(res.selection);
    return j;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Elite-chunk RoPE selection and low-rank KV cache compression"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "seed for every generator")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads (never changes output)")->capture_default_str();

    // gen-model
    ShapeFlags gm_shape;
    std::string gm_out;
    auto* gen_model_cmd = app.add_subcommand("gen-model", "write a seeded Gaussian model file");
    gm_shape.add(gen_model_cmd);
    gen_model_cmd->add_option("--out", gm_out, "model file")->required();

    // gen-calib
    std::string gc_model, gc_out;
    std::size_t gc_embed = 0, gc_seqs = 4, gc_len = 16;
    auto* gen_calib_cmd = app.add_subcommand("gen-calib", "write a seeded calibration batch");
    gen_calib_cmd->add_option("--model", gc_model, "take the embedding dim from this model");
    gen_calib_cmd->add_option("--embed-dim", gc_embed, "embedding dimension");
    gen_calib_cmd->add_option("--sequences", gc_seqs)->capture_default_str();
    gen_calib_cmd->add_option("--length", gc_len)->capture_default_str();
    gen_calib_cmd->add_option("--out", gc_out, "calibration file")->required();

    // search
    std::string s_model, s_calib, s_out, s_method = "ropelite", s_score = "pre";
    std::size_t s_r = 1, s_seqs = 4, s_len = 16;
    auto* search_cmd = app.add_subcommand("search", "select elite chunks per head");
    search_cmd->add_option("--model", s_model)->required();
    search_cmd->add_option("--calib", s_calib, "calibration file (default: generated from --seed)");
    search_cmd->add_option("--sequences", s_seqs)->capture_default_str();
    search_cmd->add_option("--length", s_len)->capture_default_str();
    search_cmd->add_option("--method", s_method)
        ->check(CLI::IsMember({"ropelite", "uniform", "contribution", "exhaustive"}))
        ->capture_default_str();
    search_cmd->add_option("--r", s_r, "elite chunks per head")->required();
    search_cmd->add_option("--score", s_score)->check(CLI::IsMember({"pre", "post"}))->capture_default_str();
    search_cmd->add_option("--out", s_out, "elite file");

    // decompose
    std::string d_model, d_elite, d_out, d_mode = "jlrd";
    std::size_t d_rank = 0, d_rank_k = 0, d_rank_v = 0, d_budget = 0;
    auto* decompose_cmd = app.add_subcommand("decompose", "factorize non-elite keys and values");
    decompose_cmd->add_option("--model", d_model)->required();
    decompose_cmd->add_option("--elite", d_elite, "elite file")->required();
    decompose_cmd->add_option("--mode", d_mode)->check(CLI::IsMember({"jlrd", "slrd"}))->capture_default_str();
    decompose_cmd->add_option("--rank", d_rank, "d_ckv for jlrd");
    decompose_cmd->add_option("--rank-k", d_rank_k, "d_ck for slrd");
    decompose_cmd->add_option("--rank-v", d_rank_v, "d_cv for slrd");
    decompose_cmd->add_option("--budget", d_budget, "slrd: per-token cache budget split greedily");
    decompose_cmd->add_option("--out", d_out, "factor file")->required();

    // allocate
    std::string a_model, a_calib, a_proxy = "frobenius";
    ShapeFlags a_shape;
    AllocationRequest a_req;
    auto* allocate_cmd = app.add_subcommand("allocate", "enumerate (r, d_ckv) configurations for a cache target");
    allocate_cmd->add_option("--model", a_model, "rank candidates on this model");
    a_shape.add(allocate_cmd);
    allocate_cmd->add_option("--target-ratio", a_req.target_ratio)->required();
    allocate_cmd->add_option("--alignment", a_req.alignment)->capture_default_str();
    allocate_cmd->add_option("--tolerance", a_req.tolerance, "accepted |ratio - target|")->capture_default_str();
    allocate_cmd->add_option("--proxy", a_proxy)->check(CLI::IsMember({"frobenius", "perplexity"}))->capture_default_str();
    allocate_cmd->add_option("--calib", a_calib);

    // simulate
    std::string sim_model, sim_elite, sim_factors;
    std::size_t sim_steps = 16;
    auto* simulate_cmd = app.add_subcommand("simulate", "decode seeded tokens through a cache and report sizes");
    simulate_cmd->add_option("--model", sim_model)->required();
    simulate_cmd->add_option("--elite", sim_elite, "elite file (default: every chunk rotated)");
    simulate_cmd->add_option("--factors", sim_factors, "factor file (compressed cache)");
    simulate_cmd->add_option("--steps", sim_steps)->capture_default_str();

    // verify
    std::string v_model, v_factors, v_suite = "all";
    ShapeFlags v_shape;
    auto* verify_cmd = app.add_subcommand("verify", "run an invariant suite");
    verify_cmd->add_option("--model", v_model, "model file (default: generated from --seed and shape flags)");
    v_shape.add(verify_cmd);
    verify_cmd->add_option("--suite", v_suite)
        ->check(CLI::IsMember({"all", "rope-identity", "eckart-young", "greedy-oracle", "decode-equivalence",
                               "accounting"}))
        ->capture_default_str();
    verify_cmd->add_option("--factors", v_factors, "factor file to audit in the accounting suite");

    // report
    std::string r_manifest, r_out_dir;
    auto* report_cmd = app.add_subcommand("report", "run the whole pipeline from a manifest");
    report_cmd->add_option("--manifest", r_manifest)->required();
    report_cmd->add_option("--out-dir", r_out_dir, "overrides the manifest's out_dir");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen_model_cmd) {
            write_file(gm_out, encode_model(gen_model(g.seed, gm_shape.config())));
        } else if (*gen_calib_cmd) {
            const std::size_t d = gc_model.empty() ? gc_embed : load_model(gc_model).cfg.embed_dim;
            if (d == 0) throw InputError("gen-calib needs --model or --embed-dim");
            write_file(gc_out, encode_calibration(gen_calibration(g.seed, d, gc_seqs, gc_len)));
        } else if (*search_cmd) {
            const Model model = load_model(s_model);
            const auto calib = load_or_gen_calib(s_calib, g, model.cfg.embed_dim, s_seqs, s_len);
            SearchOptions opts;
            opts.score = parse_score_mode(s_score);
            opts.threads = g.threads;
            const auto res = run_selection(parse_selection_method(s_method), model, calib, s_r, opts);
            if (!s_out.empty()) write_file(s_out, encode_selection(res.selection));
            emit(search_json(res, s_r, model.cfg));
        } else if (*decompose_cmd) {
            const Model model = load_model(d_model);
            const auto& cfg = model.cfg;
            const EliteSelection elite = decode_selection(read_file(d_elite));
            elite.validate(cfg);
            const auto mode = parse_lrd_mode(d_mode);
            FactorFile ff{cfg, mode, elite.r, 0, 0, elite, {}};
            std::vector<KeySplit> splits;
            for (std::size_t l = 0; l < cfg.n_layers; ++l)
                splits.push_back(split_key_projection(model.layers[l].wk, elite, l, cfg.head_dim));
            CostReport cost;
            if (mode == LrdMode::jlrd) {
                if (d_rank == 0) throw InputError("jlrd needs --rank");
                ff.rank_k = d_rank;
                for (std::size_t l = 0; l < cfg.n_layers; ++l)
                    ff.layers.push_back(decompose_jlrd(splits[l], model.layers[l].wv, d_rank));
                cost = cost_jlrd(cfg, elite.r, d_rank);
            } else {
                if (d_budget) {
                    if (cfg.n_layers != 1)
                        throw InputError("--budget splits one layer's spectrum; use the pipeline for deeper models");
                    const auto s = allocate_slrd_split(splits[0].wk_rest, model.layers[0].wv, d_budget, elite.r, cfg);
                    d_rank_k = s.d_ck;
                    d_rank_v = s.d_cv;
                }
                if (d_rank_v == 0) throw InputError("slrd needs --rank-k/--rank-v or --budget");
                ff.rank_k = d_rank_k;
                ff.rank_v = d_rank_v;
                for (std::size_t l = 0; l < cfg.n_layers; ++l)
                    ff.layers.push_back(decompose_slrd(splits[l], model.layers[l].wv, d_rank_k, d_rank_v));
                cost = cost_slrd(cfg, elite.r, d_rank_k, d_rank_v);
            }
            double err = 0.0;
            for (std::size_t l = 0; l < cfg.n_layers; ++l)
                err += reconstruction_error_sq(splits[l], model.layers[l].wv, ff.layers[l]);
            write_file(d_out, encode_factors(ff));
            ordered_json j;
            j["kind"] = "cost";
            j["mode"] = d_mode;
            j["r"] = elite.r;
            j["rank_k"] = ff.rank_k;
            j["rank_v"] = mode == LrdMode::jlrd ? ff.rank_k : ff.rank_v;
            j.update(cost_to_json(cost));
            j["reconstruction_error"] = std::sqrt(err);
            emit(j);
        } else if (*allocate_cmd) {
            std::vector<AllocationCandidate> cands;
            if (a_model.empty()) {
                cands = enumerate_configs(a_shape.config(), a_req);
            } else {
                const Model model = load_model(a_model);
                const auto calib = load_or_gen_calib(a_calib, g, model.cfg.embed_dim, 4, 16);
                AllocationOptions opts;
                opts.proxy = parse_allocation_proxy(a_proxy);
                opts.search.threads = g.threads;
                opts.seed = g.seed;
                cands = allocate_configs(model, calib, a_req, opts);
            }
            for (const auto& c : cands) {
                ordered_json j;
                j["kind"] = "allocation";
                j["r"] = c.r;
                j["d_ckv"] = c.d_ckv;
                j["decomposed"] = c.decomposed;
                j.update(cost_to_json(c.cost));
                if (!a_model.empty()) {
                    j["proxy"] = a_proxy;
                    j["proxy_value"] = c.proxy;
                }
                emit(j);
            }
        } else if (*simulate_cmd) {
            const Model model = load_model(sim_model);
            const auto& cfg = model.cfg;
            Rng rng(g.seed);
            const Matrix tokens =
                gaussian_matrix(rng, sim_steps, cfg.embed_dim, 1.0 / std::sqrt(double(cfg.embed_dim)));
            const EliteSelection elite =
                sim_elite.empty()
                    ? EliteSelection::uniform_sets(cfg, SelectionMethod::ropelite, ChunkSet::all(cfg.chunk_count()))
                    : decode_selection(read_file(sim_elite));
            elite.validate(cfg);
            const auto lite = forward_ropelite(model, elite, tokens);
            KVCacheStore cache = KVCacheStore::make_ropelite(cfg, elite);
            std::vector<DecodeOutput> outs;
            if (!sim_factors.empty()) {
                const FactorFile ff = decode_factors(read_file(sim_factors));
                if (!(ff.elite == EliteSelection{ff.elite.method, elite.r, elite.layers}))
                    throw SelectionError("factor file elite chunks differ from the elite file");
                const auto cm = compress(model, elite, ff.layers);
                cache = make_compressed_cache(cm);
                for (std::size_t t = 0; t < tokens.rows(); ++t)
                    outs.push_back(decode_step_compressed(cm, cache, tokens.row(t), {}));
            } else {
                for (std::size_t t = 0; t < tokens.rows(); ++t) outs.push_back(decode_step(model, cache, tokens.row(t), {}));
            }
            ordered_json j;
            j["kind"] = "cache";
            j["layout"] = to_string(cache.layout());
            j["tokens"] = cache.tokens();
            j["width"] = cache.width();
            j["bytes"] = cache_bytes(cache, cache.tokens());
            j["full_bytes"] = cache_bytes(KVCacheStore::make_full(cfg), cache.tokens());
            j["ratio"] = cache_ratio(cache).str();
            j["max_abs_delta_vs_ropelite"] = max_abs_diff(stack_hidden(outs), stack_hidden(lite));
            emit(j);
        } else if (*verify_cmd) {
            VerifyInputs in;
            in.model = v_model.empty() ? gen_model(g.seed, v_shape.config()) : load_model(v_model);
            in.seed = g.seed;
            in.threads = g.threads;
            if (!v_factors.empty()) in.factor_bytes = read_file(v_factors);
            const auto results = verify(in, v_suite);
            for (const auto& r : results) emit(to_json(r));
            if (!all_pass(results)) {
                std::cerr << "verify: suite '" << v_suite << "' failed\n";
                return exit_code(ErrorKind::numeric);
            }
        } else if (*report_cmd) {
            ordered_json mj;
            try {
                mj = ordered_json::parse(read_file(r_manifest));
            } catch (const nlohmann::json::parse_error& e) {
                throw InputError(std::string("manifest is not JSON: ") + e.what());
            }
            RunManifest man = manifest_from_json(mj);
            // Relative paths are taken relative to the manifest.
            const auto base = std::filesystem::path(r_manifest).parent_path();
            auto resolve = [&](std::string& p) {
                if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).string();
            };
            resolve(man.model_path);
            resolve(man.calib_path);
            if (!r_out_dir.empty()) man.out_dir = r_out_dir;
            else resolve(man.out_dir);
            if (app.get_option("--threads")->count()) man.threads = g.threads;
            std::cout << run_pipeline(man).report_jsonl;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    }
    return 0;
}
