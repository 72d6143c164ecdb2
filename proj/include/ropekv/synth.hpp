#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "ropekv/chunk_select.hpp"
#include "ropekv/model.hpp"
#include "ropekv/random.hpp"

namespace ropekv {

inline Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = stddev * rng.normal();
    return Matrix(rows, cols, std::move(v));
}

// Weights drawn from N(0, 1/d) in the order wq, wk, wv, wo per layer.
inline Model gen_model(std::uint64_t seed, const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    const std::size_t d = cfg.embed_dim, p = cfg.proj_dim();
    Model m{cfg, {}};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights w;
        w.wq = gaussian_matrix(rng, d, p, sd);
        w.wk = gaussian_matrix(rng, d, p, sd);
        w.wv = gaussian_matrix(rng, d, p, sd);
        w.wo = gaussian_matrix(rng, p, d, sd);
        m.layers.push_back(std::move(w));
    }
    return m;
}

// Token embeddings drawn from N(0, 1/d).
inline CalibrationBatch gen_calibration(std::uint64_t seed, std::size_t embed_dim, std::size_t n_sequences,
                                        std::size_t length) {
    Rng rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    CalibrationBatch c;
    for (std::size_t s = 0; s < n_sequences; ++s) c.sequences.push_back(gaussian_matrix(rng, length, embed_dim, sd));
    return c;
}

} // namespace ropekv
