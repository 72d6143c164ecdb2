#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ropekv/error.hpp"
#include "ropekv/linalg.hpp"
#include "ropekv/rope.hpp"

namespace ropekv {

// Shape of an attention-only MHA decoder stack.
struct ModelConfig {
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;
    std::size_t head_dim = 2;
    std::size_t embed_dim = 2;
    double rope_base = 10000.0;

    RopeParams rope() const { return {head_dim, rope_base}; }
    std::size_t chunk_count() const noexcept { return head_dim / 2; }
    // Width of the concatenated per-head projections, d_h * n_h.
    std::size_t proj_dim() const noexcept { return head_dim * n_heads; }

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || head_dim < 1 || embed_dim < 1)
            throw ShapeError("model counts must all be >= 1");
        rope().validate();
        if (embed_dim != head_dim * n_heads)
            throw ShapeError("embed_dim " + std::to_string(embed_dim) + " != head_dim * n_heads = " +
                             std::to_string(head_dim * n_heads));
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    Matrix wq;  // d x (d_h n_h)
    Matrix wk;
    Matrix wv;
    Matrix wo;  // (d_h n_h) x d
};

struct Model {
    ModelConfig cfg;
    std::vector<LayerWeights> layers;

    void validate() const {
        cfg.validate();
        if (layers.size() != cfg.n_layers) throw ShapeError("layer count does not match config");
        const std::size_t d = cfg.embed_dim, p = cfg.proj_dim();
        for (const auto& w : layers) {
            for (const Matrix* m : {&w.wq, &w.wk, &w.wv}) {
                if (m->rows() != d || m->cols() != p) throw ShapeError("projection weight has wrong shape");
            }
            if (w.wo.rows() != p || w.wo.cols() != d) throw ShapeError("output weight has wrong shape");
        }
    }
};

} // namespace ropekv
