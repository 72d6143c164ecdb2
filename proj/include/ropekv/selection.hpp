#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ropekv/error.hpp"
#include "ropekv/model.hpp"
#include "ropekv/rope.hpp"

namespace ropekv {

enum class SelectionMethod { ropelite, uniform, contribution, exhaustive };

inline std::string to_string(SelectionMethod m) {
    switch (m) {
    case SelectionMethod::ropelite: return "ropelite";
    case SelectionMethod::uniform: return "uniform";
    case SelectionMethod::contribution: return "contribution";
    case SelectionMethod::exhaustive: return "exhaustive";
    }
    return "?";
}

inline SelectionMethod parse_selection_method(const std::string& s) {
    if (s == "ropelite") return SelectionMethod::ropelite;
    if (s == "uniform") return SelectionMethod::uniform;
    if (s == "contribution") return SelectionMethod::contribution;
    if (s == "exhaustive") return SelectionMethod::exhaustive;
    throw InputError("unknown selection method '" + s + "'");
}

// Per-layer, per-head elite chunk sets, each of size r.
struct EliteSelection {
    SelectionMethod method = SelectionMethod::ropelite;
    std::size_t r = 0;
    std::vector<std::vector<ChunkSet>> layers;

    const ChunkSet& at(std::size_t layer, std::size_t head) const { return layers.at(layer).at(head); }

    static EliteSelection uniform_sets(const ModelConfig& cfg, SelectionMethod method, const ChunkSet& set) {
        EliteSelection s{method, set.size(), {}};
        s.layers.assign(cfg.n_layers, std::vector<ChunkSet>(cfg.n_heads, set));
        return s;
    }

    void validate(const ModelConfig& cfg) const {
        if (layers.size() != cfg.n_layers) throw SelectionError("selection layer count does not match model");
        for (const auto& heads : layers) {
            if (heads.size() != cfg.n_heads) throw SelectionError("selection head count does not match model");
            for (const auto& set : heads) {
                if (set.size() != r)
                    throw SelectionError("head selection has " + std::to_string(set.size()) + " chunks, expected r=" +
                                         std::to_string(r));
                if (!set.fits(cfg.chunk_count())) throw SelectionError("chunk index out of range");
            }
        }
    }

    friend bool operator==(const EliteSelection&, const EliteSelection&) = default;
};

} // namespace ropekv
