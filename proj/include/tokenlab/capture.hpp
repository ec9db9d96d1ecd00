#pragma once

#include <map>
#include <vector>

#include "tokenlab/errors.hpp"

namespace tokenlab {

// Head-averaged attention probability rows for one or more captured layers.
// Row i of a layer describes input position first_position + i and has
// first_position + i + 1 entries (visible positions under the causal mask).
struct AttentionCapture {
    int first_position = 0;
    std::map<int, std::vector<std::vector<double>>> layer_rows;

    const std::vector<std::vector<double>>& rows(int layer) const {
        auto it = layer_rows.find(layer);
        if (it == layer_rows.end()) {
            throw input_error("attention capture: layer " + std::to_string(layer) + " not captured");
        }
        return it->second;
    }

    bool has_layer(int layer) const { return layer_rows.count(layer) > 0; }

    // Row for absolute input position `pos` in the given layer.
    const std::vector<double>& row_at(int layer, int pos) const {
        const auto& r = rows(layer);
        const int idx = pos - first_position;
        if (idx < 0 || idx >= static_cast<int>(r.size())) {
            throw alignment_error("attention capture: position " + std::to_string(pos) +
                                  " outside captured window");
        }
        return r[static_cast<std::size_t>(idx)];
    }
};

}  // namespace tokenlab
