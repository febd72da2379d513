#ifndef CLICKSEG_MODEL_CONFIG_HPP
#define CLICKSEG_MODEL_CONFIG_HPP

#include <array>
#include <cstddef>
#include <string>

#include "clickseg/error.hpp"

namespace clickseg {

inline constexpr std::size_t kStages = 4;

/// Architecture of the four-stage patch-transformer segmenter.
struct ModelConfig {
    std::size_t input_size = 64; // square inputs
    std::size_t patch_size = 4;
    std::array<std::size_t, kStages> stage_dims{16, 24, 32, 48};
    std::array<std::size_t, kStages> heads{1, 2, 2, 4};
    std::array<std::size_t, kStages> layers{1, 1, 2, 1};
    std::array<std::size_t, kStages> reduction{1, 1, 1, 1}; // spatial reduction of keys/values
    std::size_t n_cls = 1;
    std::size_t mapping_dim = 32; // output width of the click-similarity mapping head
    std::size_t decoder_dim = 32;
    std::size_t mlp_ratio = 2;
    std::size_t click_radius = 3;

    /// Side length, in pixels, of one patch at `stage` (0-based).
    std::size_t patch_extent(std::size_t stage) const { return patch_size << stage; }
    /// Patches per side at `stage`.
    std::size_t grid(std::size_t stage) const { return input_size / patch_extent(stage); }
    std::size_t patches(std::size_t stage) const { return grid(stage) * grid(stage); }

    void validate() const {
        if (patch_size == 0 || input_size == 0) throw DomainError("ModelConfig: sizes must be positive");
        if (input_size % (patch_size * 8) != 0) {
            throw DomainError("ModelConfig: input_size " + std::to_string(input_size) +
                              " not divisible by patch_size*8 = " + std::to_string(patch_size * 8));
        }
        if (n_cls != 1) throw DomainError("ModelConfig: n_cls must be 1");
        for (std::size_t i = 0; i < kStages; ++i) {
            if (heads[i] == 0 || stage_dims[i] % heads[i] != 0) {
                throw DomainError("ModelConfig: stage " + std::to_string(i + 1) + " dim " +
                                  std::to_string(stage_dims[i]) + " not divisible by heads " +
                                  std::to_string(heads[i]));
            }
            if (layers[i] == 0) throw DomainError("ModelConfig: every stage needs at least one layer");
            if (reduction[i] == 0 || grid(i) % reduction[i] != 0) {
                throw DomainError("ModelConfig: reduction does not divide stage grid");
            }
        }
        if (mapping_dim == 0 || decoder_dim == 0 || mlp_ratio == 0) throw DomainError("ModelConfig: zero width");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

} // namespace clickseg

#endif // CLICKSEG_MODEL_CONFIG_HPP
