#ifndef CLICKSEG_TESTS_TOY_HPP
#define CLICKSEG_TESTS_TOY_HPP

#include "clickseg/model_config.hpp"

namespace toy {

/// 8x8 input, one-pixel patches, one layer per stage, narrow widths.
inline clickseg::ModelConfig tiny_config() {
    clickseg::ModelConfig c;
    c.input_size = 8;
    c.patch_size = 1;
    c.stage_dims = {4, 4, 8, 8};
    c.heads = {1, 2, 2, 2};
    c.layers = {1, 1, 1, 1};
    c.mapping_dim = 4;
    c.decoder_dim = 4;
    c.click_radius = 1;
    return c;
}

} // namespace toy

#endif // CLICKSEG_TESTS_TOY_HPP
