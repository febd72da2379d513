#ifndef CLICKSEG_SAMPLE_HPP
#define CLICKSEG_SAMPLE_HPP

#include <string>

#include "clickseg/error.hpp"
#include "clickseg/mask.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

/// An RGB image in [0,1] with its ground-truth object mask.
struct Sample {
    Tensor image; // [3, H, W]
    Mask gt;
    std::string id;
};

inline void validate_sample(const Sample& s) {
    if (s.image.rank() != 3 || s.image.dim(0) != 3) throw ShapeError("sample " + s.id + ": image must be [3,H,W]");
    if (s.image.dim(1) != s.gt.height() || s.image.dim(2) != s.gt.width()) {
        throw ShapeError("sample " + s.id + ": image and mask sizes differ");
    }
    if (s.gt.empty()) throw DomainError("sample " + s.id + ": empty ground truth");
    for (double v : s.image.data())
        if (v < 0.0 || v > 1.0) throw DomainError("sample " + s.id + ": image values outside [0,1]");
}

} // namespace clickseg

#endif // CLICKSEG_SAMPLE_HPP
