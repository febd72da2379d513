#ifndef CLICKSEG_MASK_HPP
#define CLICKSEG_MASK_HPP

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "clickseg/error.hpp"

namespace clickseg {

/// Binary H x W image, row-major, values in {0,1}.
class Mask {
public:
    Mask() = default;
    Mask(std::size_t height, std::size_t width) : height_(height), width_(width), bits_(height * width, 0) {}
    Mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits)
        : height_(height), width_(width), bits_(std::move(bits)) {
        if (bits_.size() != height_ * width_) throw ShapeError("Mask: bit count does not match size");
        for (auto& b : bits_) {
            if (b > 1) throw DomainError("Mask: values must be 0 or 1");
        }
    }

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t size() const { return bits_.size(); }

    bool operator()(std::size_t r, std::size_t c) const { return bits_[r * width_ + c] != 0; }
    void set(std::size_t r, std::size_t c, bool on) { bits_[r * width_ + c] = on ? 1 : 0; }

    const std::vector<std::uint8_t>& bits() const { return bits_; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : bits_) n += b;
        return n;
    }

    bool empty() const { return count() == 0; }

    bool same_size(const Mask& other) const { return height_ == other.height_ && width_ == other.width_; }

    friend bool operator==(const Mask&, const Mask&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<std::uint8_t> bits_;
};

inline void require_same_size(const Mask& a, const Mask& b, const char* op) {
    if (!a.same_size(b)) {
        throw ShapeError(std::string(op) + ": mask sizes differ (" + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + ")");
    }
}

enum class Polarity : std::uint8_t { positive, negative };

struct Click {
    std::size_t row = 0;
    std::size_t col = 0;
    Polarity polarity = Polarity::positive;
    std::size_t ordinal = 0; // position within the session's click sequence

    bool positive() const { return polarity == Polarity::positive; }

    friend bool operator==(const Click&, const Click&) = default;
};

using ClickSet = std::vector<Click>;

inline std::size_t count_positive(const ClickSet& clicks) {
    std::size_t n = 0;
    for (const auto& c : clicks) n += c.positive() ? 1 : 0;
    return n;
}

inline void require_in_bounds(const Click& click, std::size_t height, std::size_t width) {
    if (click.row >= height || click.col >= width) {
        throw DomainError("click (" + std::to_string(click.row) + "," + std::to_string(click.col) +
                          ") outside " + std::to_string(height) + "x" + std::to_string(width) + " image");
    }
}

} // namespace clickseg

#endif // CLICKSEG_MASK_HPP
