#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

// Criss-cross connectivity codec: a binary mask becomes, per pixel, eight
// binary assertions of co-foreground with the axial neighbors at distances
// 1 and 2. Channels c and 9-c point at opposite offsets; decoding only
// accepts links asserted from both endpoints.

namespace dualsam {

struct PixelOffset {
    int du = 0;  // along the width (w/u) axis
    int dv = 0;  // along the height (h/v) axis
};

// Channel c in 1..8 -> displacement. Fixed order:
//   1:(-2,0) 2:(-1,0) 3:(0,-2) 4:(0,-1) 5:(0,+1) 6:(0,+2) 7:(+1,0) 8:(+2,0)
struct OffsetTable {
    std::array<PixelOffset, 8> entries;
    const PixelOffset& channel(int c) const { return entries[static_cast<std::size_t>(c - 1)]; }
};

const OffsetTable& offsets();
inline int reciprocal_channel(int c) { return 9 - c; }

struct BinaryMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;  // row-major, {0,1}

    static BinaryMask zeros(int w, int h) {
        return BinaryMask{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, 0)};
    }
    std::uint8_t at(int x, int y) const { return values[static_cast<std::size_t>(y * width + x)]; }
    std::uint8_t& at(int x, int y) { return values[static_cast<std::size_t>(y * width + x)]; }
    bool operator==(const BinaryMask&) const = default;
};

// Layout for both label and map: ((y * W) + x) * 8 + (c - 1).
struct ConnectivityLabel {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;  // {0,1}

    static ConnectivityLabel zeros(int w, int h) {
        return ConnectivityLabel{w, h,
                                 std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 8, 0)};
    }
    std::uint8_t at(int x, int y, int c) const {
        return values[static_cast<std::size_t>((y * width + x) * 8 + (c - 1))];
    }
    std::uint8_t& at(int x, int y, int c) {
        return values[static_cast<std::size_t>((y * width + x) * 8 + (c - 1))];
    }
    bool operator==(const ConnectivityLabel&) const = default;
};

struct ConnectivityMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;  // [0,1]

    static ConnectivityMap zeros(int w, int h) {
        return ConnectivityMap{w, h, std::vector<double>(static_cast<std::size_t>(w) * h * 8, 0.0)};
    }
    double at(int x, int y, int c) const {
        return values[static_cast<std::size_t>((y * width + x) * 8 + (c - 1))];
    }
    double& at(int x, int y, int c) {
        return values[static_cast<std::size_t>((y * width + x) * 8 + (c - 1))];
    }
};

// label(w,h,c) = 1 iff the pixel and its offset-c neighbor are both
// foreground; out-of-bounds neighbors count as background.
ConnectivityLabel encode(const BinaryMask& mask);

// Strictly-above-xi binarization; xi must lie in (0,1).
ConnectivityLabel threshold(const ConnectivityMap& map, double xi);

// Mutual confirmation: a pixel is foreground iff some channel c is set and
// the offset-c neighbor asserts the reciprocal channel 9-c back.
BinaryMask decode(const ConnectivityLabel& label);

// OR-pooling over factor x factor blocks; dims must be divisible by factor.
BinaryMask downsample_mask(const BinaryMask& mask, int factor);

// -- file formats (bit-exact) --------------------------------------------
// Label:  "C3PL\n" "H W 8\n" then H*W*8 bytes in {0,1}.
// Map:    "C3PF\n" "H W 8\n" then H*W*8 little-endian doubles.
// Both run channel-major per pixel, row-major over pixels.

std::vector<std::uint8_t> label_to_bytes(const ConnectivityLabel& label);
ConnectivityLabel label_from_bytes(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> map_to_bytes(const ConnectivityMap& map);
ConnectivityMap map_from_bytes(const std::vector<std::uint8_t>& bytes);

void write_label_file(const std::string& path, const ConnectivityLabel& label);
ConnectivityLabel read_label_file(const std::string& path);
void write_map_file(const std::string& path, const ConnectivityMap& map);
ConnectivityMap read_map_file(const std::string& path);

}  // namespace dualsam
