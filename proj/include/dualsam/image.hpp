#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace dualsam {

// 8-bit image, row-major, channel-interleaved. channels is 1 (gray) or 3 (RGB).
struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(int x, int y, int c = 0) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    std::uint8_t& at(int x, int y, int c = 0) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
};

// Floating-point image with values in [0,1], same layout as RawImage.
struct NormImage {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<double> values;

    double at(int x, int y, int c = 0) const {
        return values[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    double& at(int x, int y, int c = 0) {
        return values[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
};

struct GrayStats {
    double mean_gray = 0.0;  // in [0,255], mean of the luma image before rounding
};

// Binary PGM (P5) / PPM (P6) with maxval 255. '#' comments are accepted in the
// header; the writer emits the normalized single-space header form.
RawImage load_pnm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> save_pnm(const RawImage& img);
RawImage read_pnm_file(const std::string& path);
void write_pnm_file(const std::string& path, const RawImage& img);

// Luma 0.299R + 0.587G + 0.114B, rounded per pixel; the returned stats carry
// the exact pre-rounding mean.
std::pair<RawImage, GrayStats> to_gray(const RawImage& img);

NormImage normalize(const RawImage& img);       // pixel / 255
RawImage quantize(const NormImage& img);        // round(value * 255)

enum class GammaVariant {
    AsWritten,    // gamma = lg(0.5) - lg(mean/255), output = input^(1/gamma)
    StandardAgc,  // gamma = lg(0.5) / lg(mean/255), output = input^gamma
};

GammaVariant gamma_variant_from_string(const std::string& name);
std::string to_string(GammaVariant variant);

// Mean-gray-driven power-law remap. Inputs at 0 are lifted to 1/255 before
// exponentiation; outputs are clamped to [0,1]. Near-degenerate statistics
// (gamma ~ 0 as-written, mean ~ mid-gray for standard-agc) return the input
// unchanged; mean_gray <= 0 or >= 255 is an error.
NormImage gamma_correct(const NormImage& img, const GrayStats& stats, GammaVariant variant);

// Half-pixel-center bilinear resize with clamped borders; identity when the
// target dims equal the source dims.
NormImage resize_bilinear(const NormImage& img, int new_w, int new_h);

}  // namespace dualsam
