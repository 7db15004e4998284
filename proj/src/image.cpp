#include "dualsam/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dualsam {

namespace {

struct ByteCursor {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    bool done() const { return pos >= bytes.size(); }
    int peek() const { return done() ? -1 : bytes[pos]; }
    int take() { return done() ? -1 : bytes[pos++]; }
};

bool is_pnm_space(int c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

// Skips whitespace and '#' comment lines between header tokens.
void skip_separators(ByteCursor& cur) {
    for (;;) {
        while (!cur.done() && is_pnm_space(cur.peek())) cur.take();
        if (cur.peek() == '#') {
            while (!cur.done() && cur.peek() != '\n') cur.take();
            continue;
        }
        return;
    }
}

int parse_header_int(ByteCursor& cur, const char* what) {
    skip_separators(cur);
    if (cur.done() || cur.peek() < '0' || cur.peek() > '9') {
        throw std::runtime_error(std::string("pnm: malformed header, expected ") + what);
    }
    long value = 0;
    while (!cur.done() && cur.peek() >= '0' && cur.peek() <= '9') {
        value = value * 10 + (cur.take() - '0');
        if (value > 1 << 24) throw std::runtime_error(std::string("pnm: absurd ") + what);
    }
    return static_cast<int>(value);
}

}  // namespace

RawImage load_pnm(const std::vector<std::uint8_t>& bytes) {
    ByteCursor cur{bytes};
    if (bytes.size() < 2 || bytes[0] != 'P') {
        throw std::runtime_error("pnm: missing magic number");
    }
    const char kind = static_cast<char>(bytes[1]);
    if (kind != '5' && kind != '6') {
        throw std::runtime_error(std::string("pnm: unsupported magic P") + kind +
                                 " (only binary P5/P6 are handled)");
    }
    cur.pos = 2;
    RawImage img;
    img.channels = (kind == '6') ? 3 : 1;
    img.width = parse_header_int(cur, "width");
    img.height = parse_header_int(cur, "height");
    const int maxval = parse_header_int(cur, "maxval");
    if (maxval != 255) {
        throw std::runtime_error("pnm: unsupported maxval " + std::to_string(maxval) +
                                 " (must be 255)");
    }
    // Exactly one whitespace byte separates the header from the payload.
    if (cur.done() || !is_pnm_space(cur.peek())) {
        throw std::runtime_error("pnm: malformed header, expected separator before payload");
    }
    cur.take();
    const std::size_t need =
        static_cast<std::size_t>(img.width) * img.height * img.channels;
    if (bytes.size() - cur.pos < need) {
        throw std::runtime_error("pnm: truncated payload: need " + std::to_string(need) +
                                 " bytes, have " + std::to_string(bytes.size() - cur.pos));
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos + need));
    return img;
}

std::vector<std::uint8_t> save_pnm(const RawImage& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw std::runtime_error("pnm: images must have 1 or 3 channels");
    }
    if (img.pixels.size() !=
        static_cast<std::size_t>(img.width) * img.height * img.channels) {
        throw std::runtime_error("pnm: pixel buffer does not match dimensions");
    }
    char header[64];
    const int n = std::snprintf(header, sizeof(header), "P%c\n%d %d\n255\n",
                                img.channels == 3 ? '6' : '5', img.width, img.height);
    std::vector<std::uint8_t> out(header, header + n);
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

RawImage read_pnm_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return load_pnm(bytes);
}

void write_pnm_file(const std::string& path, const RawImage& img) {
    const auto bytes = save_pnm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

std::pair<RawImage, GrayStats> to_gray(const RawImage& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw std::runtime_error("to_gray: images must have 1 or 3 channels");
    }
    RawImage gray;
    gray.width = img.width;
    gray.height = img.height;
    gray.channels = 1;
    gray.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    double total = 0.0;
    const std::size_t n = gray.pixels.size();
    for (std::size_t i = 0; i < n; ++i) {
        double luma;
        if (img.channels == 1) {
            luma = img.pixels[i];
        } else {
            luma = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] +
                   0.114 * img.pixels[3 * i + 2];
        }
        total += luma;
        gray.pixels[i] = img.channels == 1
                             ? img.pixels[i]
                             : static_cast<std::uint8_t>(std::lround(luma));
    }
    return {std::move(gray), GrayStats{total / static_cast<double>(n)}};
}

NormImage normalize(const RawImage& img) {
    NormImage out;
    out.width = img.width;
    out.height = img.height;
    out.channels = img.channels;
    out.values.resize(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) out.values[i] = img.pixels[i] / 255.0;
    return out;
}

RawImage quantize(const NormImage& img) {
    RawImage out;
    out.width = img.width;
    out.height = img.height;
    out.channels = img.channels;
    out.pixels.resize(img.values.size());
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        const double v = std::clamp(img.values[i], 0.0, 1.0);
        out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

GammaVariant gamma_variant_from_string(const std::string& name) {
    if (name == "as-written") return GammaVariant::AsWritten;
    if (name == "standard-agc") return GammaVariant::StandardAgc;
    throw std::runtime_error("unknown gamma variant '" + name +
                             "' (expected as-written or standard-agc)");
}

std::string to_string(GammaVariant variant) {
    return variant == GammaVariant::AsWritten ? "as-written" : "standard-agc";
}

NormImage gamma_correct(const NormImage& img, const GrayStats& stats, GammaVariant variant) {
    const double mean = stats.mean_gray / 255.0;
    if (!(mean > 0.0) || mean >= 1.0) {
        throw std::runtime_error("gamma_correct: degenerate gray statistics (mean_gray = " +
                                 std::to_string(stats.mean_gray) + ")");
    }
    constexpr double kGuard = 1e-6;
    double exponent;
    if (variant == GammaVariant::AsWritten) {
        const double gamma = std::log10(0.5) - std::log10(mean);
        if (std::abs(gamma) < kGuard) return img;  // mid-gray: the gamma-th root blows up
        exponent = 1.0 / gamma;
    } else {
        const double denom = std::log10(mean);
        if (std::abs(denom - std::log10(0.5)) < kGuard) return img;  // gamma ~ 1
        exponent = std::log10(0.5) / denom;
    }
    NormImage out = img;
    for (double& v : out.values) {
        const double base = std::max(v, 1.0 / 255.0);
        v = std::clamp(std::pow(base, exponent), 0.0, 1.0);
    }
    return out;
}

NormImage resize_bilinear(const NormImage& img, int new_w, int new_h) {
    if (new_w < 1 || new_h < 1) {
        throw std::runtime_error("resize_bilinear: target dimensions must be positive");
    }
    if (new_w == img.width && new_h == img.height) return img;
    NormImage out;
    out.width = new_w;
    out.height = new_h;
    out.channels = img.channels;
    out.values.resize(static_cast<std::size_t>(new_w) * new_h * img.channels);
    const double sx = static_cast<double>(img.width) / new_w;
    const double sy = static_cast<double>(img.height) / new_h;
    for (int y = 0; y < new_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < new_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
                const double bot = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
                out.at(x, y, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

}  // namespace dualsam
