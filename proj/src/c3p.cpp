#include "dualsam/c3p.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dualsam {

const OffsetTable& offsets() {
    static const OffsetTable table{{{{-2, 0}, {-1, 0}, {0, -2}, {0, -1},
                                     {0, +1}, {0, +2}, {+1, 0}, {+2, 0}}}};
    return table;
}

ConnectivityLabel encode(const BinaryMask& mask) {
    ConnectivityLabel label = ConnectivityLabel::zeros(mask.width, mask.height);
    const OffsetTable& table = offsets();
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (!mask.at(x, y)) continue;
            for (int c = 1; c <= 8; ++c) {
                const PixelOffset& o = table.channel(c);
                const int u = x + o.du, v = y + o.dv;
                if (u < 0 || u >= mask.width || v < 0 || v >= mask.height) continue;
                if (mask.at(u, v)) label.at(x, y, c) = 1;
            }
        }
    }
    return label;
}

ConnectivityLabel threshold(const ConnectivityMap& map, double xi) {
    if (!(xi > 0.0 && xi < 1.0)) {
        throw std::invalid_argument("threshold: xi must lie in (0,1), got " + std::to_string(xi));
    }
    ConnectivityLabel label{map.width, map.height,
                            std::vector<std::uint8_t>(map.values.size(), 0)};
    for (std::size_t i = 0; i < map.values.size(); ++i) {
        label.values[i] = map.values[i] > xi ? 1 : 0;
    }
    return label;
}

BinaryMask decode(const ConnectivityLabel& label) {
    BinaryMask mask = BinaryMask::zeros(label.width, label.height);
    const OffsetTable& table = offsets();
    for (int y = 0; y < label.height; ++y) {
        for (int x = 0; x < label.width; ++x) {
            for (int c = 1; c <= 8; ++c) {
                if (!label.at(x, y, c)) continue;
                const PixelOffset& o = table.channel(c);
                const int u = x + o.du, v = y + o.dv;
                if (u < 0 || u >= label.width || v < 0 || v >= label.height) continue;
                if (label.at(u, v, reciprocal_channel(c))) {
                    mask.at(x, y) = 1;
                    mask.at(u, v) = 1;
                    break;
                }
            }
        }
    }
    return mask;
}

BinaryMask downsample_mask(const BinaryMask& mask, int factor) {
    if (factor < 1) throw std::invalid_argument("downsample_mask: factor must be positive");
    if (mask.width % factor != 0 || mask.height % factor != 0) {
        throw std::invalid_argument("downsample_mask: dimensions " + std::to_string(mask.width) +
                                    "x" + std::to_string(mask.height) +
                                    " not divisible by factor " + std::to_string(factor));
    }
    if (factor == 1) return mask;
    BinaryMask out = BinaryMask::zeros(mask.width / factor, mask.height / factor);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(x, y)) out.at(x / factor, y / factor) = 1;
        }
    }
    return out;
}

// -- file formats ----------------------------------------------------------

namespace {

constexpr char kLabelMagic[] = "C3PL\n";
constexpr char kMapMagic[] = "C3PF\n";

void append_header(std::vector<std::uint8_t>& out, const char* magic, int w, int h) {
    out.insert(out.end(), magic, magic + 5);
    char line[48];
    const int n = std::snprintf(line, sizeof(line), "%d %d 8\n", h, w);
    out.insert(out.end(), line, line + n);
}

struct Header {
    int width, height;
    std::size_t payload_at;
};

Header parse_header(const std::vector<std::uint8_t>& bytes, const char* magic,
                    const char* what) {
    if (bytes.size() < 5 || std::memcmp(bytes.data(), magic, 5) != 0) {
        throw std::runtime_error(std::string(what) + ": bad magic");
    }
    std::size_t i = 5;
    auto read_int = [&](const char* field) {
        long v = 0;
        bool any = false;
        while (i < bytes.size() && bytes[i] >= '0' && bytes[i] <= '9') {
            v = v * 10 + (bytes[i++] - '0');
            any = true;
        }
        if (!any || v <= 0 || v > (1 << 24)) {
            throw std::runtime_error(std::string(what) + ": malformed " + field);
        }
        return static_cast<int>(v);
    };
    const int h = read_int("height");
    if (i >= bytes.size() || bytes[i++] != ' ') throw std::runtime_error(std::string(what) + ": malformed header");
    const int w = read_int("width");
    if (i + 2 > bytes.size() || bytes[i] != ' ' || bytes[i + 1] != '8') {
        throw std::runtime_error(std::string(what) + ": malformed channel count");
    }
    i += 2;
    if (i >= bytes.size() || bytes[i++] != '\n') {
        throw std::runtime_error(std::string(what) + ": malformed header");
    }
    return {w, h, i};
}

std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

}  // namespace

std::vector<std::uint8_t> label_to_bytes(const ConnectivityLabel& label) {
    std::vector<std::uint8_t> out;
    out.reserve(label.values.size() + 16);
    append_header(out, kLabelMagic, label.width, label.height);
    out.insert(out.end(), label.values.begin(), label.values.end());
    return out;
}

ConnectivityLabel label_from_bytes(const std::vector<std::uint8_t>& bytes) {
    const Header h = parse_header(bytes, kLabelMagic, "c3pl");
    const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 8;
    if (bytes.size() - h.payload_at != need) {
        throw std::runtime_error("c3pl: payload size mismatch");
    }
    ConnectivityLabel label{h.width, h.height, {}};
    label.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_at), bytes.end());
    for (std::uint8_t v : label.values) {
        if (v > 1) throw std::runtime_error("c3pl: payload bytes must be 0 or 1");
    }
    return label;
}

std::vector<std::uint8_t> map_to_bytes(const ConnectivityMap& map) {
    std::vector<std::uint8_t> out;
    out.reserve(map.values.size() * 8 + 16);
    append_header(out, kMapMagic, map.width, map.height);
    for (double v : map.values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
    return out;
}

ConnectivityMap map_from_bytes(const std::vector<std::uint8_t>& bytes) {
    const Header h = parse_header(bytes, kMapMagic, "c3pf");
    const std::size_t count = static_cast<std::size_t>(h.width) * h.height * 8;
    if (bytes.size() - h.payload_at != count * 8) {
        throw std::runtime_error("c3pf: payload size mismatch");
    }
    ConnectivityMap map{h.width, h.height, std::vector<double>(count)};
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(bytes[h.payload_at + i * 8 + b]) << (8 * b);
        }
        std::memcpy(&map.values[i], &bits, 8);
    }
    return map;
}

void write_label_file(const std::string& path, const ConnectivityLabel& label) {
    spit(path, label_to_bytes(label));
}

ConnectivityLabel read_label_file(const std::string& path) {
    return label_from_bytes(slurp(path));
}

void write_map_file(const std::string& path, const ConnectivityMap& map) {
    spit(path, map_to_bytes(map));
}

ConnectivityMap read_map_file(const std::string& path) {
    return map_from_bytes(slurp(path));
}

}  // namespace dualsam
