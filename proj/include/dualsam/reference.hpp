#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <vector>

#include "dualsam/c3p.hpp"
#include "dualsam/image.hpp"

// Slow, definition-literal re-implementations of the codec and the metrics.
// These exist only to cross-check the production code (selftest, test
// suites); nothing on the production path may call them.

namespace dualsam::ref {

// All (u,v) with |u-w|+|v-h| = 1, or |u-w|+|v-h| = 2 and max(|u-w|,|v-h|) = 2,
// found by scanning the full neighborhood box rather than using a table.
inline std::vector<std::pair<int, int>> criss_cross_neighbors(int w, int h) {
    std::vector<std::pair<int, int>> out;
    for (int v = h - 2; v <= h + 2; ++v) {
        for (int u = w - 2; u <= w + 2; ++u) {
            const int d1 = std::abs(u - w) + std::abs(v - h);
            const int dmax = std::max(std::abs(u - w), std::abs(v - h));
            if (d1 == 1 || (d1 == 2 && dmax == 2)) out.emplace_back(u, v);
        }
    }
    return out;
}

inline ConnectivityLabel encode_label(const BinaryMask& mask) {
    ConnectivityLabel label = ConnectivityLabel::zeros(mask.width, mask.height);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            for (int c = 1; c <= 8; ++c) {
                const PixelOffset& o = offsets().channel(c);
                const int u = x + o.du, v = y + o.dv;
                const bool neighbor_fg = u >= 0 && u < mask.width && v >= 0 &&
                                         v < mask.height && mask.at(u, v) != 0;
                label.at(x, y, c) = (mask.at(x, y) != 0 && neighbor_fg) ? 1 : 0;
            }
        }
    }
    return label;
}

// Literal mutual-confirmation reading: every asserted pair (w,h,c)/(u,v,9-c)
// turns both endpoints on.
inline BinaryMask decode_mask(const ConnectivityLabel& label) {
    BinaryMask mask = BinaryMask::zeros(label.width, label.height);
    for (int y = 0; y < label.height; ++y) {
        for (int x = 0; x < label.width; ++x) {
            for (int c = 1; c <= 8; ++c) {
                const PixelOffset& o = offsets().channel(c);
                const int u = x + o.du, v = y + o.dv;
                if (u < 0 || u >= label.width || v < 0 || v >= label.height) continue;
                if (label.at(x, y, c) != 0 && label.at(u, v, 9 - c) != 0) {
                    mask.at(x, y) = 1;
                    mask.at(u, v) = 1;
                }
            }
        }
    }
    return mask;
}

// What a perfect round trip must produce: the mask minus foreground pixels
// with no criss-cross foreground neighbor.
inline BinaryMask drop_isolated(const BinaryMask& mask) {
    BinaryMask out = mask;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (!mask.at(x, y)) continue;
            bool linked = false;
            for (const auto& [u, v] : criss_cross_neighbors(x, y)) {
                if (u >= 0 && u < mask.width && v >= 0 && v < mask.height && mask.at(u, v)) {
                    linked = true;
                    break;
                }
            }
            if (!linked) out.at(x, y) = 0;
        }
    }
    return out;
}

// -- definitional metric recomputation -------------------------------------

inline double iou_fg(const BinaryMask& pred, const BinaryMask& gt) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
        if (p && g) ++inter;
        if (p || g) ++uni;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double iou_two_class(const BinaryMask& pred, const BinaryMask& gt) {
    BinaryMask ip = pred, ig = gt;
    for (auto& v : ip.values) v = v ? 0 : 1;
    for (auto& v : ig.values) v = v ? 0 : 1;
    return 0.5 * (iou_fg(pred, gt) + iou_fg(ip, ig));
}

inline double f_beta(const BinaryMask& pred, const BinaryMask& gt, double beta_sq) {
    long tp = 0, pred_fg = 0, gt_fg = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        if (pred.values[i] && gt.values[i]) ++tp;
        if (pred.values[i]) ++pred_fg;
        if (gt.values[i]) ++gt_fg;
    }
    if (gt_fg == 0) throw std::invalid_argument("ref::f_beta: empty ground truth");
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / static_cast<double>(pred_fg);
    const double recall = static_cast<double>(tp) / static_cast<double>(gt_fg);
    const double denom = beta_sq * precision + recall;
    return denom == 0.0 ? 0.0 : (1.0 + beta_sq) * precision * recall / denom;
}

inline double mae(const NormImage& pred, const BinaryMask& gt) {
    double total = 0.0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const double d = pred.values[i] - static_cast<double>(gt.values[i]);
        total += d < 0 ? -d : d;
    }
    return total / static_cast<double>(pred.values.size());
}

}  // namespace dualsam::ref
