#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualsam/rng.hpp"
#include "dualsam/tensor.hpp"

namespace testutil {

inline dualsam::Tensor random_tensor(dualsam::Rng& rng, dualsam::Shape shape, double lo = -1.0,
                                     double hi = 1.0, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(dualsam::shape_numel(shape)));
    for (double& x : v) x = rng.uniform(lo, hi);
    return dualsam::Tensor(std::move(shape), std::move(v), requires_grad);
}

// Message-substring assertion helper for error-contract tests.
template <typename Fn>
bool throws_with(Fn&& fn, const std::string& needle) {
    try {
        fn();
    } catch (const std::exception& e) {
        return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
}

// -- independent oracles (plain loops, no tensor machinery) -----------------

inline std::vector<double> matmul_oracle(const std::vector<double>& a,
                                         const std::vector<double>& b, int m, int k, int n) {
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int t = 0; t < k; ++t) {
                out[static_cast<std::size_t>(i) * n + j] +=
                    a[static_cast<std::size_t>(i) * k + t] * b[static_cast<std::size_t>(t) * n + j];
            }
        }
    }
    return out;
}

inline std::vector<double> conv2d_oracle(const std::vector<double>& x, int cin, int h, int w,
                                         const std::vector<double>& kernel, int cout, int kh,
                                         int kw, int dilation, int padding, int* hout_out,
                                         int* wout_out) {
    const int hout = h + 2 * padding - dilation * (kh - 1);
    const int wout = w + 2 * padding - dilation * (kw - 1);
    *hout_out = hout;
    *wout_out = wout;
    std::vector<double> out(static_cast<std::size_t>(cout) * hout * wout, 0.0);
    for (int co = 0; co < cout; ++co) {
        for (int oy = 0; oy < hout; ++oy) {
            for (int ox = 0; ox < wout; ++ox) {
                double acc = 0.0;
                for (int ci = 0; ci < cin; ++ci) {
                    for (int u = 0; u < kh; ++u) {
                        for (int v = 0; v < kw; ++v) {
                            const int iy = oy - padding + u * dilation;
                            const int ix = ox - padding + v * dilation;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += x[(static_cast<std::size_t>(ci) * h + iy) * w + ix] *
                                   kernel[((static_cast<std::size_t>(co) * cin + ci) * kh + u) * kw + v];
                        }
                    }
                }
                out[(static_cast<std::size_t>(co) * hout + oy) * wout + ox] = acc;
            }
        }
    }
    return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace testutil
