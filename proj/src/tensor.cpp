#include "dualsam/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace dualsam {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ')';
    return out.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one dimension");
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    validate_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

double Tensor::scalar_value() const {
    if (size() != 1) throw std::invalid_argument("scalar_value on tensor of shape " + shape_str(shape()));
    return node_->values[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(node_->shape, node_->values, requires_grad);
}

std::vector<double>& Tensor::grad_buffer() {
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
    return node_->grad;
}

Tensor Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output,
                    std::function<void()> pull) {
    records_.push_back(Record{std::move(op), std::move(inputs), output, std::move(pull)});
    return output;
}

// -- helpers --------------------------------------------------------------

namespace {

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Elementwise unary op helper: y = f(x), pull dx += df(x, y) * dy.
Tensor unary_elementwise(Tape& tape, const char* name, const Tensor& x,
                         const std::function<double(double)>& f,
                         const std::function<double(double, double)>& df) {
    std::vector<double> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.values()[i]);
    Tensor y(x.shape(), std::move(out), x.requires_grad());
    Tensor xc = x;
    return tape.record(name, {x}, y, [xc, y, df]() mutable {
        if (!xc.requires_grad()) return;
        auto& gx = xc.grad_buffer();
        const auto& gy = y.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += df(xc.values()[i], y.values()[i]) * gy[i];
        }
    });
}

}  // namespace

// -- primitives -----------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        shape_error("matmul", "expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        shape_error("matmul", "inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    }
    Tensor y = Tensor::zeros({m, n}, any_requires_grad({&a, &b}));
    {
        ConstMatMap ma(a.values().data(), m, k);
        ConstMatMap mb(b.values().data(), k, n);
        MatMap my(y.mutable_values().data(), m, n);
        my.noalias() = ma * mb;
    }
    Tensor ac = a, bc = b;
    return tape.record("matmul", {a, b}, y, [ac, bc, y, m, k, n]() mutable {
        ConstMatMap gy(y.grad().data(), m, n);
        if (ac.requires_grad()) {
            ConstMatMap mb(bc.values().data(), k, n);
            MatMap ga(ac.grad_buffer().data(), m, k);
            ga.noalias() += gy * mb.transpose();
        }
        if (bc.requires_grad()) {
            ConstMatMap ma(ac.values().data(), m, k);
            MatMap gb(bc.grad_buffer().data(), k, n);
            gb.noalias() += ma.transpose() * gy;
        }
    });
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
        shape_error("softmax", "axis " + std::to_string(axis) + " invalid for shape " +
                               shape_str(x.shape()));
    }
    const int n = x.dim(axis);
    std::int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);

    std::vector<double> out(x.values().size());
    const double* xv = x.values().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double mx = xv[base];
            for (int j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            double total = 0.0;
            for (int j = 0; j < n; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                out[static_cast<std::size_t>(base + j * inner)] = e;
                total += e;
            }
            for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(base + j * inner)] /= total;
        }
    }
    Tensor y(x.shape(), std::move(out), x.requires_grad());
    Tensor xc = x;
    return tape.record("softmax", {x}, y, [xc, y, n, inner, outer]() mutable {
        if (!xc.requires_grad()) return;
        auto& gx = xc.grad_buffer();
        const auto& gy = y.grad();
        const auto& yv = y.values();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * n * inner + in;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) {
                    const auto idx = static_cast<std::size_t>(base + j * inner);
                    dot += gy[idx] * yv[idx];
                }
                for (int j = 0; j < n; ++j) {
                    const auto idx = static_cast<std::size_t>(base + j * inner);
                    gx[idx] += yv[idx] * (gy[idx] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    const int n = x.dim(x.rank() - 1);
    if (gain.size() != n || bias.size() != n) {
        shape_error("layer_norm", "gain/bias must match last axis length " + std::to_string(n) +
                                  ", got " + shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    }
    const std::int64_t rows = x.size() / n;
    std::vector<double> out(x.values().size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    std::vector<double> means(static_cast<std::size_t>(rows));
    const double* xv = x.values().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv + r * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        means[static_cast<std::size_t>(r)] = mean;
        inv_std[static_cast<std::size_t>(r)] = is;
        for (int j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(r * n + j)] =
                (row[j] - mean) * is * gain.values()[static_cast<std::size_t>(j)] +
                bias.values()[static_cast<std::size_t>(j)];
        }
    }
    Tensor y(x.shape(), std::move(out), any_requires_grad({&x, &gain, &bias}));
    Tensor xc = x, gc = gain, bc = bias;
    return tape.record("layer_norm", {x, gain, bias}, y,
                       [xc, gc, bc, y, n, rows, means, inv_std]() mutable {
        const auto& gy = y.grad();
        const double* xv = xc.values().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double mean = means[static_cast<std::size_t>(r)];
            const double is = inv_std[static_cast<std::size_t>(r)];
            // x_hat and the two row reductions the input gradient needs.
            double sum_gg = 0.0, sum_ggx = 0.0;
            for (int j = 0; j < n; ++j) {
                const auto idx = static_cast<std::size_t>(r * n + j);
                const double xh = (xv[idx] - mean) * is;
                const double gg = gy[idx] * gc.values()[static_cast<std::size_t>(j)];
                sum_gg += gg;
                sum_ggx += gg * xh;
            }
            for (int j = 0; j < n; ++j) {
                const auto idx = static_cast<std::size_t>(r * n + j);
                const double xh = (xv[idx] - mean) * is;
                const double gg = gy[idx] * gc.values()[static_cast<std::size_t>(j)];
                if (xc.requires_grad()) {
                    xc.grad_buffer()[idx] += is * (gg - sum_gg / n - xh * sum_ggx / n);
                }
                if (gc.requires_grad()) {
                    gc.grad_buffer()[static_cast<std::size_t>(j)] += gy[idx] * xh;
                }
                if (bc.requires_grad()) {
                    bc.grad_buffer()[static_cast<std::size_t>(j)] += gy[idx];
                }
            }
        }
    });
}

Tensor gelu(Tape& tape, const Tensor& x) {
    // Exact Gaussian-CDF form: x * Phi(x).
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_elementwise(
        tape, "gelu", x,
        [](double v) { return v * 0.5 * std::erfc(-v * inv_sqrt2); },
        [](double v, double) {
            const double phi_cdf = 0.5 * std::erfc(-v * inv_sqrt2);
            const double phi_pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            return phi_cdf + v * phi_pdf;
        });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    return unary_elementwise(
        tape, "sigmoid", x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double yv) { return yv * (1.0 - yv); });
}

namespace {

struct ConvDims {
    int cin, h, w, cout, kh, kw, hout, wout, dilation, padding;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel, int dilation, int padding) {
    if (x.rank() != 3) shape_error("conv2d", "input must be [C,H,W], got " + shape_str(x.shape()));
    if (kernel.rank() != 4) {
        shape_error("conv2d", "kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel.shape()));
    }
    if (dilation < 1) shape_error("conv2d", "dilation must be positive");
    if (padding < 0) shape_error("conv2d", "padding must be non-negative");
    ConvDims d;
    d.cin = x.dim(0); d.h = x.dim(1); d.w = x.dim(2);
    d.cout = kernel.dim(0); d.kh = kernel.dim(2); d.kw = kernel.dim(3);
    d.dilation = dilation; d.padding = padding;
    if (kernel.dim(1) != d.cin) {
        shape_error("conv2d", "kernel channels " + shape_str(kernel.shape()) +
                              " do not match input " + shape_str(x.shape()));
    }
    d.hout = d.h + 2 * padding - dilation * (d.kh - 1);
    d.wout = d.w + 2 * padding - dilation * (d.kw - 1);
    if (d.hout < 1 || d.wout < 1) {
        shape_error("conv2d", "effective kernel extent exceeds padded input: input " +
                              shape_str(x.shape()) + ", kernel " + shape_str(kernel.shape()) +
                              ", dilation " + std::to_string(dilation) + ", padding " +
                              std::to_string(padding));
    }
    return d;
}

// Gather input patches into a [Cin*kh*kw, Hout*Wout] matrix (zero padding).
void im2col(const double* x, const ConvDims& d, RowMat& col) {
    col.setZero(static_cast<Eigen::Index>(d.cin) * d.kh * d.kw,
                static_cast<Eigen::Index>(d.hout) * d.wout);
    for (int c = 0; c < d.cin; ++c) {
        const double* plane = x + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int u = 0; u < d.kh; ++u) {
            for (int v = 0; v < d.kw; ++v) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * d.kh + u) * d.kw + v;
                for (int oy = 0; oy < d.hout; ++oy) {
                    const int iy = oy - d.padding + u * d.dilation;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int ox = 0; ox < d.wout; ++ox) {
                        const int ix = ox - d.padding + v * d.dilation;
                        if (ix < 0 || ix >= d.w) continue;
                        col(row, static_cast<Eigen::Index>(oy) * d.wout + ox) =
                            plane[static_cast<std::int64_t>(iy) * d.w + ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const RowMat& col, const ConvDims& d, double* gx) {
    for (int c = 0; c < d.cin; ++c) {
        double* plane = gx + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int u = 0; u < d.kh; ++u) {
            for (int v = 0; v < d.kw; ++v) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * d.kh + u) * d.kw + v;
                for (int oy = 0; oy < d.hout; ++oy) {
                    const int iy = oy - d.padding + u * d.dilation;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int ox = 0; ox < d.wout; ++ox) {
                        const int ix = ox - d.padding + v * d.dilation;
                        if (ix < 0 || ix >= d.w) continue;
                        plane[static_cast<std::int64_t>(iy) * d.w + ix] +=
                            col(row, static_cast<Eigen::Index>(oy) * d.wout + ox);
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, int dilation, int padding) {
    const ConvDims d = conv_dims(x, kernel, dilation, padding);
    Tensor y = Tensor::zeros({d.cout, d.hout, d.wout}, any_requires_grad({&x, &kernel}));
    {
        RowMat col;
        im2col(x.values().data(), d, col);
        ConstMatMap km(kernel.values().data(), d.cout,
                       static_cast<Eigen::Index>(d.cin) * d.kh * d.kw);
        MatMap ym(y.mutable_values().data(), d.cout,
                  static_cast<Eigen::Index>(d.hout) * d.wout);
        ym.noalias() = km * col;
    }
    Tensor xc = x, kc = kernel;
    // The patch matrix is rebuilt in the pull to keep live tapes small.
    return tape.record("conv2d", {x, kernel}, y, [xc, kc, y, d]() mutable {
        ConstMatMap gy(y.grad().data(), d.cout, static_cast<Eigen::Index>(d.hout) * d.wout);
        if (kc.requires_grad()) {
            RowMat col;
            im2col(xc.values().data(), d, col);
            MatMap gk(kc.grad_buffer().data(), d.cout,
                      static_cast<Eigen::Index>(d.cin) * d.kh * d.kw);
            gk.noalias() += gy * col.transpose();
        }
        if (xc.requires_grad()) {
            ConstMatMap km(kc.values().data(), d.cout,
                           static_cast<Eigen::Index>(d.cin) * d.kh * d.kw);
            RowMat gcol = km.transpose() * gy;
            col2im_add(gcol, d, xc.grad_buffer().data());
        }
    });
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
    if (x.rank() != 3) {
        shape_error("global_avg_pool", "input must be [C,H,W], got " + shape_str(x.shape()));
    }
    const int c = x.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    std::vector<double> out(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) {
        const double* plane = x.values().data() + i * hw;
        double total = 0.0;
        for (std::int64_t j = 0; j < hw; ++j) total += plane[j];
        out[static_cast<std::size_t>(i)] = total / static_cast<double>(hw);
    }
    Tensor y(Shape{c}, std::move(out), x.requires_grad());
    Tensor xc = x;
    return tape.record("global_avg_pool", {x}, y, [xc, y, c, hw]() mutable {
        if (!xc.requires_grad()) return;
        auto& gx = xc.grad_buffer();
        for (int i = 0; i < c; ++i) {
            const double g = y.grad()[static_cast<std::size_t>(i)] / static_cast<double>(hw);
            double* plane = gx.data() + i * hw;
            for (std::int64_t j = 0; j < hw; ++j) plane[j] += g;
        }
    });
}

namespace {

// Sample positions for one upsampled axis: out i reads in at (i+0.5)/2 - 0.5.
struct LinTap {
    int lo, hi;
    double w_hi;
};

std::vector<LinTap> upsample_taps(int in_len) {
    std::vector<LinTap> taps(static_cast<std::size_t>(2 * in_len));
    for (int i = 0; i < 2 * in_len; ++i) {
        double src = (i + 0.5) / 2.0 - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
        const int lo = static_cast<int>(std::floor(src));
        const int hi = std::min(lo + 1, in_len - 1);
        taps[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
    }
    return taps;
}

}  // namespace

Tensor upsample2x(Tape& tape, const Tensor& x) {
    if (x.rank() != 3) {
        shape_error("upsample2x", "input must be [C,H,W], got " + shape_str(x.shape()));
    }
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto ytaps = upsample_taps(h);
    const auto xtaps = upsample_taps(w);
    Tensor y = Tensor::zeros({c, 2 * h, 2 * w}, x.requires_grad());
    auto& out = y.mutable_values();
    const double* xv = x.values().data();
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = xv + static_cast<std::int64_t>(ch) * h * w;
        double* oplane = out.data() + static_cast<std::int64_t>(ch) * 4 * h * w;
        for (int oy = 0; oy < 2 * h; ++oy) {
            const LinTap& ty = ytaps[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < 2 * w; ++ox) {
                const LinTap& tx = xtaps[static_cast<std::size_t>(ox)];
                const double top = plane[ty.lo * w + tx.lo] * (1 - tx.w_hi) +
                                   plane[ty.lo * w + tx.hi] * tx.w_hi;
                const double bot = plane[ty.hi * w + tx.lo] * (1 - tx.w_hi) +
                                   plane[ty.hi * w + tx.hi] * tx.w_hi;
                oplane[static_cast<std::int64_t>(oy) * 2 * w + ox] =
                    top * (1 - ty.w_hi) + bot * ty.w_hi;
            }
        }
    }
    Tensor xc = x;
    return tape.record("upsample2x", {x}, y, [xc, y, c, h, w, ytaps, xtaps]() mutable {
        if (!xc.requires_grad()) return;
        auto& gx = xc.grad_buffer();
        const auto& gy = y.grad();
        for (int ch = 0; ch < c; ++ch) {
            double* plane = gx.data() + static_cast<std::int64_t>(ch) * h * w;
            const double* gplane = gy.data() + static_cast<std::int64_t>(ch) * 4 * h * w;
            for (int oy = 0; oy < 2 * h; ++oy) {
                const LinTap& ty = ytaps[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < 2 * w; ++ox) {
                    const LinTap& tx = xtaps[static_cast<std::size_t>(ox)];
                    const double g = gplane[static_cast<std::int64_t>(oy) * 2 * w + ox];
                    plane[ty.lo * w + tx.lo] += g * (1 - ty.w_hi) * (1 - tx.w_hi);
                    plane[ty.lo * w + tx.hi] += g * (1 - ty.w_hi) * tx.w_hi;
                    plane[ty.hi * w + tx.lo] += g * ty.w_hi * (1 - tx.w_hi);
                    plane[ty.hi * w + tx.hi] += g * ty.w_hi * tx.w_hi;
                }
            }
        }
    });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_error("add", "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    Tensor y(a.shape(), std::move(out), any_requires_grad({&a, &b}));
    Tensor ac = a, bc = b;
    return tape.record("add", {a, b}, y, [ac, bc, y]() mutable {
        const auto& gy = y.grad();
        if (ac.requires_grad()) {
            auto& ga = ac.grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
        }
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
        }
    });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
    std::vector<double> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * factor;
    Tensor y(x.shape(), std::move(out), x.requires_grad());
    Tensor xc = x;
    return tape.record("scale", {x}, y, [xc, y, factor]() mutable {
        if (!xc.requires_grad()) return;
        auto& gx = xc.grad_buffer();
        const auto& gy = y.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gy[i];
    });
}

Tensor add_scaled(Tape& tape, const Tensor& x, const Tensor& p, const Tensor& gate) {
    if (x.shape() != p.shape()) {
        shape_error("add_scaled", "shape mismatch: " + shape_str(x.shape()) + " vs " +
                                  shape_str(p.shape()));
    }
    if (gate.size() != 1) shape_error("add_scaled", "gate must be a one-element tensor");
    const double g = gate.value_at(0);
    std::vector<double> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] + g * p.values()[i];
    Tensor y(x.shape(), std::move(out), any_requires_grad({&x, &p, &gate}));
    Tensor xc = x, pc = p, gc = gate;
    return tape.record("add_scaled", {x, p, gate}, y, [xc, pc, gc, y, g]() mutable {
        const auto& gy = y.grad();
        if (xc.requires_grad()) {
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        }
        if (pc.requires_grad()) {
            auto& gp = pc.grad_buffer();
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * gy[i];
        }
        if (gc.requires_grad()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * pc.values()[i];
            gc.grad_buffer()[0] += acc;
        }
    });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_error("mul", "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    Tensor y(a.shape(), std::move(out), any_requires_grad({&a, &b}));
    Tensor ac = a, bc = b;
    return tape.record("mul", {a, b}, y, [ac, bc, y]() mutable {
        const auto& gy = y.grad();
        if (ac.requires_grad()) {
            auto& ga = ac.grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += bc.values()[i] * gy[i];
        }
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += ac.values()[i] * gy[i];
        }
    });
}

Tensor channel_scale(Tape& tape, const Tensor& x, const Tensor& s) {
    if (x.rank() != 3 || s.rank() != 1 || s.dim(0) != x.dim(0)) {
        shape_error("channel_scale", "expects [C,H,W] and [C], got " + shape_str(x.shape()) +
                                     " and " + shape_str(s.shape()));
    }
    const int c = x.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    std::vector<double> out(x.values().size());
    for (int i = 0; i < c; ++i) {
        const double sv = s.values()[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < hw; ++j) {
            out[static_cast<std::size_t>(i * hw + j)] =
                x.values()[static_cast<std::size_t>(i * hw + j)] * sv;
        }
    }
    Tensor y(x.shape(), std::move(out), any_requires_grad({&x, &s}));
    Tensor xc = x, sc = s;
    return tape.record("channel_scale", {x, s}, y, [xc, sc, y, c, hw]() mutable {
        const auto& gy = y.grad();
        for (int i = 0; i < c; ++i) {
            const double sv = sc.values()[static_cast<std::size_t>(i)];
            double acc = 0.0;
            for (std::int64_t j = 0; j < hw; ++j) {
                const auto idx = static_cast<std::size_t>(i * hw + j);
                if (xc.requires_grad()) xc.grad_buffer()[idx] += sv * gy[idx];
                acc += xc.values()[idx] * gy[idx];
            }
            if (sc.requires_grad()) sc.grad_buffer()[static_cast<std::size_t>(i)] += acc;
        }
    });
}

Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.size() != x.dim(1)) {
        shape_error("add_row_bias", "expects [N,D] and [D], got " + shape_str(x.shape()) + " and " +
                                    shape_str(bias.shape()));
    }
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.values().size());
    for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < cols; ++j) {
            out[static_cast<std::size_t>(r * cols + j)] =
                x.values()[static_cast<std::size_t>(r * cols + j)] +
                bias.values()[static_cast<std::size_t>(j)];
        }
    }
    Tensor y(x.shape(), std::move(out), any_requires_grad({&x, &bias}));
    Tensor xc = x, bc = bias;
    return tape.record("add_row_bias", {x, bias}, y, [xc, bc, y, rows, cols]() mutable {
        const auto& gy = y.grad();
        if (xc.requires_grad()) {
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        }
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            for (int r = 0; r < rows; ++r) {
                for (int j = 0; j < cols; ++j) {
                    gb[static_cast<std::size_t>(j)] += gy[static_cast<std::size_t>(r * cols + j)];
                }
            }
        }
    });
}

Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0)) {
        shape_error("add_channel_bias", "expects [C,H,W] and [C], got " + shape_str(x.shape()) +
                                        " and " + shape_str(bias.shape()));
    }
    const int c = x.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    std::vector<double> out(x.values().size());
    for (int i = 0; i < c; ++i) {
        const double bv = bias.values()[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < hw; ++j) {
            out[static_cast<std::size_t>(i * hw + j)] =
                x.values()[static_cast<std::size_t>(i * hw + j)] + bv;
        }
    }
    Tensor y(x.shape(), std::move(out), any_requires_grad({&x, &bias}));
    Tensor xc = x, bc = bias;
    return tape.record("add_channel_bias", {x, bias}, y, [xc, bc, y, c, hw]() mutable {
        const auto& gy = y.grad();
        if (xc.requires_grad()) {
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        }
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            for (int i = 0; i < c; ++i) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < hw; ++j) acc += gy[static_cast<std::size_t>(i * hw + j)];
                gb[static_cast<std::size_t>(i)] += acc;
            }
        }
    });
}

Tensor transpose(Tape& tape, const Tensor& x) {
    if (x.rank() != 2) shape_error("transpose", "expects rank-2, got " + shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    Tensor y = Tensor::zeros({n, m}, x.requires_grad());
    {
        ConstMatMap mx(x.values().data(), m, n);
        MatMap my(y.mutable_values().data(), n, m);
        my = mx.transpose();
    }
    Tensor xc = x;
    return tape.record("transpose", {x}, y, [xc, y, m, n]() mutable {
        if (!xc.requires_grad()) return;
        ConstMatMap gy(y.grad().data(), n, m);
        MatMap gx(xc.grad_buffer().data(), m, n);
        gx += gy.transpose();
    });
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    validate_shape(shape);
    if (shape_numel(shape) != x.size()) {
        shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor y(std::move(shape), x.values(), x.requires_grad());
    Tensor xc = x;
    return tape.record("reshape", {x}, y, [xc, y]() mutable {
        if (!xc.requires_grad()) return;
        auto& gx = xc.grad_buffer();
        const auto& gy = y.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
}

Tensor slice_cols(Tape& tape, const Tensor& x, int first, int count) {
    if (x.rank() != 2) shape_error("slice_cols", "expects rank-2, got " + shape_str(x.shape()));
    if (first < 0 || count < 1 || first + count > x.dim(1)) {
        shape_error("slice_cols", "range [" + std::to_string(first) + ", " +
                                  std::to_string(first + count) + ") invalid for " +
                                  shape_str(x.shape()));
    }
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(rows) * count);
    for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < count; ++j) {
            out[static_cast<std::size_t>(r * count + j)] =
                x.values()[static_cast<std::size_t>(r * cols + first + j)];
        }
    }
    Tensor y(Shape{rows, count}, std::move(out), x.requires_grad());
    Tensor xc = x;
    return tape.record("slice_cols", {x}, y, [xc, y, rows, cols, first, count]() mutable {
        if (!xc.requires_grad()) return;
        auto& gx = xc.grad_buffer();
        const auto& gy = y.grad();
        for (int r = 0; r < rows; ++r) {
            for (int j = 0; j < count; ++j) {
                gx[static_cast<std::size_t>(r * cols + first + j)] +=
                    gy[static_cast<std::size_t>(r * count + j)];
            }
        }
    });
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) shape_error("concat_cols", "needs at least one tensor");
    const int rows = parts[0].dim(0);
    int cols = 0;
    bool needs_grad = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) {
            shape_error("concat_cols", "row counts disagree: " + shape_str(parts[0].shape()) +
                                       " vs " + shape_str(p.shape()));
        }
        cols += p.dim(1);
        needs_grad = needs_grad || p.requires_grad();
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * cols);
    int at = 0;
    for (const Tensor& p : parts) {
        const int pc = p.dim(1);
        for (int r = 0; r < rows; ++r) {
            for (int j = 0; j < pc; ++j) {
                out[static_cast<std::size_t>(r * cols + at + j)] =
                    p.values()[static_cast<std::size_t>(r * pc + j)];
            }
        }
        at += pc;
    }
    Tensor y(Shape{rows, cols}, std::move(out), needs_grad);
    std::vector<Tensor> held = parts;
    return tape.record("concat_cols", parts, y, [held, y, rows, cols]() mutable {
        const auto& gy = y.grad();
        int at = 0;
        for (Tensor& p : held) {
            const int pc = p.dim(1);
            if (p.requires_grad()) {
                auto& gp = p.grad_buffer();
                for (int r = 0; r < rows; ++r) {
                    for (int j = 0; j < pc; ++j) {
                        gp[static_cast<std::size_t>(r * pc + j)] +=
                            gy[static_cast<std::size_t>(r * cols + at + j)];
                    }
                }
            }
            at += pc;
        }
    });
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
        shape_error("concat_channels", "spatial dims disagree: " + shape_str(a.shape()) + " vs " +
                                       shape_str(b.shape()));
    }
    const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
    std::vector<double> out;
    out.reserve(a.values().size() + b.values().size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    Tensor y(Shape{ca + cb, h, w}, std::move(out), any_requires_grad({&a, &b}));
    Tensor ac = a, bc = b;
    return tape.record("concat_channels", {a, b}, y, [ac, bc, y]() mutable {
        const auto& gy = y.grad();
        const std::size_t na = ac.values().size();
        if (ac.requires_grad()) {
            auto& ga = ac.grad_buffer();
            for (std::size_t i = 0; i < na; ++i) ga[i] += gy[i];
        }
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[na + i];
        }
    });
}

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    Tensor y = Tensor::scalar(total, x.requires_grad());
    Tensor xc = x;
    return tape.record("sum", {x}, y, [xc, y]() mutable {
        if (!xc.requires_grad()) return;
        const double g = y.grad()[0];
        auto& gx = xc.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

namespace {
constexpr double kBceClamp = 1e-7;
}

Tensor bce_sum(Tape& tape, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        shape_error("bce_sum", "shape mismatch: " + shape_str(pred.shape()) + " vs " +
                               shape_str(target.shape()));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < pred.values().size(); ++i) {
        const double p = std::clamp(pred.values()[i], kBceClamp, 1.0 - kBceClamp);
        const double y = target.values()[i];
        total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    Tensor out = Tensor::scalar(total, pred.requires_grad());
    Tensor pc = pred, tc = target;
    return tape.record("bce_sum", {pred, target}, out, [pc, tc, out]() mutable {
        if (!pc.requires_grad()) return;
        const double g = out.grad()[0];
        auto& gp = pc.grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) {
            const double p = pc.values()[i];
            if (p <= kBceClamp || p >= 1.0 - kBceClamp) continue;  // clamp region is flat
            const double y = tc.values()[i];
            gp[i] += g * (-(y / p) + (1.0 - y) / (1.0 - p));
        }
    });
}

void backward(Tape& tape, const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    }
    if (!loss.requires_grad()) return;  // nothing trainable feeds the loss
    Tensor seed = loss;
    seed.grad_buffer()[0] += 1.0;
    const auto& records = tape.records();
    for (auto it = records.rbegin(); it != records.rend(); ++it) {
        if (!it->output.requires_grad() || !it->output.has_grad()) continue;
        it->pull();
    }
}

double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double eps) {
    if (!(eps > 0.0)) {
        throw std::invalid_argument("finite_diff_check: eps must be positive");
    }
    Tensor probe = x.clone(true);
    Tape tape;
    Tensor out = f(tape, probe);
    if (out.size() != 1) {
        throw std::invalid_argument("finite_diff_check: f must return a scalar");
    }
    if (!std::isfinite(out.scalar_value())) {
        throw std::runtime_error("finite_diff_check: non-finite function value");
    }
    backward(tape, out);
    std::vector<double> g_ad(x.values().size(), 0.0);
    if (probe.has_grad()) g_ad = probe.grad();

    auto eval = [&f](const Tensor& point) {
        Tape t;
        const double v = f(t, point.clone(false)).scalar_value();
        if (!std::isfinite(v)) {
            throw std::runtime_error("finite_diff_check: non-finite function value");
        }
        return v;
    };

    double worst = 0.0;
    for (std::size_t i = 0; i < x.values().size(); ++i) {
        Tensor hi = x.clone(false);
        Tensor lo = x.clone(false);
        hi.mutable_values()[i] += eps;
        lo.mutable_values()[i] -= eps;
        const double g_fd = (eval(hi) - eval(lo)) / (2.0 * eps);
        if (!std::isfinite(g_fd)) {
            throw std::runtime_error("finite_diff_check: non-finite central difference");
        }
        const double err = std::abs(g_ad[i] - g_fd) / std::max(1.0, std::abs(g_fd));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace dualsam
