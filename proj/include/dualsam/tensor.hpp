#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

// Dense double-precision tensors with a reverse-mode differentiation tape.
// Every op is a free function that records itself on an explicit Tape; calling
// backward() on a scalar loss fills the .grad buffers of every tensor that
// requires gradients and is reachable from the loss.

namespace dualsam {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }

    const std::vector<double>& values() const { return node_->values; }
    double value_at(std::int64_t i) const { return node_->values[static_cast<std::size_t>(i)]; }
    double scalar_value() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad();

    // Deep copy of the values; the copy is a fresh leaf, off every tape.
    Tensor clone(bool requires_grad) const;
    // Same node identity (ops on copies of a Tensor see one shared buffer).
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Mutable access; used by ops, initializers and the optimizer. Tensors on
    // a tape must not be mutated after recording.
    std::vector<double>& mutable_values() { return node_->values; }
    std::vector<double>& grad_buffer();  // allocates zero-filled on first use

private:
    std::shared_ptr<detail::TensorNode> node_;
};

class Tape {
public:
    struct Record {
        std::string op;
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> pull;  // accumulates output.grad into input grads
    };

    Tensor record(std::string op, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> pull);
    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    const std::vector<Record>& records() const { return records_; }

private:
    std::vector<Record> records_;
};

// -- primitives ---------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor softmax(Tape& tape, const Tensor& x, int axis);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor gelu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
// Cross-correlation with zero padding, stride 1. x is [Cin,H,W], kernel is
// [Cout,Cin,kh,kw]; output [Cout, H + 2*padding - dilation*(kh-1), ...].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, int dilation = 1,
              int padding = 0);
Tensor global_avg_pool(Tape& tape, const Tensor& x);
// Bilinear 2x upsampling, half-pixel centers, clamped borders. [C,H,W] -> [C,2H,2W].
Tensor upsample2x(Tape& tape, const Tensor& x);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
// x + gate * p with a one-element gate tensor.
Tensor add_scaled(Tape& tape, const Tensor& x, const Tensor& p, const Tensor& gate);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
// y[c,h,w] = x[c,h,w] * s[c]
Tensor channel_scale(Tape& tape, const Tensor& x, const Tensor& s);
Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor transpose(Tape& tape, const Tensor& x);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor slice_cols(Tape& tape, const Tensor& x, int first, int count);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sum(Tape& tape, const Tensor& x);
// -sum(y*ln(p) + (1-y)*ln(1-p)) with p clamped to [1e-7, 1-1e-7]. The target
// never receives gradients.
Tensor bce_sum(Tape& tape, const Tensor& pred, const Tensor& target);

// -- differentiation ----------------------------------------------------

// loss must be a scalar recorded on this tape. Gradients accumulate
// additively across fan-out into every requires_grad tensor reachable
// from the loss.
void backward(Tape& tape, const Tensor& loss);

// Max over coordinates of |g_autodiff - g_central| / max(1, |g_central|),
// central differences with step eps. f must map x to a scalar on the tape
// it is given.
double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double eps);

}  // namespace dualsam
