#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// Ops record onto the innermost active Tape (a Wengert list: nodes are
// appended in execution order, so reverse iteration is reverse topological
// order). Backward rules are themselves expressed through recorded ops, so
// a tape can be differentiated again (gradient-of-gradient), which the MAML
// trainer relies on. Every op validates shapes and rejects non-finite
// outputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fewflow/errors.hpp"

namespace fewflow {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    // Index of the tape node that produced this tensor, -1 for leaves and
    // tensors computed with recording off.
    std::int64_t node_id = -1;
};

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor wrap(std::shared_ptr<TensorImpl> impl);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->values.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t ndim() const { return impl_->shape.size(); }
    bool is_scalar() const { return numel() == 1; }
    double item() const;

    const std::vector<double>& values() const { return impl_->values; }
    // Direct mutation is reserved for leaves (optimizer updates, buffer
    // loads); mutating a recorded intermediate would corrupt the tape.
    std::vector<double>& mutable_values();

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);
    std::int64_t node_id() const { return impl_->node_id; }

    // Value copy with no tape history.
    Tensor detach() const;
    // Deep copy preserving requires_grad, detached from any tape.
    Tensor clone() const;

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct TapeNode {
    const char* op = "";
    std::vector<Tensor> inputs;
    std::shared_ptr<TensorImpl> output;
    // Maps (d loss/d output, output) to per-input gradients. Implemented with
    // tensor ops so the backward pass can itself be recorded (create_graph).
    std::function<std::vector<Tensor>(const Tensor&, const Tensor&)> backward;
};

class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    std::int64_t record(TapeNode node);
    std::size_t node_count() const { return nodes_.size(); }

    // d(loss)/d(input) for each requested input; zeros for inputs the loss
    // does not depend on. With create_graph the backward pass is recorded,
    // so the returned gradients can be differentiated again.
    std::vector<Tensor> gradients(const Tensor& loss,
                                  const std::vector<Tensor>& inputs,
                                  bool create_graph = false);

private:
    std::vector<TapeNode> nodes_;
};

// Disables recording in scope (evaluation passes, first-order backward).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Convenience wrapper over Tape::gradients for a scalar loss.
std::vector<Tensor> backward(const Tensor& loss, const std::vector<Tensor>& params,
                             bool create_graph = false);

// Runs outer_loss_builder (which is expected to call backward/gradients with
// create_graph=true internally) and differentiates the resulting scalar with
// respect to params, including terms through the inner gradients.
std::vector<Tensor> higher_order_grad(const std::vector<Tensor>& params,
                                      const std::function<Tensor()>& outer_loss_builder);

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// 1/x with 0 mapped to 0; backs the zero-vector normalization rule.
Tensor reciprocal_or_zero(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a);  // 2-D
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);

Tensor sum(const Tensor& a);  // full reduction -> shape [1]
Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes, bool keepdims = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes, bool keepdims = false);

Tensor scalar_scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

struct Conv2dGeom {
    std::size_t kh = 1, kw = 1;
    std::size_t sh = 1, sw = 1;
    std::size_t pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;
};

// Patch matrix [B*OH*OW, C*kh*kw] of x [B,C,H,W]; zero padding.
Tensor im2col(const Tensor& x, const Conv2dGeom& g);
// Transpose scatter-add of im2col back to [B,C,H,W].
Tensor col2im(const Tensor& cols, const Shape& xshape, const Conv2dGeom& g);

// ---------------------------------------------------------------------------
// Composite ops (differentiable to the same order as the primitives)
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[B,d] w[d,c] b[c]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dGeom& g);

Tensor softmax(const Tensor& x);      // rows of [B,C]
Tensor log_softmax(const Tensor& x);  // rows of [B,C]
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor squared_error(const Tensor& a, const Tensor& b);  // mean over entries
Tensor l2_normalize(const Tensor& x);  // rows of [B,d] (1-D treated as one row)
Tensor euclidean_sq_dist(const Tensor& a, const Tensor& b);  // [n,d],[m,d] -> [n,m]
Tensor cosine_similarity(const Tensor& a, const Tensor& b);  // [n,d],[m,d] -> [n,m]

struct BatchNormState {
    // One entry per channel; running stats are plain buffers, never on tape.
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = 1e-5;
    double momentum = 0.1;
};

// x [B,C,H,W], gamma/beta [C]. Training mode normalizes with batch statistics
// (population variance) and updates the running buffers; eval mode uses the
// running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training);

// Constant helpers (never recorded).
Tensor row_max_detached(const Tensor& x);      // [B,C] -> [B,1]
Tensor one_hot(const std::vector<int>& labels, std::size_t classes);

Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace fewflow
