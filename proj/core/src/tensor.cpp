#include "fewflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace fewflow {

namespace {

thread_local std::vector<Tape*> g_tape_stack;
thread_local int g_no_grad_depth = 0;

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite output in op '") + op + "'");
        }
    }
}

using BackwardFn = std::function<std::vector<Tensor>(const Tensor&, const Tensor&)>;

// Builds the output tensor, runs the finiteness check, and records a tape
// node when recording is on and some input requires grad.
Tensor make_op(const char* op, Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs, BackwardFn backward_fn) {
    if (shape_numel(shape) != values.size()) {
        throw ContractError(std::string(op) + ": shape/value size mismatch");
    }
    check_finite(op, values);
    Tensor out(std::move(shape), std::move(values));
    bool needs = false;
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (needs && grad_enabled() && Tape::active() != nullptr) {
        out.set_requires_grad(true);
        TapeNode node;
        node.op = op;
        node.inputs = std::move(inputs);
        node.output = out.impl_ptr();
        node.backward = std::move(backward_fn);
        out.impl()->node_id = Tape::active()->record(std::move(node));
    }
    return out;
}

std::vector<std::size_t> contiguous_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    for (std::size_t d : shape) {
        if (d == 0) throw ContractError("tensor dims must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw ContractError("shape " + shape_str(shape) + " does not match " +
                            std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor({1}, {v}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->values[0];
}

std::vector<double>& Tensor::mutable_values() {
    if (impl_->node_id >= 0) {
        throw ContractError("mutating a tensor recorded on a tape");
    }
    return impl_->values;
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

Tensor Tensor::detach() const {
    return Tensor(impl_->shape, impl_->values, /*requires_grad=*/false);
}

Tensor Tensor::clone() const {
    return Tensor(impl_->shape, impl_->values, impl_->requires_grad);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
    if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() {
    return g_tape_stack.empty() ? nullptr : g_tape_stack.back();
}

std::int64_t Tape::record(TapeNode node) {
    nodes_.push_back(std::move(node));
    return static_cast<std::int64_t>(nodes_.size()) - 1;
}

std::vector<Tensor> Tape::gradients(const Tensor& loss, const std::vector<Tensor>& inputs,
                                    bool create_graph) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("gradients: loss must be a scalar of shape [1]");
    }
    if (loss.node_id() < 0) {
        throw ContractError("gradients: loss is not on a tape (recording was off?)");
    }

    std::unordered_map<TensorImpl*, Tensor> grads;
    grads.emplace(loss.impl(), Tensor::full({1}, 1.0));

    auto run = [&]() {
        // Nodes appended while recording the backward pass (create_graph) get
        // ids above the loss node and are intentionally not visited. nodes_
        // may reallocate during the loop, so copy each node out before use.
        for (std::int64_t id = loss.node_id(); id >= 0; --id) {
            BackwardFn bw;
            std::vector<Tensor> node_inputs;
            std::shared_ptr<TensorImpl> out_impl;
            const char* opname;
            {
                TapeNode& node = nodes_[static_cast<std::size_t>(id)];
                if (grads.find(node.output.get()) == grads.end()) continue;
                bw = node.backward;
                node_inputs = node.inputs;
                out_impl = node.output;
                opname = node.op;
            }
            Tensor gout = grads.find(out_impl.get())->second;
            std::vector<Tensor> gins = bw(gout, Tensor::wrap(out_impl));
            require(gins.size() == node_inputs.size(),
                    std::string("backward of '") + opname + "' returned wrong arity");
            for (std::size_t i = 0; i < gins.size(); ++i) {
                const Tensor& input = node_inputs[i];
                if (!input.requires_grad() || !gins[i].defined()) continue;
                auto at = grads.find(input.impl());
                if (at == grads.end()) {
                    grads.emplace(input.impl(), gins[i]);
                } else {
                    at->second = add(at->second, gins[i]);
                }
            }
        }
    };

    if (create_graph) {
        run();
    } else {
        NoGradGuard ng;
        run();
    }

    std::vector<Tensor> out;
    out.reserve(inputs.size());
    for (const Tensor& input : inputs) {
        auto it = grads.find(input.impl());
        if (it == grads.end()) {
            out.push_back(Tensor::zeros(input.shape()));
        } else {
            out.push_back(it->second);
        }
    }
    return out;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

std::vector<Tensor> backward(const Tensor& loss, const std::vector<Tensor>& params,
                             bool create_graph) {
    Tape* tape = Tape::active();
    if (tape == nullptr) throw ContractError("backward: no active tape");
    return tape->gradients(loss, params, create_graph);
}

std::vector<Tensor> higher_order_grad(const std::vector<Tensor>& params,
                                      const std::function<Tensor()>& outer_loss_builder) {
    Tensor outer = outer_loss_builder();
    if (!outer.defined() || outer.node_id() < 0) {
        throw ContractError("higher_order_grad: outer loss is not on a tape");
    }
    return backward(outer, params, /*create_graph=*/false);
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        std::size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ContractError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
    if (a.shape() == target) return a;
    const Shape& as = a.shape();
    require(as.size() <= target.size(),
            "broadcast_to: rank " + shape_str(as) + " -> " + shape_str(target));
    std::size_t off = target.size() - as.size();
    for (std::size_t i = 0; i < as.size(); ++i) {
        require(as[i] == target[off + i] || as[i] == 1,
                "broadcast_to: " + shape_str(as) + " -> " + shape_str(target));
    }

    // Expanded axes in target coordinates: leading axes plus size-1 axes.
    std::vector<std::size_t> expanded_axes;
    for (std::size_t i = 0; i < off; ++i) expanded_axes.push_back(i);
    for (std::size_t i = 0; i < as.size(); ++i) {
        if (as[i] == 1 && target[off + i] != 1) expanded_axes.push_back(off + i);
    }

    auto tstrides = contiguous_strides(target);
    auto astrides = contiguous_strides(as);
    std::vector<double> vals(shape_numel(target));
    for (std::size_t idx = 0; idx < vals.size(); ++idx) {
        std::size_t rem = idx, src = 0;
        for (std::size_t d = 0; d < target.size(); ++d) {
            std::size_t coord = rem / tstrides[d];
            rem %= tstrides[d];
            if (d >= off && as[d - off] != 1) src += coord * astrides[d - off];
        }
        vals[idx] = a.values()[src];
    }

    Shape ashape = as;
    return make_op("broadcast_to", target, std::move(vals), {a},
                   [ashape, expanded_axes](const Tensor& g, const Tensor&) {
                       Tensor r = sum(g, expanded_axes, /*keepdims=*/true);
                       return std::vector<Tensor>{reshape(r, ashape)};
                   });
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

namespace {

// make_bw receives the broadcast operands (the node's actual inputs) and
// returns the backward rule.
template <typename F, typename MakeBw>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, MakeBw make_bw) {
    Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    Tensor ab = broadcast_to(a, out_shape);
    Tensor bb = broadcast_to(b, out_shape);
    std::vector<double> vals(ab.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = f(ab.values()[i], bb.values()[i]);
    BackwardFn bw = make_bw(ab, bb);
    return make_op(op, std::move(out_shape), std::move(vals), {ab, bb}, std::move(bw));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](const Tensor&, const Tensor&) -> BackwardFn {
            return [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g, g}; };
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](const Tensor&, const Tensor&) -> BackwardFn {
            return [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g, neg(g)}; };
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](const Tensor& ab, const Tensor& bb) -> BackwardFn {
            return [ab, bb](const Tensor& g, const Tensor&) {
                return std::vector<Tensor>{mul(g, bb), mul(g, ab)};
            };
        });
}

Tensor divide(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](const Tensor& ab, const Tensor& bb) -> BackwardFn {
            return [ab, bb](const Tensor& g, const Tensor&) {
                Tensor ga = divide(g, bb);
                Tensor gb = neg(mul(ga, divide(ab, bb)));
                return std::vector<Tensor>{ga, gb};
            };
        });
}

Tensor neg(const Tensor& a) {
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = -a.values()[i];
    return make_op("neg", a.shape(), std::move(vals), {a},
                   [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{neg(g)}; });
}

Tensor exp_t(const Tensor& a) {
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = std::exp(a.values()[i]);
    return make_op("exp", a.shape(), std::move(vals), {a},
                   [](const Tensor& g, const Tensor& y) {
                       return std::vector<Tensor>{mul(g, y)};
                   });
}

Tensor log_t(const Tensor& a) {
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = std::log(a.values()[i]);
    Tensor a_cap = a;
    return make_op("log", a.shape(), std::move(vals), {a},
                   [a_cap](const Tensor& g, const Tensor&) {
                       return std::vector<Tensor>{divide(g, a_cap)};
                   });
}

Tensor sqrt_t(const Tensor& a) {
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = std::sqrt(a.values()[i]);
    return make_op("sqrt", a.shape(), std::move(vals), {a},
                   [](const Tensor& g, const Tensor& y) {
                       // d/dx sqrt = 0.5/sqrt(x); subgradient 0 at x == 0
                       Tensor inv = reciprocal_or_zero(y);
                       return std::vector<Tensor>{mul(g, scalar_scale(inv, 0.5))};
                   });
}

Tensor relu(const Tensor& a) {
    std::vector<double> vals(a.numel());
    std::vector<double> gate(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        bool pos = a.values()[i] > 0;
        vals[i] = pos ? a.values()[i] : 0.0;
        gate[i] = pos ? 1.0 : 0.0;
    }
    Tensor mask(a.shape(), std::move(gate));  // constant wrt differentiation
    return make_op("relu", a.shape(), std::move(vals), {a},
                   [mask](const Tensor& g, const Tensor&) {
                       return std::vector<Tensor>{mul(g, mask)};
                   });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        double x = a.values()[i];
        // overflow-safe in both tails
        vals[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return make_op("sigmoid", a.shape(), std::move(vals), {a},
                   [](const Tensor& g, const Tensor& y) {
                       Tensor one_minus = add_scalar(neg(y), 1.0);
                       return std::vector<Tensor>{mul(g, mul(y, one_minus))};
                   });
}

Tensor reciprocal_or_zero(const Tensor& a) {
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        double x = a.values()[i];
        vals[i] = x == 0.0 ? 0.0 : 1.0 / x;
    }
    return make_op("reciprocal_or_zero", a.shape(), std::move(vals), {a},
                   [](const Tensor& g, const Tensor& y) {
                       // d(1/x) = -1/x^2 = -y^2; zero entries stay zero
                       return std::vector<Tensor>{neg(mul(g, mul(y, y)))};
                   });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2,
            "matmul: expected 2-D operands, got " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    require(a.dim(1) == b.dim(0),
            "matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const double* A = a.values().data();
    const double* B = b.values().data();
    // ikj order keeps B accesses sequential; the j loop vectorizes
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = A + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = B + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Tensor a_cap = a, b_cap = b;
    return make_op("matmul", {m, n}, std::move(out), {a, b},
                   [a_cap, b_cap](const Tensor& g, const Tensor&) {
                       return std::vector<Tensor>{matmul(g, transpose(b_cap)),
                                                  matmul(transpose(a_cap), g)};
                   });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    require(shape_numel(shape) == a.numel(),
            "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes numel");
    Shape old = a.shape();
    return make_op("reshape", std::move(shape), a.values(), {a},
                   [old](const Tensor& g, const Tensor&) {
                       return std::vector<Tensor>{reshape(g, old)};
                   });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    require(axes.size() == a.ndim(), "permute: axes rank mismatch");
    std::vector<bool> seen(axes.size(), false);
    for (std::size_t ax : axes) {
        require(ax < axes.size() && !seen[ax], "permute: invalid axes");
        seen[ax] = true;
    }
    Shape out_shape(a.ndim());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.shape()[axes[i]];
    auto in_str = contiguous_strides(a.shape());
    auto out_str = contiguous_strides(out_shape);
    std::vector<double> vals(a.numel());
    for (std::size_t idx = 0; idx < vals.size(); ++idx) {
        std::size_t rem = idx, src = 0;
        for (std::size_t d = 0; d < out_shape.size(); ++d) {
            std::size_t coord = rem / out_str[d];
            rem %= out_str[d];
            src += coord * in_str[axes[d]];
        }
        vals[idx] = a.values()[src];
    }
    std::vector<std::size_t> inverse(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
    return make_op("permute", out_shape, std::move(vals), {a},
                   [inverse](const Tensor& g, const Tensor&) {
                       return std::vector<Tensor>{permute(g, inverse)};
                   });
}

Tensor transpose(const Tensor& a) {
    require(a.ndim() == 2, "transpose: expected 2-D, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

namespace {

// Embeds g into zeros of `shape` along `axis` at `start`; adjoint of narrow.
Tensor pad_narrow(const Tensor& g, const Shape& shape, std::size_t axis, std::size_t start) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    const std::size_t ax = shape[axis];
    const std::size_t len = g.shape()[axis];
    std::vector<double> vals(shape_numel(shape), 0.0);
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = g.values().data() + o * len * inner;
        std::copy(src, src + len * inner, vals.data() + (o * ax + start) * inner);
    }
    return make_op("pad_narrow", shape, std::move(vals), {g},
                   [axis, start, len](const Tensor& gg, const Tensor&) {
                       return std::vector<Tensor>{narrow(gg, axis, start, len)};
                   });
}

}  // namespace

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
    require(!xs.empty(), "concat: empty input list");
    const Shape s0 = xs[0].shape();
    require(axis < s0.size(), "concat: axis out of range");
    std::size_t total = 0;
    for (const Tensor& x : xs) {
        require(x.ndim() == s0.size(), "concat: rank mismatch");
        for (std::size_t d = 0; d < s0.size(); ++d) {
            require(d == axis || x.shape()[d] == s0[d], "concat: dim mismatch off-axis");
        }
        total += x.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<double> vals(shape_numel(out_shape));
    std::size_t off = 0;
    for (const Tensor& x : xs) {
        const std::size_t ax = x.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = x.values().data() + o * ax * inner;
            double* dst = vals.data() + (o * total + off) * inner;
            std::copy(src, src + ax * inner, dst);
        }
        off += ax;
    }

    std::vector<std::size_t> sizes;
    for (const Tensor& x : xs) sizes.push_back(x.shape()[axis]);
    return make_op("concat", out_shape, std::move(vals), xs,
                   [axis, sizes](const Tensor& g, const Tensor&) {
                       std::vector<Tensor> parts;
                       std::size_t start = 0;
                       for (std::size_t sz : sizes) {
                           parts.push_back(narrow(g, axis, start, sz));
                           start += sz;
                       }
                       return parts;
                   });
}

Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    require(axis < a.ndim(), "narrow: axis out of range");
    require(start + len <= a.shape()[axis], "narrow: window out of range");
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
    for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.shape()[d];
    const std::size_t ax = a.shape()[axis];
    std::vector<double> vals(shape_numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = a.values().data() + (o * ax + start) * inner;
        std::copy(src, src + len * inner, vals.data() + o * len * inner);
    }
    Shape ashape = a.shape();
    return make_op("narrow", out_shape, std::move(vals), {a},
                   [ashape, axis, start](const Tensor& g, const Tensor&) {
                       return std::vector<Tensor>{pad_narrow(g, ashape, axis, start)};
                   });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes, bool keepdims) {
    std::vector<bool> reduce(a.ndim(), false);
    for (std::size_t ax : axes) {
        require(ax < a.ndim(), "sum: axis out of range");
        reduce[ax] = true;
    }
    Shape kshape(a.ndim());
    for (std::size_t d = 0; d < a.ndim(); ++d) kshape[d] = reduce[d] ? 1 : a.shape()[d];
    auto in_str = contiguous_strides(a.shape());
    auto k_str = contiguous_strides(kshape);
    std::vector<double> vals(shape_numel(kshape), 0.0);
    for (std::size_t idx = 0; idx < a.numel(); ++idx) {
        std::size_t rem = idx, dst = 0;
        for (std::size_t d = 0; d < a.ndim(); ++d) {
            std::size_t coord = rem / in_str[d];
            rem %= in_str[d];
            if (!reduce[d]) dst += coord * k_str[d];
        }
        vals[dst] += a.values()[idx];
    }
    Shape ashape = a.shape();
    Tensor out = make_op("sum", kshape, std::move(vals), {a},
                         [ashape, kshape](const Tensor& g, const Tensor&) {
                             return std::vector<Tensor>{
                                 broadcast_to(reshape(g, kshape), ashape)};
                         });
    if (keepdims) return out;
    Shape squeezed;
    for (std::size_t d = 0; d < a.ndim(); ++d) {
        if (!reduce[d]) squeezed.push_back(a.shape()[d]);
    }
    if (squeezed.empty()) squeezed = {1};
    return reshape(out, squeezed);
}

Tensor sum(const Tensor& a) {
    std::vector<std::size_t> axes(a.ndim());
    std::iota(axes.begin(), axes.end(), 0);
    return sum(a, axes, /*keepdims=*/false);
}

Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes, bool keepdims) {
    std::size_t n = 1;
    for (std::size_t ax : axes) n *= a.shape().at(ax);
    return scalar_scale(sum(a, axes, keepdims), 1.0 / static_cast<double>(n));
}

Tensor mean(const Tensor& a) {
    return scalar_scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor scalar_scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw NumericError("scalar_scale: non-finite scale");
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = a.values()[i] * c;
    return make_op("scalar_scale", a.shape(), std::move(vals), {a},
                   [c](const Tensor& g, const Tensor&) {
                       return std::vector<Tensor>{scalar_scale(g, c)};
                   });
}

Tensor add_scalar(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw NumericError("add_scalar: non-finite addend");
    std::vector<double> vals(a.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = a.values()[i] + c;
    return make_op("add_scalar", a.shape(), std::move(vals), {a},
                   [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g}; });
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

namespace {

struct ColGeom {
    std::size_t B, C, H, W, OH, OW;
};

ColGeom col_geom(const Shape& xshape, const Conv2dGeom& g) {
    ColGeom cg;
    cg.B = xshape[0];
    cg.C = xshape[1];
    cg.H = xshape[2];
    cg.W = xshape[3];
    const std::size_t eh = cg.H + g.pad_top + g.pad_bottom;
    const std::size_t ew = cg.W + g.pad_left + g.pad_right;
    require(eh >= g.kh && ew >= g.kw, "conv: kernel larger than padded input");
    require(g.sh > 0 && g.sw > 0, "conv: stride must be positive");
    cg.OH = (eh - g.kh) / g.sh + 1;
    cg.OW = (ew - g.kw) / g.sw + 1;
    return cg;
}

}  // namespace

Tensor im2col(const Tensor& x, const Conv2dGeom& g) {
    require(x.ndim() == 4, "im2col: expected [B,C,H,W], got " + shape_str(x.shape()));
    ColGeom cg = col_geom(x.shape(), g);
    const std::size_t cols = cg.C * g.kh * g.kw;
    std::vector<double> vals(cg.B * cg.OH * cg.OW * cols, 0.0);
    const double* X = x.values().data();
    for (std::size_t b = 0; b < cg.B; ++b) {
        for (std::size_t oh = 0; oh < cg.OH; ++oh) {
            for (std::size_t ow = 0; ow < cg.OW; ++ow) {
                double* row = vals.data() + ((b * cg.OH + oh) * cg.OW + ow) * cols;
                for (std::size_t c = 0; c < cg.C; ++c) {
                    for (std::size_t i = 0; i < g.kh; ++i) {
                        const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * g.sh + i) -
                                                 static_cast<std::ptrdiff_t>(g.pad_top);
                        if (h < 0 || h >= static_cast<std::ptrdiff_t>(cg.H)) continue;
                        for (std::size_t j = 0; j < g.kw; ++j) {
                            const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * g.sw + j) -
                                                     static_cast<std::ptrdiff_t>(g.pad_left);
                            if (w < 0 || w >= static_cast<std::ptrdiff_t>(cg.W)) continue;
                            row[(c * g.kh + i) * g.kw + j] =
                                X[((b * cg.C + c) * cg.H + h) * cg.W + w];
                        }
                    }
                }
            }
        }
    }
    Shape xshape = x.shape();
    Conv2dGeom geom = g;
    return make_op("im2col", {cg.B * cg.OH * cg.OW, cols}, std::move(vals), {x},
                   [xshape, geom](const Tensor& grad, const Tensor&) {
                       return std::vector<Tensor>{col2im(grad, xshape, geom)};
                   });
}

Tensor col2im(const Tensor& cols_t, const Shape& xshape, const Conv2dGeom& g) {
    require(cols_t.ndim() == 2, "col2im: expected patch matrix");
    ColGeom cg = col_geom(xshape, g);
    const std::size_t cols = cg.C * g.kh * g.kw;
    require(cols_t.dim(0) == cg.B * cg.OH * cg.OW && cols_t.dim(1) == cols,
            "col2im: patch matrix shape mismatch");
    std::vector<double> vals(shape_numel(xshape), 0.0);
    const double* S = cols_t.values().data();
    for (std::size_t b = 0; b < cg.B; ++b) {
        for (std::size_t oh = 0; oh < cg.OH; ++oh) {
            for (std::size_t ow = 0; ow < cg.OW; ++ow) {
                const double* row = S + ((b * cg.OH + oh) * cg.OW + ow) * cols;
                for (std::size_t c = 0; c < cg.C; ++c) {
                    for (std::size_t i = 0; i < g.kh; ++i) {
                        const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * g.sh + i) -
                                                 static_cast<std::ptrdiff_t>(g.pad_top);
                        if (h < 0 || h >= static_cast<std::ptrdiff_t>(cg.H)) continue;
                        for (std::size_t j = 0; j < g.kw; ++j) {
                            const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * g.sw + j) -
                                                     static_cast<std::ptrdiff_t>(g.pad_left);
                            if (w < 0 || w >= static_cast<std::ptrdiff_t>(cg.W)) continue;
                            vals[((b * cg.C + c) * cg.H + h) * cg.W + w] +=
                                row[(c * g.kh + i) * g.kw + j];
                        }
                    }
                }
            }
        }
    }
    Conv2dGeom geom = g;
    Shape xs = xshape;
    return make_op("col2im", xs, std::move(vals), {cols_t},
                   [geom](const Tensor& grad, const Tensor&) {
                       return std::vector<Tensor>{im2col(grad, geom)};
                   });
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dGeom& g) {
    require(w.ndim() == 4, "conv2d: weight must be [K,C,kh,kw]");
    require(x.ndim() == 4, "conv2d: input must be [B,C,H,W]");
    require(w.dim(1) == x.dim(1), "conv2d: channel mismatch");
    require(w.dim(2) == g.kh && w.dim(3) == g.kw, "conv2d: weight/geometry mismatch");
    const std::size_t K = w.dim(0);
    ColGeom cg = col_geom(x.shape(), g);
    Tensor cols = im2col(x, g);                             // [B*OH*OW, C*kh*kw]
    Tensor wmat = reshape(w, {K, w.dim(1) * g.kh * g.kw});  // [K, C*kh*kw]
    Tensor out = add(matmul(cols, transpose(wmat)), b);     // [B*OH*OW, K]
    out = reshape(out, {cg.B, cg.OH, cg.OW, K});
    return permute(out, {0, 3, 1, 2});  // [B,K,OH,OW]
}

Tensor row_max_detached(const Tensor& x) {
    require(x.ndim() == 2, "row_max: expected [B,C]");
    const std::size_t B = x.dim(0), C = x.dim(1);
    std::vector<double> vals(B);
    for (std::size_t i = 0; i < B; ++i) {
        double m = x.values()[i * C];
        for (std::size_t j = 1; j < C; ++j) m = std::max(m, x.values()[i * C + j]);
        vals[i] = m;
    }
    return Tensor({B, 1}, std::move(vals));
}

Tensor softmax(const Tensor& x) {
    require(x.ndim() == 2, "softmax: expected [B,C]");
    // constant max shift keeps exp in range without changing the result
    Tensor shifted = sub(x, row_max_detached(x));
    Tensor e = exp_t(shifted);
    Tensor denom = sum(e, {1}, /*keepdims=*/true);
    return divide(e, denom);
}

Tensor log_softmax(const Tensor& x) {
    require(x.ndim() == 2, "log_softmax: expected [B,C]");
    Tensor shifted = sub(x, row_max_detached(x));
    Tensor lse = log_t(sum(exp_t(shifted), {1}, /*keepdims=*/true));
    return sub(shifted, lse);
}

Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
    std::vector<double> vals(labels.size() * classes, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
            throw ContractError("one_hot: label " + std::to_string(labels[i]) +
                                " out of range for " + std::to_string(classes) + " classes");
        }
        vals[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return Tensor({labels.size(), classes}, std::move(vals));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require(logits.ndim() == 2, "cross_entropy: expected [B,C] logits");
    require(logits.dim(0) == labels.size(), "cross_entropy: batch/label count mismatch");
    Tensor ls = log_softmax(logits);
    Tensor picked = sum(mul(ls, one_hot(labels, logits.dim(1))));
    return scalar_scale(neg(picked), 1.0 / static_cast<double>(labels.size()));
}

Tensor squared_error(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean(mul(d, d));
}

Tensor l2_normalize(const Tensor& x) {
    require(x.ndim() == 1 || x.ndim() == 2, "l2_normalize: expected vector or [B,d]");
    Tensor rows = x.ndim() == 1 ? reshape(x, {1, x.numel()}) : x;
    Tensor norms = sqrt_t(sum(mul(rows, rows), {1}, /*keepdims=*/true));
    // zero rows stay zero (and receive zero gradient)
    Tensor out = mul(rows, reciprocal_or_zero(norms));
    return x.ndim() == 1 ? reshape(out, x.shape()) : out;
}

Tensor euclidean_sq_dist(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
            "euclidean_sq_dist: expected [n,d] and [m,d]");
    Tensor a2 = sum(mul(a, a), {1}, /*keepdims=*/true);                          // [n,1]
    Tensor b2 = reshape(sum(mul(b, b), {1}, /*keepdims=*/true), {1, b.dim(0)});  // [1,m]
    Tensor cross = scalar_scale(matmul(a, transpose(b)), -2.0);
    Tensor out = add(add(cross, a2), b2);
    // clamp the tiny negative rounding noise of coincident rows
    return relu(out);
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
            "cosine_similarity: expected [n,d] and [m,d]");
    return matmul(l2_normalize(a), transpose(l2_normalize(b)));
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training) {
    require(x.ndim() == 4, "batch_norm: expected [B,C,H,W]");
    const std::size_t C = x.dim(1);
    require(gamma.numel() == C && beta.numel() == C, "batch_norm: gamma/beta size mismatch");
    if (state.running_mean.empty()) {
        state.running_mean.assign(C, 0.0);
        state.running_var.assign(C, 1.0);
    }
    require(state.running_mean.size() == C, "batch_norm: state channel mismatch");

    Tensor g4 = reshape(gamma, {1, C, 1, 1});
    Tensor b4 = reshape(beta, {1, C, 1, 1});

    if (training) {
        Tensor mu = mean(x, {0, 2, 3}, /*keepdims=*/true);  // [1,C,1,1]
        Tensor centered = sub(x, mu);
        Tensor var = mean(mul(centered, centered), {0, 2, 3}, /*keepdims=*/true);
        Tensor denom = sqrt_t(add_scalar(var, state.eps));
        Tensor xhat = divide(centered, denom);
        for (std::size_t c = 0; c < C; ++c) {
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] +
                                    state.momentum * mu.values()[c];
            state.running_var[c] =
                (1.0 - state.momentum) * state.running_var[c] + state.momentum * var.values()[c];
        }
        return add(mul(xhat, g4), b4);
    }

    std::vector<double> mu_v = state.running_mean;
    std::vector<double> sd_v(C);
    for (std::size_t c = 0; c < C; ++c) sd_v[c] = std::sqrt(state.running_var[c] + state.eps);
    Tensor mu({1, C, 1, 1}, std::move(mu_v));
    Tensor sd({1, C, 1, 1}, std::move(sd_v));
    Tensor xhat = divide(sub(x, mu), sd);
    return add(mul(xhat, g4), b4);
}

}  // namespace fewflow
