#include "unionret/ndgrad.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "unionret/errors.hpp"

namespace unionret::nd {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void TensorNode::accumulate(std::span<const double> g) {
    auto buf = grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

std::span<double> TensorNode::grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    grad_live = true;
    return grad;
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 3) {
        throw ValidationError("tensor rank must be 1..3, got shape " + shape_string(shape));
    }
    for (auto d : shape) {
        if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_string(shape));
    }
}

[[maybe_unused]] void check_finite(const Tensor& t, std::string_view op) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw ValidationError("non-finite value produced by " + std::string(op));
        }
    }
}

inline void debug_check([[maybe_unused]] const Tensor& t, [[maybe_unused]] std::string_view op) {
#ifndef NDEBUG
    check_finite(t, op);
#endif
}

void require_same_shape(const Tensor& x, const Tensor& y, std::string_view op) {
    if (x.shape() != y.shape()) {
        throw ValidationError(std::string(op) + ": shape mismatch " + shape_string(x.shape()) + " vs " +
                              shape_string(y.shape()));
    }
}

// Grad slot of an input if it participates in backward, else nullptr.
double* grad_of(const Tensor& t) {
    if (!t.requires_grad()) return nullptr;
    return t.node().grad_buffer().data();
}

} // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape(shape);
    auto node = std::make_shared<TensorNode>();
    node->value.assign(nd::numel(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (values.size() != nd::numel(shape)) {
        throw ValidationError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_string(shape));
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

double Tensor::item() const {
    if (numel() != 1) throw ValidationError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

std::vector<double> Tensor::grad_or_zeros() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return std::vector<double>(node_->value.size(), 0.0);
}

void Tensor::zero_grad() {
    node_->grad.clear();
    node_->grad_live = false;
}

Tensor Tape::make_output(Shape shape, std::span<const Tensor> inputs) const {
    auto t = Tensor::zeros(std::move(shape));
    if (recording_) {
        t.node_->requires_grad =
            std::any_of(inputs.begin(), inputs.end(), [](const Tensor& in) { return in.requires_grad(); });
    }
    t.node_->is_leaf = false;
    return t;
}

void Tape::record(std::string_view name, const Tensor& output, std::vector<Tensor> inputs,
                  std::function<void()> backward) {
    if (!recording_ || !output.requires_grad()) return;
    Op op;
    op.name = std::string(name);
    op.output = output.handle();
    op.inputs.reserve(inputs.size());
    for (auto& in : inputs) op.inputs.push_back(in.handle());
    op.backward = std::move(backward);
    ops_.push_back(std::move(op));
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ValidationError("backward: loss must be a scalar tensor");
    }
    if (ops_.empty()) {
        throw ValidationError("backward: tape is empty");
    }
    for (auto& op : ops_) {
        op.output->grad.assign(op.output->value.size(), 0.0);
        op.output->grad_live = false;
    }
    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        if (it->output->grad_live) it->backward();
    }
}

// ---------------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ValidationError("matmul: operands must be rank 2 or 3, got " + shape_string(a.shape()) + " and " +
                              shape_string(b.shape()));
    }
    const std::size_t ba = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t bb = b.rank() == 3 ? b.dim(0) : 1;
    const std::size_t m = a.dim(a.rank() - 2);
    const std::size_t k = a.dim(a.rank() - 1);
    const std::size_t k2 = b.dim(b.rank() - 2);
    const std::size_t n = b.dim(b.rank() - 1);
    if (k != k2 || (ba != bb && ba != 1 && bb != 1)) {
        throw ValidationError("matmul: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    const std::size_t batch = std::max(ba, bb);
    Shape out_shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, m, n} : Shape{m, n};
    Tensor out = tape.make_output(out_shape, std::array{a, b});

    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out.data().data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* Ab = A + (ba == 1 ? 0 : bi) * m * k;
        const double* Bb = B + (bb == 1 ? 0 : bi) * k * n;
        double* Cb = C + bi * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double av = Ab[i * k + p];
                const double* brow = Bb + p * n;
                double* crow = Cb + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    debug_check(out, "matmul");

    tape.record("matmul", out, {a, b}, [a, b, out, ba, bb, batch, m, k, n] {
        const double* dC = out.node().grad.data();
        double* dA = grad_of(a);
        double* dB = grad_of(b);
        const double* A = a.data().data();
        const double* B = b.data().data();
        for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* Ab = A + (ba == 1 ? 0 : bi) * m * k;
            const double* Bb = B + (bb == 1 ? 0 : bi) * k * n;
            const double* dCb = dC + bi * m * n;
            if (dA) {
                double* dAb = dA + (ba == 1 ? 0 : bi) * m * k;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += dCb[i * n + j] * Bb[p * n + j];
                        dAb[i * k + p] += s;
                    }
                }
            }
            if (dB) {
                double* dBb = dB + (bb == 1 ? 0 : bi) * k * n;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = Ab[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) dBb[p * n + j] += av * dCb[i * n + j];
                    }
                }
            }
        }
    });
    return out;
}

Tensor add(Tape& tape, const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "add");
    Tensor out = tape.make_output(x.shape(), std::array{x, y});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] + y.data()[i];
    debug_check(out, "add");
    tape.record("add", out, {x, y}, [x, y, out] {
        auto g = out.grad();
        if (x.requires_grad()) x.node().accumulate(g);
        if (y.requires_grad()) y.node().accumulate(g);
    });
    return out;
}

Tensor add(Tape& tape, const Tensor& x, double y) {
    Tensor out = tape.make_output(x.shape(), std::array{x});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] + y;
    debug_check(out, "add_scalar");
    tape.record("add_scalar", out, {x}, [x, out] { x.node().accumulate(out.grad()); });
    return out;
}

Tensor sub(Tape& tape, const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "sub");
    Tensor out = tape.make_output(x.shape(), std::array{x, y});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] - y.data()[i];
    debug_check(out, "sub");
    tape.record("sub", out, {x, y}, [x, y, out] {
        auto g = out.grad();
        if (x.requires_grad()) x.node().accumulate(g);
        if (double* dy = grad_of(y)) {
            for (std::size_t i = 0; i < g.size(); ++i) dy[i] -= g[i];
        }
    });
    return out;
}

Tensor mul(Tape& tape, const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "mul");
    Tensor out = tape.make_output(x.shape(), std::array{x, y});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] * y.data()[i];
    debug_check(out, "mul");
    tape.record("mul", out, {x, y}, [x, y, out] {
        auto g = out.grad();
        if (double* dx = grad_of(x)) {
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y.data()[i];
        }
        if (double* dy = grad_of(y)) {
            for (std::size_t i = 0; i < g.size(); ++i) dy[i] += g[i] * x.data()[i];
        }
    });
    return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
    Tensor out = tape.make_output(x.shape(), std::array{x});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] * factor;
    debug_check(out, "scale");
    tape.record("scale", out, {x}, [x, out, factor] {
        auto g = out.grad();
        double* dx = grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
    });
    return out;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    Tensor out = tape.make_output(x.shape(), std::array{x});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double v = x.data()[i];
        if (v >= 0.0) {
            o[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            o[i] = e / (1.0 + e);
        }
    }
    debug_check(out, "sigmoid");
    tape.record("sigmoid", out, {x}, [x, out] {
        auto g = out.grad();
        auto s = out.data();
        double* dx = grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * s[i] * (1.0 - s[i]);
    });
    return out;
}

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Tensor gelu(Tape& tape, const Tensor& x) {
    Tensor out = tape.make_output(x.shape(), std::array{x});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double v = x.data()[i];
        o[i] = v * normal_cdf(v);
    }
    debug_check(out, "gelu");
    tape.record("gelu", out, {x}, [x, out] {
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        auto g = out.grad();
        double* dx = grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x.data()[i];
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            dx[i] += g[i] * (normal_cdf(v) + v * pdf);
        }
    });
    return out;
}

Tensor add_trailing(Tape& tape, const Tensor& x, const Tensor& y) {
    const auto& xs = x.shape();
    const auto& ys = y.shape();
    if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin())) {
        throw ValidationError("add_trailing: " + shape_string(ys) + " is not a suffix of " + shape_string(xs));
    }
    Tensor out = tape.make_output(xs, std::array{x, y});
    const std::size_t inner = y.numel();
    const std::size_t reps = x.numel() / inner;
    auto o = out.data();
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < inner; ++i) o[r * inner + i] = x.data()[r * inner + i] + y.data()[i];
    }
    debug_check(out, "add_trailing");
    tape.record("add_trailing", out, {x, y}, [x, y, out, inner, reps] {
        auto g = out.grad();
        if (x.requires_grad()) x.node().accumulate(g);
        if (double* dy = grad_of(y)) {
            for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t i = 0; i < inner; ++i) dy[i] += g[r * inner + i];
            }
        }
    });
    return out;
}

Tensor lerp(Tape& tape, const Tensor& from, const Tensor& to, const Tensor& weight) {
    require_same_shape(from, to, "lerp");
    require_same_shape(from, weight, "lerp");
    Tensor out = tape.make_output(from.shape(), std::array{from, to, weight});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = std::lerp(from.data()[i], to.data()[i], weight.data()[i]);
    }
    debug_check(out, "lerp");
    tape.record("lerp", out, {from, to, weight}, [from, to, weight, out] {
        auto g = out.grad();
        auto w = weight.data();
        double* dfrom = grad_of(from);
        double* dto = grad_of(to);
        double* dw = grad_of(weight);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (dfrom) dfrom[i] += g[i] * (1.0 - w[i]);
            if (dto) dto[i] += g[i] * w[i];
            if (dw) dw[i] += g[i] * (to.data()[i] - from.data()[i]);
        }
    });
    return out;
}

Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    Tensor out = tape.make_output(x.shape(), std::array{x});
    auto o = out.data();
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = in.data() + r * n;
        double* yr = o.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
    }
    debug_check(out, "softmax");
    tape.record("softmax", out, {x}, [x, out, n, rows] {
        auto g = out.grad();
        auto y = out.data();
        double* dx = grad_of(x);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
    });
    return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.shape().back();
    if (d < 2) throw ValidationError("layer_norm: last dimension must be >= 2");
    if (!(eps > 0.0)) throw ValidationError("layer_norm: eps must be > 0");
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ValidationError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
    }
    const std::size_t rows = x.numel() / d;
    Tensor out = tape.make_output(x.shape(), std::array{x, gamma, beta});
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    auto o = out.data();
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = in.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * rs;
            (*xhat)[r * d + j] = h;
            o[r * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    debug_check(out, "layer_norm");
    tape.record("layer_norm", out, {x, gamma, beta}, [x, gamma, beta, out, xhat, rstd, d, rows] {
        auto g = out.grad();
        double* dx = grad_of(x);
        double* dgamma = grad_of(gamma);
        double* dbeta = grad_of(beta);
        const auto gm = gamma.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * d;
            const double* hr = xhat->data() + r * d;
            if (dgamma || dbeta) {
                for (std::size_t j = 0; j < d; ++j) {
                    if (dgamma) dgamma[j] += gr[j] * hr[j];
                    if (dbeta) dbeta[j] += gr[j];
                }
            }
            if (dx) {
                double mean_dh = 0.0;
                double mean_dh_h = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dh = gr[j] * gm[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                }
                mean_dh /= static_cast<double>(d);
                mean_dh_h /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dh = gr[j] * gm[j];
                    dx[r * d + j] += (*rstd)[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
        }
    });
    return out;
}

Tensor reduce_mean(Tape& tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ValidationError("reduce_mean: axis " + std::to_string(axis) + " invalid for shape " +
                              shape_string(x.shape()));
    }
    const auto& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != axis) out_shape.push_back(s[i]);
    }
    if (out_shape.empty()) out_shape = {1};
    Tensor out = tape.make_output(out_shape, std::array{x});
    auto o = out.data();
    auto in = x.data();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
            double sum = 0.0;
            for (std::size_t k = 0; k < n; ++k) sum += in[(a * n + k) * inner + c];
            o[a * inner + c] = sum * inv;
        }
    }
    debug_check(out, "reduce_mean");
    tape.record("reduce_mean", out, {x}, [x, out, outer, inner, n, inv] {
        auto g = out.grad();
        double* dx = grad_of(x);
        for (std::size_t a = 0; a < outer; ++a) {
            for (std::size_t k = 0; k < n; ++k) {
                for (std::size_t c = 0; c < inner; ++c) dx[(a * n + k) * inner + c] += g[a * inner + c] * inv;
            }
        }
    });
    return out;
}

Tensor reduce_sum(Tape& tape, const Tensor& x) {
    Tensor out = tape.make_output({1}, std::array{x});
    double sum = 0.0;
    for (double v : x.data()) sum += v;
    out.data()[0] = sum;
    debug_check(out, "reduce_sum");
    tape.record("reduce_sum", out, {x}, [x, out] {
        const double g = out.grad()[0];
        double* dx = grad_of(x);
        for (std::size_t i = 0; i < x.numel(); ++i) dx[i] += g;
    });
    return out;
}

Tensor transpose_last2(Tape& tape, const Tensor& x) {
    if (x.rank() < 2) throw ValidationError("transpose_last2: rank must be >= 2");
    Shape s = x.shape();
    const std::size_t m = s[s.size() - 2];
    const std::size_t n = s[s.size() - 1];
    std::swap(s[s.size() - 2], s[s.size() - 1]);
    const std::size_t batch = x.numel() / (m * n);
    Tensor out = tape.make_output(s, std::array{x});
    auto o = out.data();
    auto in = x.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) o[b * m * n + j * m + i] = in[b * m * n + i * n + j];
        }
    }
    tape.record("transpose", out, {x}, [x, out, batch, m, n] {
        auto g = out.grad();
        double* dx = grad_of(x);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) dx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
            }
        }
    });
    return out;
}

Tensor slice_lastdim(Tape& tape, const Tensor& x, std::size_t offset, std::size_t length) {
    const std::size_t d = x.shape().back();
    if (length == 0 || offset + length > d) {
        throw ValidationError("slice_lastdim: range out of bounds");
    }
    Shape s = x.shape();
    s.back() = length;
    const std::size_t rows = x.numel() / d;
    Tensor out = tape.make_output(s, std::array{x});
    auto o = out.data();
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(in.data() + r * d + offset, length, o.data() + r * length);
    }
    tape.record("slice", out, {x}, [x, out, rows, d, offset, length] {
        auto g = out.grad();
        double* dx = grad_of(x);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < length; ++j) dx[r * d + offset + j] += g[r * length + j];
        }
    });
    return out;
}

Tensor concat_lastdim(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ValidationError("concat_lastdim: no inputs");
    Shape s = parts[0].shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != s.size() || !std::equal(s.begin(), s.end() - 1, p.shape().begin())) {
            throw ValidationError("concat_lastdim: leading dimensions differ");
        }
        total += p.shape().back();
    }
    const std::size_t rows = parts[0].numel() / parts[0].shape().back();
    s.back() = total;
    Tensor out = tape.make_output(s, parts);
    auto o = out.data();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape().back();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p.data().data() + r * w, w, o.data() + r * total + offset);
        }
        offset += w;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape.record("concat", out, inputs, [inputs, out, rows, total] {
        auto g = out.grad();
        std::size_t offset = 0;
        for (const auto& p : inputs) {
            const std::size_t w = p.shape().back();
            if (double* dp = grad_of(p)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < w; ++j) dp[r * w + j] += g[r * total + offset + j];
                }
            }
            offset += w;
        }
    });
    return out;
}

Tensor stack_tokens(Tape& tape, std::span<const Tensor> rows) {
    if (rows.empty()) throw ValidationError("stack_tokens: no inputs");
    const Shape& s0 = rows[0].shape();
    if (s0.size() != 2) throw ValidationError("stack_tokens: inputs must be [B,D]");
    for (const auto& r : rows) {
        if (r.shape() != s0) throw ValidationError("stack_tokens: inputs must share one shape");
    }
    const std::size_t b = s0[0], d = s0[1], t = rows.size();
    Tensor out = tape.make_output({b, t, d}, rows);
    auto o = out.data();
    for (std::size_t k = 0; k < t; ++k) {
        auto in = rows[k].data();
        for (std::size_t i = 0; i < b; ++i) std::copy_n(in.data() + i * d, d, o.data() + (i * t + k) * d);
    }
    std::vector<Tensor> inputs(rows.begin(), rows.end());
    tape.record("stack_tokens", out, inputs, [inputs, out, b, t, d] {
        auto g = out.grad();
        for (std::size_t k = 0; k < t; ++k) {
            if (double* dr = grad_of(inputs[k])) {
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t j = 0; j < d; ++j) dr[i * d + j] += g[(i * t + k) * d + j];
                }
            }
        }
    });
    return out;
}

Tensor select_token(Tape& tape, const Tensor& x, std::size_t t) {
    if (x.rank() != 3 || t >= x.dim(1)) throw ValidationError("select_token: expected [B,T,D] with t < T");
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    Tensor out = tape.make_output({b, d}, std::array{x});
    auto o = out.data();
    for (std::size_t i = 0; i < b; ++i) std::copy_n(x.data().data() + (i * n + t) * d, d, o.data() + i * d);
    tape.record("select_token", out, {x}, [x, out, b, n, d, t] {
        auto g = out.grad();
        double* dx = grad_of(x);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < d; ++j) dx[(i * n + t) * d + j] += g[i * d + j];
        }
    });
    return out;
}

Tensor l2_normalize_rows(Tape& tape, const Tensor& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    Tensor out = tape.make_output(x.shape(), std::array{x});
    auto norms = std::make_shared<std::vector<double>>(rows);
    auto o = out.data();
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += in[r * d + j] * in[r * d + j];
        const double nrm = std::sqrt(sq);
        if (!(nrm > 0.0) || !std::isfinite(nrm)) {
            throw ValidationError("l2_normalize_rows: row " + std::to_string(r) + " has zero or non-finite norm");
        }
        (*norms)[r] = nrm;
        for (std::size_t j = 0; j < d; ++j) o[r * d + j] = in[r * d + j] / nrm;
    }
    tape.record("l2_normalize_rows", out, {x}, [x, out, norms, rows, d] {
        auto g = out.grad();
        auto y = out.data();
        double* dx = grad_of(x);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
            for (std::size_t j = 0; j < d; ++j) {
                dx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / (*norms)[r];
            }
        }
    });
    return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2) throw ValidationError("softmax_cross_entropy: logits must be [B,C]");
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b) throw ValidationError("softmax_cross_entropy: one label per row required");
    for (auto l : labels) {
        if (l >= c) throw ValidationError("softmax_cross_entropy: label out of range");
    }
    Tensor out = tape.make_output({1}, std::array{logits});
    auto probs = std::make_shared<std::vector<double>>(b * c);
    auto in = logits.data();
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = in.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        total += lse - row[labels[i]];
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
    }
    out.data()[0] = total / static_cast<double>(b);
    debug_check(out, "softmax_cross_entropy");
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    tape.record("softmax_cross_entropy", out, {logits}, [logits, out, probs, lab, b, c] {
        const double g = out.grad()[0] / static_cast<double>(b);
        double* dx = grad_of(logits);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                dx[i * c + j] += g * ((*probs)[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

} // namespace unionret::nd
