#include "gren/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "gren/rng.hpp"

namespace gren {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool consumed = false;
    std::string op;  // empty for leaves
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // owns captured parent pointers

    bool is_leaf() const { return op.empty(); }
    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

using detail::Node;

namespace {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor shapes may not have zero dims");
        n *= d;
    }
    return n;
}

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

std::shared_ptr<Node> make_interior(Shape shape, std::vector<double> data, std::string op,
                                    std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = std::move(op);
    n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [](const auto& p) { return p->requires_grad; });
    n->parents = std::move(parents);
    return n;
}

const std::shared_ptr<Node>& checked(const Tensor& t, const char* op) {
    if (!t.defined()) throw std::logic_error(std::string(op) + ": undefined tensor");
    return t.node();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

}  // namespace

// ---- Tensor basics ---------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_size(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_size(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_size(shape) != data.size()) {
        throw std::invalid_argument("from_data: shape does not match data length");
    }
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(*this, "shape")->shape; }
std::size_t Tensor::size() const { return checked(*this, "size")->size(); }
bool Tensor::is_leaf() const { return checked(*this, "is_leaf")->is_leaf(); }
bool Tensor::requires_grad() const { return checked(*this, "requires_grad")->requires_grad; }

std::span<const double> Tensor::data() const {
    const auto& n = checked(*this, "data");
    return {n->data.data(), n->data.size()};
}

std::span<double> Tensor::mutable_data() {
    const auto& n = checked(*this, "mutable_data");
    if (!n->is_leaf()) throw std::logic_error("mutable_data: only leaves are mutable");
    return {n->data.data(), n->data.size()};
}

bool Tensor::has_grad() const { return !checked(*this, "has_grad")->grad.empty(); }

std::span<const double> Tensor::grad() const {
    const auto& n = checked(*this, "grad");
    if (n->grad.empty()) throw std::logic_error("grad: no gradient accumulated");
    return {n->grad.data(), n->grad.size()};
}

void Tensor::zero_grad() { checked(*this, "zero_grad")->grad.clear(); }

double Tensor::item() const {
    const auto& n = checked(*this, "item");
    if (n->size() != 1) throw std::logic_error("item: tensor is not scalar");
    return n->data[0];
}

void Tensor::backward() const {
    const auto& root = checked(*this, "backward");
    if (root->size() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) throw std::invalid_argument("backward: root does not require grad");
    if (!std::isfinite(root->data[0])) throw std::domain_error("backward: root value is not finite");

    // Post-order over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (!node->is_leaf() && node->consumed) {
            throw std::logic_error("backward: graph already consumed");
        }
        bool descended = false;
        while (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (descended) continue;
        order.push_back(node);
        stack.pop_back();
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn();
    }
    for (Node* n : order) {
        if (!n->is_leaf()) {
            n->consumed = true;
            n->backward_fn = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

// ---- elementwise -----------------------------------------------------------

namespace {

// Wires a closure that accumulates into whichever parents require grad.
Tensor finish(std::shared_ptr<Node> out, std::function<void()> bwd) {
    if (out->requires_grad) out->backward_fn = std::move(bwd);
    return Tensor(std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto pa = checked(a, "add"), pb = checked(b, "add");
    std::vector<double> y(pa->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa->data[i] + pb->data[i];
    auto out = make_interior(pa->shape, std::move(y), "add", {pa, pb});
    Node* o = out.get();
    return finish(out, [o, pa, pb] {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] += o->grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto pa = checked(a, "sub"), pb = checked(b, "sub");
    std::vector<double> y(pa->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa->data[i] - pb->data[i];
    auto out = make_interior(pa->shape, std::move(y), "sub", {pa, pb});
    Node* o = out.get();
    return finish(out, [o, pa, pb] {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] -= o->grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto pa = checked(a, "mul"), pb = checked(b, "mul");
    std::vector<double> y(pa->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa->data[i] * pb->data[i];
    auto out = make_interior(pa->shape, std::move(y), "mul", {pa, pb});
    Node* o = out.get();
    return finish(out, [o, pa, pb] {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] += o->grad[i] * pa->data[i];
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    auto px = checked(x, "scale");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * px->data[i];
    auto out = make_interior(px->shape, std::move(y), "scale", {px});
    Node* o = out.get();
    return finish(out, [o, px, c] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += c * o->grad[i];
    });
}

Tensor offset(const Tensor& x, double c) {
    auto px = checked(x, "offset");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = px->data[i] + c;
    auto out = make_interior(px->shape, std::move(y), "offset", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += o->grad[i];
    });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor sum(const Tensor& x) {
    auto px = checked(x, "sum");
    double s = 0.0;
    for (double v : px->data) s += v;
    auto out = make_interior({1}, {s}, "sum", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        const double g = o->grad[0];
        for (double& gi : px->grad) gi += g;
    });
}

Tensor mean(const Tensor& x) {
    auto px = checked(x, "mean");
    return scale(sum(x), 1.0 / static_cast<double>(px->size()));
}

Tensor log(const Tensor& x) {
    auto px = checked(x, "log");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(px->data[i] > 0.0)) throw std::domain_error("log: input must be positive");
        y[i] = std::log(px->data[i]);
    }
    auto out = make_interior(px->shape, std::move(y), "log", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += o->grad[i] / px->data[i];
    });
}

Tensor exp(const Tensor& x) {
    auto px = checked(x, "exp");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(px->data[i]);
    auto out = make_interior(px->shape, std::move(y), "exp", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += o->grad[i] * o->data[i];
    });
}

Tensor sqrt_t(const Tensor& x) {
    auto px = checked(x, "sqrt");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(px->data[i] > 0.0)) throw std::domain_error("sqrt: input must be positive");
        y[i] = std::sqrt(px->data[i]);
    }
    auto out = make_interior(px->shape, std::move(y), "sqrt", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) {
            px->grad[i] += o->grad[i] * 0.5 / o->data[i];
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    auto px = checked(x, "sigmoid");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double v = px->data[i];
        double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        // keep the output strictly inside (0,1) even where exp saturates
        if (s <= 0.0) s = std::nextafter(0.0, 1.0);
        if (s >= 1.0) s = std::nextafter(1.0, 0.0);
        y[i] = s;
    }
    auto out = make_interior(px->shape, std::move(y), "sigmoid", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) {
            const double s = o->data[i];
            px->grad[i] += o->grad[i] * s * (1.0 - s);
        }
    });
}

Tensor relu(const Tensor& x) {
    auto px = checked(x, "relu");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = px->data[i] > 0.0 ? px->data[i] : 0.0;
    auto out = make_interior(px->shape, std::move(y), "relu", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) {
            if (px->data[i] > 0.0) px->grad[i] += o->grad[i];
        }
    });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be below hi");
    auto px = checked(x, "clamp");
    std::vector<double> y(px->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::min(std::max(px->data[i], lo), hi);
    auto out = make_interior(px->shape, std::move(y), "clamp", {px});
    Node* o = out.get();
    return finish(out, [o, px, lo, hi] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) {
            const double v = px->data[i];
            if (v > lo && v < hi) px->grad[i] += o->grad[i];
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    auto px = checked(x, "reshape");
    if (shape_size(shape) != px->size()) throw std::invalid_argument("reshape: element count mismatch");
    auto out = make_interior(std::move(shape), px->data, "reshape", {px});
    Node* o = out.get();
    return finish(out, [o, px] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += o->grad[i];
    });
}

Tensor slice_channel(const Tensor& x, std::size_t k) {
    auto px = checked(x, "slice_channel");
    if (px->shape.size() != 3) throw std::invalid_argument("slice_channel: expected [K,H,W]");
    const std::size_t K = px->shape[0], H = px->shape[1], W = px->shape[2];
    if (k >= K) throw std::invalid_argument("slice_channel: channel out of range");
    std::vector<double> y(px->data.begin() + static_cast<std::ptrdiff_t>(k * H * W),
                          px->data.begin() + static_cast<std::ptrdiff_t>((k + 1) * H * W));
    auto out = make_interior({H, W}, std::move(y), "slice_channel", {px});
    Node* o = out.get();
    const std::size_t base = k * H * W;
    return finish(out, [o, px, base] {
        px->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[base + i] += o->grad[i];
    });
}

Tensor log1m_exp(const Tensor& x) {
    auto px = checked(x, "log1m_exp");
    if (px->size() != 1) throw std::invalid_argument("log1m_exp: expected a scalar");
    const double v = px->data[0];
    if (!(v < 0.0)) throw std::domain_error("log1m_exp: input must be strictly negative");
    auto out = make_interior({1}, {std::log(-std::expm1(v))}, "log1m_exp", {px});
    Node* o = out.get();
    return finish(out, [o, px, v] {
        px->ensure_grad();
        px->grad[0] += o->grad[0] * (-1.0 / std::expm1(-v));
    });
}

// ---- conv2d ----------------------------------------------------------------

namespace {

struct ConvDims {
    std::size_t N, C, H, W, F, kh, kw, Ho, Wo, stride, pad;
};

// Output rows oy for which iy = oy*stride - pad + k stays inside [0, limit).
inline void valid_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t limit,
                        std::size_t out_limit, std::size_t& lo, std::size_t& hi) {
    const long long p = static_cast<long long>(pad), kk = static_cast<long long>(k);
    const long long s = static_cast<long long>(stride);
    long long lo_ll = p - kk;
    lo_ll = lo_ll <= 0 ? 0 : (lo_ll + s - 1) / s;
    long long hi_ll = (static_cast<long long>(limit) - 1 + p - kk) / s;
    if (hi_ll >= static_cast<long long>(out_limit)) hi_ll = static_cast<long long>(out_limit) - 1;
    if (hi_ll < lo_ll) {
        lo = 1;
        hi = 0;  // empty
        return;
    }
    lo = static_cast<std::size_t>(lo_ll);
    hi = static_cast<std::size_t>(hi_ll);
}

ConvDims conv_dims(const std::shared_ptr<Node>& in, const std::shared_ptr<Node>& w,
                   const std::shared_ptr<Node>& b, std::size_t stride, std::size_t padding) {
    if (in->shape.size() != 4) throw std::invalid_argument("conv2d: input must be [N,C,H,W]");
    if (w->shape.size() != 4) throw std::invalid_argument("conv2d: weight must be [F,C,kh,kw]");
    if (b->shape.size() != 1) throw std::invalid_argument("conv2d: bias must be [F]");
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    ConvDims d{in->shape[0], in->shape[1], in->shape[2], in->shape[3],
               w->shape[0], w->shape[2], w->shape[3], 0, 0, stride, padding};
    if (w->shape[1] != d.C) throw std::invalid_argument("conv2d: channel mismatch between input and weight");
    if (b->shape[0] != d.F) throw std::invalid_argument("conv2d: bias length must equal output channels");
    if (d.H + 2 * padding < d.kh || d.W + 2 * padding < d.kw) {
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    }
    const std::size_t num_h = d.H + 2 * padding - d.kh;
    const std::size_t num_w = d.W + 2 * padding - d.kw;
    if (num_h % stride != 0 || num_w % stride != 0) {
        throw std::invalid_argument("conv2d: output size is not an exact division "
                                    "((dim + 2*padding - kernel) must be divisible by stride)");
    }
    d.Ho = num_h / stride + 1;
    d.Wo = num_w / stride + 1;
    return d;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
    auto pin = checked(input, "conv2d"), pw = checked(weight, "conv2d"), pb = checked(bias, "conv2d");
    const ConvDims d = conv_dims(pin, pw, pb, stride, padding);

    std::vector<double> y(d.N * d.F * d.Ho * d.Wo);
    for (std::size_t n = 0; n < d.N; ++n) {
        const double* inb = pin->data.data() + n * d.C * d.H * d.W;
        double* outb = y.data() + n * d.F * d.Ho * d.Wo;
        for (std::size_t f = 0; f < d.F; ++f) {
            double* op = outb + f * d.Ho * d.Wo;
            std::fill(op, op + d.Ho * d.Wo, pb->data[f]);
            for (std::size_t c = 0; c < d.C; ++c) {
                const double* ip = inb + c * d.H * d.W;
                const double* wp = pw->data.data() + (f * d.C + c) * d.kh * d.kw;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    std::size_t oy_lo, oy_hi;
                    valid_range(ky, d.pad, d.stride, d.H, d.Ho, oy_lo, oy_hi);
                    if (oy_lo > oy_hi) continue;
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const double wv = wp[ky * d.kw + kx];
                        std::size_t ox_lo, ox_hi;
                        valid_range(kx, d.pad, d.stride, d.W, d.Wo, ox_lo, ox_hi);
                        if (ox_lo > ox_hi) continue;
                        for (std::size_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            const std::size_t iy = oy * d.stride - d.pad + ky;
                            const double* irow = ip + iy * d.W;
                            double* orow = op + oy * d.Wo;
                            if (d.stride == 1) {
                                const double* ir = irow + (ox_lo - d.pad + kx);
                                for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                    orow[ox] += wv * ir[ox - ox_lo];
                                }
                            } else {
                                for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                    orow[ox] += wv * irow[ox * d.stride - d.pad + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    auto out = make_interior({d.N, d.F, d.Ho, d.Wo}, std::move(y), "conv2d", {pin, pw, pb});
    Node* o = out.get();
    return finish(out, [o, pin, pw, pb, d] {
        const double* g = o->grad.data();
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t n = 0; n < d.N; ++n) {
                for (std::size_t f = 0; f < d.F; ++f) {
                    const double* gp = g + (n * d.F + f) * d.Ho * d.Wo;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < d.Ho * d.Wo; ++i) acc += gp[i];
                    pb->grad[f] += acc;
                }
            }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            for (std::size_t n = 0; n < d.N; ++n) {
                const double* inb = pin->data.data() + n * d.C * d.H * d.W;
                const double* gb = g + n * d.F * d.Ho * d.Wo;
                for (std::size_t f = 0; f < d.F; ++f) {
                    const double* gp = gb + f * d.Ho * d.Wo;
                    for (std::size_t c = 0; c < d.C; ++c) {
                        const double* ip = inb + c * d.H * d.W;
                        double* wg = pw->grad.data() + (f * d.C + c) * d.kh * d.kw;
                        for (std::size_t ky = 0; ky < d.kh; ++ky) {
                            std::size_t oy_lo, oy_hi;
                            valid_range(ky, d.pad, d.stride, d.H, d.Ho, oy_lo, oy_hi);
                            if (oy_lo > oy_hi) continue;
                            for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                std::size_t ox_lo, ox_hi;
                                valid_range(kx, d.pad, d.stride, d.W, d.Wo, ox_lo, ox_hi);
                                if (ox_lo > ox_hi) continue;
                                double acc = 0.0;
                                for (std::size_t oy = oy_lo; oy <= oy_hi; ++oy) {
                                    const std::size_t iy = oy * d.stride - d.pad + ky;
                                    const double* irow = ip + iy * d.W;
                                    const double* grow = gp + oy * d.Wo;
                                    if (d.stride == 1) {
                                        const double* ir = irow + (ox_lo - d.pad + kx);
                                        for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                            acc += grow[ox] * ir[ox - ox_lo];
                                        }
                                    } else {
                                        for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                            acc += grow[ox] * irow[ox * d.stride - d.pad + kx];
                                        }
                                    }
                                }
                                wg[ky * d.kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if (pin->requires_grad) {
            pin->ensure_grad();
            for (std::size_t n = 0; n < d.N; ++n) {
                double* igb = pin->grad.data() + n * d.C * d.H * d.W;
                const double* gb = g + n * d.F * d.Ho * d.Wo;
                for (std::size_t f = 0; f < d.F; ++f) {
                    const double* gp = gb + f * d.Ho * d.Wo;
                    for (std::size_t c = 0; c < d.C; ++c) {
                        double* igp = igb + c * d.H * d.W;
                        const double* wp = pw->data.data() + (f * d.C + c) * d.kh * d.kw;
                        for (std::size_t ky = 0; ky < d.kh; ++ky) {
                            std::size_t oy_lo, oy_hi;
                            valid_range(ky, d.pad, d.stride, d.H, d.Ho, oy_lo, oy_hi);
                            if (oy_lo > oy_hi) continue;
                            for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                const double wv = wp[ky * d.kw + kx];
                                std::size_t ox_lo, ox_hi;
                                valid_range(kx, d.pad, d.stride, d.W, d.Wo, ox_lo, ox_hi);
                                if (ox_lo > ox_hi) continue;
                                for (std::size_t oy = oy_lo; oy <= oy_hi; ++oy) {
                                    const std::size_t iy = oy * d.stride - d.pad + ky;
                                    double* irow = igp + iy * d.W;
                                    const double* grow = gp + oy * d.Wo;
                                    if (d.stride == 1) {
                                        double* ir = irow + (ox_lo - d.pad + kx);
                                        for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                            ir[ox - ox_lo] += wv * grow[ox];
                                        }
                                    } else {
                                        for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                            irow[ox * d.stride - d.pad + kx] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

Tensor upsample2x(const Tensor& x) {
    auto px = checked(x, "upsample2x");
    if (px->shape.size() != 3) throw std::invalid_argument("upsample2x: expected [C,H,W]");
    const std::size_t C = px->shape[0], H = px->shape[1], W = px->shape[2];
    std::vector<double> y(C * 4 * H * W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t col = 0; col < W; ++col) {
                const double v = px->data[(c * H + r) * W + col];
                const std::size_t base = (c * 2 * H + 2 * r) * 2 * W + 2 * col;
                y[base] = v;
                y[base + 1] = v;
                y[base + 2 * W] = v;
                y[base + 2 * W + 1] = v;
            }
        }
    }
    auto out = make_interior({C, 2 * H, 2 * W}, std::move(y), "upsample2x", {px});
    Node* o = out.get();
    return finish(out, [o, px, C, H, W] {
        px->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t r = 0; r < H; ++r) {
                for (std::size_t col = 0; col < W; ++col) {
                    const std::size_t base = (c * 2 * H + 2 * r) * 2 * W + 2 * col;
                    px->grad[(c * H + r) * W + col] += o->grad[base] + o->grad[base + 1] +
                                                       o->grad[base + 2 * W] + o->grad[base + 2 * W + 1];
                }
            }
        }
    });
}

Tensor rms_normalize(const Tensor& x, double epsilon) {
    auto px = checked(x, "rms_normalize");
    if (!(epsilon > 0.0)) throw std::invalid_argument("rms_normalize: epsilon must be positive");
    const std::size_t n = px->data.size();
    double sq = 0.0;
    for (double v : px->data) sq += v * v;
    const double r = std::max(std::sqrt(sq / static_cast<double>(n)), epsilon);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = px->data[i] / r;
    auto out = make_interior(px->shape, std::move(y), "rms_normalize", {px});
    Node* o = out.get();
    const bool floored = std::sqrt(sq / static_cast<double>(n)) <= epsilon;
    return finish(out, [o, px, n, r, floored] {
        px->ensure_grad();
        if (floored) {  // constant divisor below the floor
            for (std::size_t i = 0; i < n; ++i) px->grad[i] += o->grad[i] / r;
            return;
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += o->grad[i] * px->data[i];
        const double k = dot / (static_cast<double>(n) * r * r * r);
        for (std::size_t i = 0; i < n; ++i) px->grad[i] += o->grad[i] / r - px->data[i] * k;
    });
}

Tensor center_spatial(const Tensor& x) {
    auto px = checked(x, "center_spatial");
    if (px->shape.size() != 3) throw std::invalid_argument("center_spatial: expected [C,H,W]");
    const std::size_t C = px->shape[0], HW = px->shape[1] * px->shape[2];
    std::vector<double> y(px->data.size());
    for (std::size_t c = 0; c < C; ++c) {
        double m = 0.0;
        for (std::size_t i = 0; i < HW; ++i) m += px->data[c * HW + i];
        m /= static_cast<double>(HW);
        for (std::size_t i = 0; i < HW; ++i) y[c * HW + i] = px->data[c * HW + i] - m;
    }
    auto out = make_interior(px->shape, std::move(y), "center_spatial", {px});
    Node* o = out.get();
    // Centering is its own adjoint: the incoming gradient is centered too.
    return finish(out, [o, px, C, HW] {
        px->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (std::size_t i = 0; i < HW; ++i) m += o->grad[c * HW + i];
            m /= static_cast<double>(HW);
            for (std::size_t i = 0; i < HW; ++i) px->grad[c * HW + i] += o->grad[c * HW + i] - m;
        }
    });
}

Tensor masked_avg_pool(const Tensor& feature, const Tensor& mask) {
    auto pf = checked(feature, "masked_avg_pool");
    auto pm = checked(mask, "masked_avg_pool");
    if (pf->shape.size() != 3) throw std::invalid_argument("masked_avg_pool: feature must be [C,H,W]");
    if (pm->shape.size() != 2 || pm->shape[0] != pf->shape[1] || pm->shape[1] != pf->shape[2]) {
        throw std::invalid_argument("masked_avg_pool: mask must be [H,W] matching the feature");
    }
    if (pm->requires_grad) throw std::invalid_argument("masked_avg_pool: mask is not differentiable");
    const std::size_t C = pf->shape[0], HW = pm->size();
    std::size_t count = 0;
    for (double v : pm->data) {
        if (v != 0.0 && v != 1.0) throw std::invalid_argument("masked_avg_pool: mask must be 0/1");
        count += v != 0.0;
    }
    if (count == 0) throw std::invalid_argument("masked_avg_pool: empty mask");
    std::vector<double> y(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        const double* fp = pf->data.data() + c * HW;
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) {
            if (pm->data[i] != 0.0) acc += fp[i];
        }
        y[c] = acc / static_cast<double>(count);
    }
    auto out = make_interior({C}, std::move(y), "masked_avg_pool", {pf, pm});
    Node* o = out.get();
    return finish(out, [o, pf, pm, C, HW, count] {
        pf->ensure_grad();
        const double inv = 1.0 / static_cast<double>(count);
        for (std::size_t c = 0; c < C; ++c) {
            const double g = o->grad[c] * inv;
            double* gp = pf->grad.data() + c * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                if (pm->data[i] != 0.0) gp[i] += g;
            }
        }
    });
}

Tensor l2_normalize(const Tensor& v, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("l2_normalize: epsilon must be positive");
    auto pv = checked(v, "l2_normalize");
    double sq = 0.0;
    for (double x : pv->data) sq += x * x;
    const double norm = std::sqrt(sq);
    const double denom = std::max(norm, epsilon);
    std::vector<double> y(pv->size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pv->data[i] / denom;
    auto out = make_interior(pv->shape, std::move(y), "l2_normalize", {pv});
    Node* o = out.get();
    return finish(out, [o, pv, norm, epsilon] {
        pv->ensure_grad();
        if (norm >= epsilon) {
            double dot = 0.0;  // g . y
            for (std::size_t i = 0; i < o->grad.size(); ++i) dot += o->grad[i] * o->data[i];
            for (std::size_t i = 0; i < o->grad.size(); ++i) {
                pv->grad[i] += (o->grad[i] - dot * o->data[i]) / norm;
            }
        } else {
            for (std::size_t i = 0; i < o->grad.size(); ++i) pv->grad[i] += o->grad[i] / epsilon;
        }
    });
}

Tensor euclidean_distance(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "euclidean_distance");
    auto pa = checked(a, "euclidean_distance"), pb = checked(b, "euclidean_distance");
    double sq = 0.0;
    for (std::size_t i = 0; i < pa->size(); ++i) {
        const double diff = pa->data[i] - pb->data[i];
        sq += diff * diff;
    }
    const double dist = std::sqrt(sq);
    auto out = make_interior({1}, {dist}, "euclidean_distance", {pa, pb});
    Node* o = out.get();
    return finish(out, [o, pa, pb, dist] {
        if (pa->requires_grad) pa->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (dist == 0.0) return;  // subgradient 0 at coincidence (buffers stay zero)
        const double g = o->grad[0] / dist;
        for (std::size_t i = 0; i < pa->size(); ++i) {
            const double d = g * (pa->data[i] - pb->data[i]);
            if (pa->requires_grad) pa->grad[i] += d;
            if (pb->requires_grad) pb->grad[i] -= d;
        }
    });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("cosine_similarity: epsilon must be positive");
    check_same_shape(a, b, "cosine_similarity");
    auto pa = checked(a, "cosine_similarity"), pb = checked(b, "cosine_similarity");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < pa->size(); ++i) {
        dot += pa->data[i] * pb->data[i];
        na2 += pa->data[i] * pa->data[i];
        nb2 += pb->data[i] * pb->data[i];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const double denom = std::max(na * nb, epsilon);
    const double cosv = dot / denom;
    auto out = make_interior({1}, {cosv}, "cosine_similarity", {pa, pb});
    Node* o = out.get();
    return finish(out, [o, pa, pb, na, nb, cosv, epsilon] {
        const double g = o->grad[0];
        const bool full = na * nb >= epsilon;
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < pa->size(); ++i) {
                if (full) {
                    pa->grad[i] += g * (pb->data[i] / (na * nb) - cosv * pa->data[i] / (na * na));
                } else {
                    pa->grad[i] += g * pb->data[i] / epsilon;
                }
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < pb->size(); ++i) {
                if (full) {
                    pb->grad[i] += g * (pa->data[i] / (na * nb) - cosv * pb->data[i] / (nb * nb));
                } else {
                    pb->grad[i] += g * pa->data[i] / epsilon;
                }
            }
        }
    });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

Tensor make_unary_op(
    const Tensor& x, Shape out_shape, std::string name,
    std::function<void(std::span<const double>, std::span<double>)> forward,
    std::function<void(std::span<const double>, std::span<const double>,
                       std::span<const double>, std::span<double>)>
        backward) {
    auto px = checked(x, "make_unary_op");
    std::vector<double> y(shape_size(out_shape));
    forward({px->data.data(), px->data.size()}, {y.data(), y.size()});
    auto out = make_interior(std::move(out_shape), std::move(y), std::move(name), {px});
    Node* o = out.get();
    return finish(out, [o, px, backward = std::move(backward)] {
        px->ensure_grad();
        backward({px->data.data(), px->data.size()}, {o->data.data(), o->data.size()},
                 {o->grad.data(), o->grad.size()}, {px->grad.data(), px->grad.size()});
    });
}

// ---- gradient checking -----------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts) {
    if (!(opts.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
    for (const auto& [name, p] : params) {
        if (!p.is_leaf() || !p.requires_grad()) {
            throw std::invalid_argument("grad_check: param '" + name + "' must be a requires_grad leaf");
        }
    }

    std::vector<std::pair<std::string, Tensor>> mut(params);
    for (auto& [name, p] : mut) p.zero_grad();
    Tensor root = fn();
    const double f0 = root.item();
    double denom_floor = 1e-8;
    if (opts.certify_rel > 0.0) {
        denom_floor = std::max(denom_floor, 8.0 * std::numeric_limits<double>::epsilon() *
                                                std::abs(f0) / (2.0 * opts.step * opts.certify_rel));
    }
    root.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(mut.size());
    for (auto& [name, p] : mut) {
        if (p.has_grad()) {
            auto g = p.grad();
            analytic.emplace_back(g.begin(), g.end());
        } else {
            analytic.emplace_back(p.size(), 0.0);
        }
    }

    GradCheckReport report;
    for (std::size_t pi = 0; pi < mut.size(); ++pi) {
        auto& [name, p] = mut[pi];
        std::vector<std::size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (coords.size() > opts.max_coords_per_param) {
            Rng rng(opts.coord_seed ^ (0x100000001b3ull * (pi + 1)));
            rng.shuffle(coords);
            coords.resize(opts.max_coords_per_param);
        }
        auto data = p.mutable_data();
        for (std::size_t idx : coords) {
            const double orig = data[idx];
            data[idx] = orig + opts.step;
            const double fp = fn().item();
            const std::uint64_t sig_p = opts.gate_signature ? opts.gate_signature() : 0;
            data[idx] = orig - opts.step;
            const double fm = fn().item();
            const std::uint64_t sig_m = opts.gate_signature ? opts.gate_signature() : 0;
            data[idx] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::domain_error("grad_check: fn returned a non-finite value");
            }
            if (sig_p != sig_m) {
                ++report.coords_skipped;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * opts.step);
            const double a = analytic[pi][idx];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), denom_floor});
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = name;
                report.worst_coord = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace gren
