#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gren {

using Shape = std::vector<std::size_t>;

namespace detail {
struct Node;
}

/// Dense f64 tensor participating in a reverse-mode autodiff DAG.
///
/// Leaves (no producing op) are reusable across any number of graphs; interior
/// nodes belong to the single graph that produced them and are consumed by the
/// first backward() that visits them. Gradients accumulate: a node feeding two
/// consumers receives the sum of both contributions, and leaf .grad() keeps
/// accumulating across backward() calls until zero_grad().
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    bool is_leaf() const;
    bool requires_grad() const;

    std::span<const double> data() const;
    // Mutable view of a leaf's storage (trainer updates, finite differences).
    // Throws std::logic_error on interior nodes.
    std::span<double> mutable_data();

    bool has_grad() const;
    std::span<const double> grad() const;  // throws std::logic_error if !has_grad()
    void zero_grad();

    double item() const;  // scalar tensors only

    // Reverse pass from a scalar root. Seeds d(root)/d(root)=1, walks the DAG in
    // reverse topological order, accumulates into every requires_grad ancestor,
    // then marks visited interior nodes consumed. Throws std::logic_error if the
    // root is not scalar, does not require grad, or the graph was already
    // consumed; std::domain_error if the root value is not finite.
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  private:
    std::shared_ptr<detail::Node> node_;
};

// ---- primitive ops ---------------------------------------------------------
// Elementwise ops require identical shapes (no broadcasting).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);   // c*x
Tensor offset(const Tensor& x, double c);  // x+c
Tensor neg(const Tensor& x);
Tensor sum(const Tensor& x);  // -> scalar
Tensor mean(const Tensor& x);
Tensor log(const Tensor& x);  // throws std::domain_error on x <= 0
Tensor exp(const Tensor& x);
Tensor sqrt_t(const Tensor& x);
Tensor sigmoid(const Tensor& x);  // outputs strictly inside (0,1)
Tensor relu(const Tensor& x);
// min(max(x,lo),hi); gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor reshape(const Tensor& x, Shape shape);
// [K,H,W] -> [H,W] view of channel k (copies; gradient routed back to k).
Tensor slice_channel(const Tensor& x, std::size_t k);
// Scalar x < 0 -> log(1 - exp(x)), computed as log(-expm1(x)).
Tensor log1m_exp(const Tensor& x);

// input [N,C,H,W], weight [F,C,kh,kw], bias [F] -> [N,F,H',W'] with
// H' = (H + 2*padding - kh)/stride + 1; the division must be exact or the op
// throws std::invalid_argument. Cross-correlation (no kernel flip).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);

// [C,H,W] -> [C,2H,2W], nearest-neighbour.
Tensor upsample2x(const Tensor& x);

// x / max(rms(x), epsilon), over the whole tensor. A layer followed by this is
// scale-invariant in its weights, so gradient steps stay proportionate no
// matter how large the weights grow.
Tensor rms_normalize(const Tensor& x, double epsilon);

// [C,H,W] -> [C,H,W] with each channel's spatial mean subtracted. Removes the
// common mode a summed-over-cells loss would otherwise push into every weight.
Tensor center_spatial(const Tensor& x);

// feature [C,H,W], mask [H,W] of {0,1} values (not differentiated) -> [C].
// Mean of feature over mask-on cells; throws if the mask is empty.
Tensor masked_avg_pool(const Tensor& feature, const Tensor& mask);

// v / max(||v||2, epsilon); zero vectors stay zero for epsilon > 0.
Tensor l2_normalize(const Tensor& v, double epsilon);

// ||a-b||2 -> scalar. Gradient defined as 0 at a == b.
Tensor euclidean_distance(const Tensor& a, const Tensor& b);

// dot(a,b) / max(||a||*||b||, epsilon) -> scalar.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double epsilon);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(double c, const Tensor& x);

// Extension point: build a differentiable unary op from plain callbacks.
// backward(x, y, gy, gx_accum) must *add* into gx_accum. Used by tests to
// assemble negative controls (deliberately wrong gradients).
Tensor make_unary_op(
    const Tensor& x, Shape out_shape, std::string name,
    std::function<void(std::span<const double> x, std::span<double> y)> forward,
    std::function<void(std::span<const double> x, std::span<const double> y,
                       std::span<const double> gy, std::span<double> gx_accum)>
        backward);

// ---- gradient checking -----------------------------------------------------

struct GradCheckOptions {
    double step = 1e-5;
    std::size_t max_coords_per_param = 16;  // deterministic subsample above this
    std::uint64_t coord_seed = 0x9e3779b97f4a7c15ull;
    // Optional probe of the objective's discrete state (relu gates, clamp
    // saturation), evaluated at the currently perturbed parameters. When the
    // two probes of a coordinate disagree, some gate flips inside the probe
    // interval and the central difference is not an estimate of the derivative
    // there; the coordinate is skipped and counted instead of compared.
    std::function<std::uint64_t()> gate_signature;
    // A central difference on a value of magnitude |f| resolves slopes only to
    // about eps*|f|/(2*step); slopes below resolution/certify_rel cannot be
    // certified to relative precision certify_rel by any comparison. When set,
    // the denominator floor rises from 1e-8 to 8x that bound so roundoff in
    // the probes is reported at its own scale instead of as gradient error.
    // Gradients above the raised floor are still compared normally.
    double certify_rel = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t coords_skipped = 0;  // gate flipped between the two probes
    std::string worst_param;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// fn() must rebuild the scalar objective from the given leaf params on every
// call. Relative error per coordinate is
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// with numeric the central difference (fn(t+d)-fn(t-d))/(2d).
GradCheckReport grad_check(const std::function<Tensor()>& fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts = {});

}  // namespace gren
