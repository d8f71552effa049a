#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace ntml {

class Tensor;

namespace detail {

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily; same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(TensorImpl&)> backward;

    std::size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense f64 tensor handle with an attached reverse-mode computation record.
// Handles share the underlying node; ops build new nodes whose backward
// closures accumulate into parent grads. One graph is never mutated
// concurrently; values may be shared read-only across threads.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);
    static Tensor scalar(double v) { return from_data({}, {v}); }
    // Leaf that participates in gradient computation.
    static Tensor param(std::vector<std::size_t> shape, std::vector<double> data);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t numel() const { return impl_->numel(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    const std::vector<double>& values() const { return impl_->value; }
    std::vector<double>& mutable_values() { return impl_->value; }
    const std::vector<double>& grad() const { return impl_->grad; }

    // Scalar extraction; usage error unless numel() == 1.
    double item() const;

    // Leaf copy sharing nothing with the graph.
    Tensor detach() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

    // Graph-node constructor used by ops and fused losses.
    static Tensor make_node(std::vector<std::size_t> shape, std::vector<double> value,
                            std::vector<Tensor> parents,
                            std::function<void(detail::TensorImpl&)> backward);

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// --- differentiable ops ---

// c[i,j] = sum_p a[i,p] * b[p,j]
Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation with zero padding; input [N,C,H,W], kernel [F,C,KH,KW].
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad);

// x [N,K] + b [K], broadcast over rows.
Tensor bias_add_rows(const Tensor& x, const Tensor& b);

// x [N,F,H,W] + b [F], broadcast over channels.
Tensor bias_add_channels(const Tensor& x, const Tensor& b);

Tensor relu(const Tensor& x);

// 2x2 max pooling with stride 2 on [N,C,H,W].
Tensor maxpool2x2(const Tensor& x);

// Same data, new shape (element count must match).
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// p_i = exp(z_i/T) / sum_j exp(z_j/T) on a rank-1 logit vector, computed with
// max subtraction. T > 0.
Tensor softmax_temp(const Tensor& logits, double temperature);

// Reverse pass from a scalar root: fills grad buffers of all ancestors that
// require grad (zeroed first, then accumulated).
void backward(const Tensor& loss);

// Max over all parameter coordinates of
// |analytic - central_difference| / max(1e-8, |central_difference|).
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> params, double eps);

// Value-only helpers shared with loss code and evaluation paths.
namespace detail {
// Writes softmax with temperature of src[0..k) into dst; max-subtracted.
void softmax_values(const double* src, double* dst, std::size_t k, double temperature);
}  // namespace detail

}  // namespace ntml
