#include "ntml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "ntml/error.hpp"
#include "ntml/kernels.hpp"

namespace ntml {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor: shape does not match data length");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    return Tensor(std::move(impl));
}

Tensor Tensor::param(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
}

double Tensor::item() const {
    if (!impl_ || impl_->numel() != 1) throw UsageError("item(): tensor is not scalar");
    return impl_->value[0];
}

Tensor Tensor::detach() const {
    return from_data(impl_->shape, impl_->value);
}

Tensor Tensor::make_node(std::vector<std::size_t> shape, std::vector<double> value,
                         std::vector<Tensor> parents,
                         std::function<void(detail::TensorImpl&)> backward) {
    Tensor out = from_data(std::move(shape), std::move(value));
    bool needs = false;
    for (const auto& p : parents)
        if (p.requires_grad()) needs = true;
    if (needs) {
        out.impl_->requires_grad = true;
        out.impl_->parents.reserve(parents.size());
        for (auto& p : parents) out.impl_->parents.push_back(p.impl());
        out.impl_->backward = std::move(backward);
    }
    return out;
}

// --- ops ---

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions must match");
    const std::int64_t m = static_cast<std::int64_t>(a.dim(0));
    const std::int64_t k = static_cast<std::int64_t>(a.dim(1));
    const std::int64_t n = static_cast<std::int64_t>(b.dim(1));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    kernels::matmul_nn(a.values().data(), b.values().data(), out.data(), m, k, n);

    auto ai = a.impl();
    auto bi = b.impl();
    return Tensor::make_node(
        {static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out), {a, b},
        [ai, bi, m, k, n](detail::TensorImpl& self) {
            if (ai->requires_grad) {
                ai->ensure_grad();
                std::vector<double> da(static_cast<std::size_t>(m * k));
                kernels::matmul_nt(self.grad.data(), bi->value.data(), da.data(), m, n, k);
                for (std::size_t i = 0; i < da.size(); ++i) ai->grad[i] += da[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                std::vector<double> db(static_cast<std::size_t>(k * n));
                kernels::matmul_tn(ai->value.data(), self.grad.data(), db.data(), m, k, n);
                for (std::size_t i = 0; i < db.size(); ++i) bi->grad[i] += db[i];
            }
        });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
    if (input.rank() != 4 || kernel.rank() != 4)
        throw DimensionError("conv2d: input must be [N,C,H,W], kernel [F,C,KH,KW]");
    if (input.dim(1) != kernel.dim(1)) throw DimensionError("conv2d: channel mismatch");
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kh > h + 2 * pad || kw > w + 2 * pad)
        throw DimensionError("conv2d: kernel larger than padded input");
    if ((h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0)
        throw DimensionError("conv2d: non-integral output size");
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;

    std::vector<double> out(static_cast<std::size_t>(n * f * oh * ow));
    kernels::conv2d_forward(input.values().data(), kernel.values().data(), out.data(), n, c, h,
                            w, f, kh, kw, stride, pad);

    auto ii = input.impl();
    auto ki = kernel.impl();
    return Tensor::make_node(
        {static_cast<std::size_t>(n), static_cast<std::size_t>(f), static_cast<std::size_t>(oh),
         static_cast<std::size_t>(ow)},
        std::move(out), {input, kernel},
        [ii, ki, n, c, h, w, f, kh, kw, stride, pad](detail::TensorImpl& self) {
            if (ii->requires_grad) {
                ii->ensure_grad();
                kernels::conv2d_dinput(self.grad.data(), ki->value.data(), ii->grad.data(), n, c,
                                       h, w, f, kh, kw, stride, pad);
            }
            if (ki->requires_grad) {
                ki->ensure_grad();
                kernels::conv2d_dkernel(self.grad.data(), ii->value.data(), ki->grad.data(), n,
                                        c, h, w, f, kh, kw, stride, pad);
            }
        });
}

Tensor bias_add_rows(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("bias_add_rows: x [N,K] and b [K] required");
    const std::size_t n = x.dim(0), k = x.dim(1);
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] += b.values()[j];
    auto xi = x.impl();
    auto bi = b.impl();
    return Tensor::make_node(
        x.shape(), std::move(out), {x, b}, [xi, bi, n, k](detail::TensorImpl& self) {
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < k; ++j) bi->grad[j] += self.grad[i * k + j];
            }
        });
}

Tensor bias_add_channels(const Tensor& x, const Tensor& b) {
    if (x.rank() != 4 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("bias_add_channels: x [N,F,H,W] and b [F] required");
    const std::size_t n = x.dim(0), f = x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) {
            const double bv = b.values()[j];
            double* base = out.data() + (i * f + j) * plane;
            for (std::size_t p = 0; p < plane; ++p) base[p] += bv;
        }
    auto xi = x.impl();
    auto bi = b.impl();
    return Tensor::make_node(
        x.shape(), std::move(out), {x, b}, [xi, bi, n, f, plane](detail::TensorImpl& self) {
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < f; ++j) {
                        const double* base = self.grad.data() + (i * f + j) * plane;
                        double acc = 0.0;
                        for (std::size_t p = 0; p < plane; ++p) acc += base[p];
                        bi->grad[j] += acc;
                    }
            }
        });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.values());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    auto xi = x.impl();
    return Tensor::make_node(x.shape(), std::move(out), {x}, [xi](detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (xi->value[i] > 0.0) xi->grad[i] += self.grad[i];
    });
}

Tensor maxpool2x2(const Tensor& x) {
    if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
        throw DimensionError("maxpool2x2: input [N,C,H,W] with even H and W required");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t out_count = static_cast<std::size_t>(n * c * (h / 2) * (w / 2));
    std::vector<double> out(out_count);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out_count);
    kernels::maxpool2x2_forward(x.values().data(), out.data(), argmax->data(), n, c, h, w);
    auto xi = x.impl();
    return Tensor::make_node(
        {x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2}, std::move(out), {x},
        [xi, argmax](detail::TensorImpl& self) {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            kernels::maxpool2x2_backward(self.grad.data(), argmax->data(), xi->grad.data(),
                                         static_cast<std::int64_t>(self.grad.size()),
                                         static_cast<std::int64_t>(xi->grad.size()));
        });
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: element count mismatch");
    auto xi = x.impl();
    return Tensor::make_node(std::move(shape), x.values(), {x}, [xi](detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
    });
}

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          const std::function<double(double, double)>& fwd,
                          const std::function<void(detail::TensorImpl&, detail::TensorImpl&,
                                                   detail::TensorImpl&)>& bwd) {
    if (a.shape() != b.shape()) throw DimensionError(std::string(name) + ": shape mismatch");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.values()[i], b.values()[i]);
    auto ai = a.impl();
    auto bi = b.impl();
    return Tensor::make_node(a.shape(), std::move(out), {a, b},
                             [ai, bi, bwd](detail::TensorImpl& self) { bwd(self, *ai, *bi); });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](detail::TensorImpl& self, detail::TensorImpl& ai, detail::TensorImpl& bi) {
            if (ai.requires_grad) {
                ai.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) ai.grad[i] += self.grad[i];
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bi.grad[i] += self.grad[i];
            }
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](detail::TensorImpl& self, detail::TensorImpl& ai, detail::TensorImpl& bi) {
            if (ai.requires_grad) {
                ai.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) ai.grad[i] += self.grad[i];
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bi.grad[i] -= self.grad[i];
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](detail::TensorImpl& self, detail::TensorImpl& ai, detail::TensorImpl& bi) {
            if (ai.requires_grad) {
                ai.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    ai.grad[i] += self.grad[i] * bi.value[i];
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    bi.grad[i] += self.grad[i] * ai.value[i];
            }
        });
}

Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.values());
    for (double& v : out) v *= s;
    auto xi = x.impl();
    return Tensor::make_node(x.shape(), std::move(out), {x}, [xi, s](detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += s * self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    auto xi = x.impl();
    return Tensor::make_node({}, {acc}, {x}, [xi](detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (double& g : xi->grad) g += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    acc *= inv;
    auto xi = x.impl();
    return Tensor::make_node({}, {acc}, {x}, [xi, inv](detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (double& g : xi->grad) g += inv * self.grad[0];
    });
}

namespace detail {

void softmax_values(const double* src, double* dst, std::size_t k, double temperature) {
    double mx = src[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, src[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        dst[i] = std::exp((src[i] - mx) / temperature);
        denom += dst[i];
    }
    for (std::size_t i = 0; i < k; ++i) dst[i] /= denom;
}

}  // namespace detail

Tensor softmax_temp(const Tensor& logits, double temperature) {
    if (logits.rank() != 1) throw DimensionError("softmax_temp: rank-1 logits required");
    if (!(temperature > 0.0)) throw UsageError("softmax_temp: temperature must be positive");
    check_finite(logits.values(), "softmax_temp");
    const std::size_t k = logits.numel();
    std::vector<double> out(k);
    detail::softmax_values(logits.values().data(), out.data(), k, temperature);
    auto li = logits.impl();
    auto probs = std::make_shared<std::vector<double>>(out);
    return Tensor::make_node(
        logits.shape(), std::move(out), {logits},
        [li, probs, temperature](detail::TensorImpl& self) {
            if (!li->requires_grad) return;
            li->ensure_grad();
            const auto& p = *probs;
            double dot = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) dot += self.grad[i] * p[i];
            for (std::size_t i = 0; i < p.size(); ++i)
                li->grad[i] += p[i] * (self.grad[i] - dot) / temperature;
        });
}

// --- reverse pass ---

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw UsageError("backward: root must be a defined scalar");
    auto root = loss.impl();
    if (!root->requires_grad) return;

    // Iterative post-order DFS for a topological order.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    struct Frame {
        detail::TensorImpl* node;
        std::size_t next_child;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->parents.size()) {
            detail::TensorImpl* child = f.node->parents[f.next_child++].get();
            if (child->requires_grad && seen.insert(child).second)
                stack.push_back({child, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (auto* node : order) {
        node->ensure_grad();
        std::fill(node->grad.begin(), node->grad.end(), 0.0);
    }
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> params, double eps) {
    Tensor y = f(params);
    if (y.numel() != 1) throw UsageError("grad_check: f must return a scalar");
    if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite loss");
    backward(y);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        if (p.grad().size() != p.numel())
            analytic.push_back(std::vector<double>(p.numel(), 0.0));
        else
            analytic.push_back(p.grad());
    }

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].mutable_values();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double up = f(params).item();
            data[i] = saved - eps;
            const double down = f(params).item();
            data[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("grad_check: non-finite perturbed loss");
            const double numeric = (up - down) / (2.0 * eps);
            const double rel =
                std::abs(analytic[pi][i] - numeric) / std::max(1e-8, std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace ntml
