#include "ntml/losses.hpp"

#include <algorithm>
#include <cmath>

#include "ntml/error.hpp"

namespace ntml {

namespace {

// Row-wise stable log-softmax; writes log-probs and returns nothing extra.
void log_softmax_row(const double* z, double* logp, std::size_t k, double temperature) {
    double mx = z[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, z[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp((z[i] - mx) / temperature);
    const double log_denom = std::log(denom);
    for (std::size_t i = 0; i < k; ++i) logp[i] = (z[i] - mx) / temperature - log_denom;
}

// Stable softmax over all classes except t; entries at t are set to 0 in the
// K-sized output buffer.
void nontarget_softmax_row(const double* z, double* p, std::size_t k, std::size_t t) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i)
        if (i != t) mx = std::max(mx, z[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        if (i == t) {
            p[i] = 0.0;
            continue;
        }
        p[i] = std::exp(z[i] - mx);
        denom += p[i];
    }
    for (std::size_t i = 0; i < k; ++i) p[i] /= denom;
}

void require_batch_logits(const Tensor& logits, std::size_t n_labels, const char* name) {
    if (logits.rank() != 2) throw DimensionError(std::string(name) + ": logits must be [N,K]");
    if (logits.dim(0) != n_labels)
        throw UsageError(std::string(name) + ": label count does not match batch");
}

}  // namespace

Tensor cross_entropy_batch(const Tensor& logits, const std::vector<int>& labels) {
    require_batch_logits(logits, labels.size(), "cross_entropy");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    for (int lab : labels)
        if (lab < 0 || static_cast<std::size_t>(lab) >= k)
            throw UsageError("cross_entropy: label out of range");

    auto probs = std::make_shared<std::vector<double>>(n * k);
    std::vector<double> logp(k);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* z = logits.values().data() + r * k;
        log_softmax_row(z, logp.data(), k, 1.0);
        total -= logp[static_cast<std::size_t>(labels[r])];
        for (std::size_t i = 0; i < k; ++i) (*probs)[r * k + i] = std::exp(logp[i]);
    }
    total /= static_cast<double>(n);

    auto li = logits.impl();
    auto labs = std::make_shared<std::vector<int>>(labels);
    return Tensor::make_node({}, {total}, {logits}, [li, probs, labs, n, k](detail::TensorImpl& self) {
        if (!li->requires_grad) return;
        li->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t i = 0; i < k; ++i) {
                double d = (*probs)[r * k + i];
                if (i == static_cast<std::size_t>((*labs)[r])) d -= 1.0;
                li->grad[r * k + i] += g * d;
            }
    });
}

Tensor cross_entropy(const Tensor& logits, int label) {
    if (logits.rank() != 1) throw DimensionError("cross_entropy: rank-1 logits required");
    return cross_entropy_batch(reshape(logits, {1, logits.numel()}), {label});
}

Tensor nontarget_probs(const Tensor& logits, int t) {
    if (logits.rank() != 1) throw DimensionError("nontarget_probs: rank-1 logits required");
    const std::size_t k = logits.numel();
    if (k < 2) throw UsageError("nontarget_probs: at least two classes required");
    if (t < 0 || static_cast<std::size_t>(t) >= k)
        throw UsageError("nontarget_probs: target index out of range");

    std::vector<double> full(k);
    nontarget_softmax_row(logits.values().data(), full.data(), k, static_cast<std::size_t>(t));
    std::vector<double> out;
    out.reserve(k - 1);
    for (std::size_t i = 0; i < k; ++i)
        if (i != static_cast<std::size_t>(t)) out.push_back(full[i]);

    auto li = logits.impl();
    auto p = std::make_shared<std::vector<double>>(out);
    const std::size_t ts = static_cast<std::size_t>(t);
    return Tensor::make_node(
        {k - 1}, std::move(out), {logits}, [li, p, ts](detail::TensorImpl& self) {
            if (!li->requires_grad) return;
            li->ensure_grad();
            double dot = 0.0;
            for (std::size_t o = 0; o < p->size(); ++o) dot += self.grad[o] * (*p)[o];
            std::size_t o = 0;
            for (std::size_t i = 0; i < li->value.size(); ++i) {
                if (i == ts) continue;
                li->grad[i] += (*p)[o] * (self.grad[o] - dot);
                ++o;
            }
        });
}

Tensor nt_loss_batch(const Tensor& student_logits, const std::vector<double>& teacher_logits,
                     const std::vector<int>& targets) {
    require_batch_logits(student_logits, targets.size(), "nt_loss");
    const std::size_t n = student_logits.dim(0), k = student_logits.dim(1);
    if (k < 2) throw UsageError("nt_loss: at least two classes required");
    if (teacher_logits.size() != n * k)
        throw UsageError("nt_loss: teacher logits do not match student shape");
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= k)
            throw UsageError("nt_loss: target index out of range");
    for (double z : teacher_logits)
        if (!std::isfinite(z)) throw NumericError("nt_loss: non-finite teacher logit");

    // Per-row: teacher non-target probs q, student non-target probs p;
    // loss = -sum_{i != t} q_i log p_i, d loss/dz_i = p_i - q_i.
    auto q = std::make_shared<std::vector<double>>(n * k);
    auto p = std::make_shared<std::vector<double>>(n * k);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t t = static_cast<std::size_t>(targets[r]);
        nontarget_softmax_row(teacher_logits.data() + r * k, q->data() + r * k, k, t);
        nontarget_softmax_row(student_logits.values().data() + r * k, p->data() + r * k, k, t);
        for (std::size_t i = 0; i < k; ++i) {
            if (i == t || (*q)[r * k + i] == 0.0) continue;
            total -= (*q)[r * k + i] * std::log((*p)[r * k + i]);
        }
    }
    total /= static_cast<double>(n);

    auto si = student_logits.impl();
    auto tg = std::make_shared<std::vector<int>>(targets);
    return Tensor::make_node({}, {total}, {student_logits},
                             [si, q, p, tg, n, k](detail::TensorImpl& self) {
                                 if (!si->requires_grad) return;
                                 si->ensure_grad();
                                 const double g = self.grad[0] / static_cast<double>(n);
                                 for (std::size_t r = 0; r < n; ++r) {
                                     const std::size_t t = static_cast<std::size_t>((*tg)[r]);
                                     for (std::size_t i = 0; i < k; ++i) {
                                         if (i == t) continue;
                                         si->grad[r * k + i] +=
                                             g * ((*p)[r * k + i] - (*q)[r * k + i]);
                                     }
                                 }
                             });
}

Tensor nt_loss(const SoftLabel& teacher, const Tensor& student_logits) {
    if (student_logits.rank() != 1) throw DimensionError("nt_loss: rank-1 logits required");
    if (teacher.logits.size() != student_logits.numel())
        throw UsageError("nt_loss: class count mismatch between teacher and student");
    return nt_loss_batch(reshape(student_logits, {1, student_logits.numel()}), teacher.logits,
                         {teacher.target_index});
}

namespace {

// Mean over rows of KL(p_teacher || p_student) at temperature T, teacher side
// fixed. d/dz_i = (q_i - p_i) / (N * T).
Tensor kl_temp_batch(const Tensor& student_logits, const std::vector<double>& teacher_logits,
                     double temperature) {
    const std::size_t n = student_logits.dim(0), k = student_logits.dim(1);
    auto pt = std::make_shared<std::vector<double>>(n * k);  // teacher probs
    auto qs = std::make_shared<std::vector<double>>(n * k);  // student probs
    std::vector<double> logq(k), logp(k);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        log_softmax_row(teacher_logits.data() + r * k, logp.data(), k, temperature);
        log_softmax_row(student_logits.values().data() + r * k, logq.data(), k, temperature);
        for (std::size_t i = 0; i < k; ++i) {
            const double pv = std::exp(logp[i]);
            (*pt)[r * k + i] = pv;
            (*qs)[r * k + i] = std::exp(logq[i]);
            total += pv * (logp[i] - logq[i]);
        }
    }
    total /= static_cast<double>(n);

    auto si = student_logits.impl();
    return Tensor::make_node({}, {total}, {student_logits},
                             [si, pt, qs, n, k, temperature](detail::TensorImpl& self) {
                                 if (!si->requires_grad) return;
                                 si->ensure_grad();
                                 const double g =
                                     self.grad[0] / (static_cast<double>(n) * temperature);
                                 for (std::size_t i = 0; i < n * k; ++i)
                                     si->grad[i] += g * ((*qs)[i] - (*pt)[i]);
                             });
}

}  // namespace

Tensor ml_student_loss_batch(const Tensor& student_logits,
                             const std::vector<double>& teacher_logits,
                             const std::vector<int>& labels, double alpha, double temperature,
                             bool t2_scale) {
    require_batch_logits(student_logits, labels.size(), "ml_student_loss");
    if (alpha < 0.0 || alpha > 1.0)
        throw ConfigError("ml_student_loss: alpha must lie in [0,1]");
    if (!(temperature > 0.0)) throw ConfigError("ml_student_loss: temperature must be positive");
    if (teacher_logits.size() != student_logits.numel())
        throw UsageError("ml_student_loss: teacher logits do not match student shape");

    Tensor kl = kl_temp_batch(student_logits, teacher_logits, temperature);
    Tensor ce = cross_entropy_batch(student_logits, labels);
    const double kl_weight = alpha * (t2_scale ? temperature * temperature : 1.0);
    return add(scale(kl, kl_weight), scale(ce, 1.0 - alpha));
}

Tensor ml_student_loss(const Tensor& student_logits, const Tensor& teacher_logits, int label,
                       double alpha, double temperature, bool t2_scale) {
    if (student_logits.rank() != 1 || teacher_logits.rank() != 1)
        throw DimensionError("ml_student_loss: rank-1 logits required");
    if (student_logits.numel() != teacher_logits.numel())
        throw UsageError("ml_student_loss: class count mismatch");
    return ml_student_loss_batch(reshape(student_logits, {1, student_logits.numel()}),
                                 teacher_logits.values(), {label}, alpha, temperature, t2_scale);
}

Tensor ml_teacher_loss_batch(const std::vector<Tensor>& teacher_taps,
                             const std::vector<Tensor>& student_taps,
                             const Tensor& teacher_logits, const std::vector<int>& labels,
                             double beta) {
    if (teacher_taps.size() != student_taps.size())
        throw UsageError("ml_teacher_loss: tap list length mismatch");
    if (beta < 0.0) throw ConfigError("ml_teacher_loss: beta must be nonnegative");
    for (std::size_t l = 0; l < teacher_taps.size(); ++l)
        if (teacher_taps[l].shape() != student_taps[l].shape())
            throw UsageError("ml_teacher_loss: tap shape mismatch");

    Tensor total = scale(cross_entropy_batch(teacher_logits, labels), beta);
    for (std::size_t l = 0; l < teacher_taps.size(); ++l) {
        Tensor diff = sub(teacher_taps[l], student_taps[l].detach());
        total = add(total, mean(mul(diff, diff)));
    }
    return total;
}

Tensor ml_teacher_loss(const std::vector<Tensor>& teacher_taps,
                       const std::vector<Tensor>& student_taps, const Tensor& teacher_logits,
                       int label, double beta) {
    if (teacher_logits.rank() != 1)
        throw DimensionError("ml_teacher_loss: rank-1 logits required");
    return ml_teacher_loss_batch(teacher_taps, student_taps,
                                 reshape(teacher_logits, {1, teacher_logits.numel()}), {label},
                                 beta);
}

Tensor attention_map(const Tensor& tap) {
    if (tap.rank() != 3) throw UsageError("attention_map: [C,H,W] tap required");
    const std::size_t c = tap.dim(0), h = tap.dim(1), w = tap.dim(2);
    std::vector<double> out(h * w, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < h * w; ++p) {
            const double v = tap.values()[ci * h * w + p];
            out[p] += v * v;
        }
    auto ti = tap.impl();
    return Tensor::make_node({h, w}, std::move(out), {tap}, [ti, c, h, w](detail::TensorImpl& self) {
        if (!ti->requires_grad) return;
        ti->ensure_grad();
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t p = 0; p < h * w; ++p)
                ti->grad[ci * h * w + p] += 2.0 * ti->value[ci * h * w + p] * self.grad[p];
    });
}

double der(double asr_before, double asr_after, double ba_before, double ba_after) {
    for (double v : {asr_before, asr_after, ba_before, ba_after})
        if (!(v >= 0.0 && v <= 1.0)) throw UsageError("der: inputs must lie in [0,1]");
    const double d_asr = asr_before - asr_after;
    const double d_ba = ba_before - ba_after;
    return (std::max(0.0, d_asr) - std::max(0.0, d_ba) + 1.0) / 2.0;
}

}  // namespace ntml
