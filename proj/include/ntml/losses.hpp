#pragma once

#include <vector>

#include "ntml/tensor.hpp"

namespace ntml {

// One record of the soft-label dataset built after target training: the
// teacher's raw logits plus the sample's dataset label (the tampered label
// for poisoned samples).
struct SoftLabel {
    std::vector<double> logits;
    int target_index = 0;
};

// -log softmax(logits)[label]; differentiable in logits.
Tensor cross_entropy(const Tensor& logits, int label);

// Batch mean of per-row cross-entropy; logits [N,K].
Tensor cross_entropy_batch(const Tensor& logits, const std::vector<int>& labels);

// Softmax over all classes except t, order preserved with t removed.
// Output is rank-1 with K-1 entries and is invariant to the value of z_t.
Tensor nontarget_probs(const Tensor& logits, int t);

// Non-target training loss: -sum_{i != t} p_i^teacher * log p_i^student,
// where both distributions come from the non-target softmax. Differentiable
// in the student logits only; the teacher side is a fixed SoftLabel.
Tensor nt_loss(const SoftLabel& teacher, const Tensor& student_logits);

// Batch mean variant; student_logits [N,K], teacher_logits row-major N*K.
Tensor nt_loss_batch(const Tensor& student_logits, const std::vector<double>& teacher_logits,
                     const std::vector<int>& targets);

// Mutual-learning student objective:
//   alpha * KL(p_teacher || p_student) + (1 - alpha) * CE(student_logits, label)
// with both distributions softened over all K classes at temperature T.
// The teacher logits enter as fixed values (detached). When t2_scale is set
// the KL term is multiplied by T^2 (off by default).
Tensor ml_student_loss(const Tensor& student_logits, const Tensor& teacher_logits, int label,
                       double alpha, double temperature, bool t2_scale = false);

Tensor ml_student_loss_batch(const Tensor& student_logits,
                             const std::vector<double>& teacher_logits,
                             const std::vector<int>& labels, double alpha, double temperature,
                             bool t2_scale = false);

// Mutual-learning teacher objective: sum over taps of the per-element mean
// squared difference, plus beta * CE(teacher_logits, label). Student taps are
// detached inside; gradients flow only into the teacher.
Tensor ml_teacher_loss(const std::vector<Tensor>& teacher_taps,
                       const std::vector<Tensor>& student_taps, const Tensor& teacher_logits,
                       int label, double beta);

Tensor ml_teacher_loss_batch(const std::vector<Tensor>& teacher_taps,
                             const std::vector<Tensor>& student_taps,
                             const Tensor& teacher_logits, const std::vector<int>& labels,
                             double beta);

// Attention transform of a [C,H,W] tap: out[h,w] = sum_c tap[c,h,w]^2.
Tensor attention_map(const Tensor& tap);

// Defense Effectiveness Rating on fractions in [0,1]:
//   [max(0, asr_before - asr_after) - max(0, ba_before - ba_after) + 1] / 2
double der(double asr_before, double asr_after, double ba_before, double ba_after);

}  // namespace ntml
