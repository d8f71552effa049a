#pragma once

#include <cstdint>

namespace ntml::kernels {

// Dense numeric kernels used by the tensor ops. The production versions are
// OpenMP-parallel over independent output elements; every output element is
// accumulated sequentially by exactly one thread, so results are bit-identical
// to the serial references regardless of thread count.
//
// All buffers are row-major f64, caller-allocated.

// c[m x n] = a[m x k] * b[k x n]
void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n);

// c[m x k] = a[m x n] * b[k x n]^T
void matmul_nt(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t n, std::int64_t k);

// c[k x n] = a[m x k]^T * b[m x n]
void matmul_tn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n);

// Cross-correlation with zero padding.
// in [N x C x H x W], ker [F x C x KH x KW] -> out [N x F x OH x OW]
void conv2d_forward(const double* in, const double* ker, double* out,
                    std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t f, std::int64_t kh, std::int64_t kw,
                    std::int64_t stride, std::int64_t pad);

// Gradient w.r.t. the input, gather form (parallel over input positions).
void conv2d_dinput(const double* dout, const double* ker, double* din,
                   std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                   std::int64_t f, std::int64_t kh, std::int64_t kw,
                   std::int64_t stride, std::int64_t pad);

// Gradient w.r.t. the kernel (parallel over filters).
void conv2d_dkernel(const double* dout, const double* in, double* dker,
                    std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t f, std::int64_t kh, std::int64_t kw,
                    std::int64_t stride, std::int64_t pad);

// 2x2 max pooling, stride 2. argmax records the flat input index chosen per
// output element (first max wins on ties).
void maxpool2x2_forward(const double* in, double* out, std::int64_t* argmax,
                        std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);

void maxpool2x2_backward(const double* dout, const std::int64_t* argmax, double* din,
                         std::int64_t out_count, std::int64_t in_count);

namespace ref {

// Serial naive-loop references, kept as oracles for the parallel kernels and
// for the benchmark tool.
void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n);

void conv2d_forward(const double* in, const double* ker, double* out,
                    std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t f, std::int64_t kh, std::int64_t kw,
                    std::int64_t stride, std::int64_t pad);

}  // namespace ref

}  // namespace ntml::kernels
