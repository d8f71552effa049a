#include "ntml/kernels.hpp"

namespace ntml::kernels {

void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t n, std::int64_t k) {
#pragma omp parallel for
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) acc += a[i * n + j] * b[p * n + j];
            c[i * k + p] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for
    for (std::int64_t p = 0; p < k; ++p) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < m; ++i) acc += a[i * k + p] * b[i * n + j];
            c[p * n + j] = acc;
        }
    }
}

void conv2d_forward(const double* in, const double* ker, double* out,
                    std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t f, std::int64_t kh, std::int64_t kw,
                    std::int64_t stride, std::int64_t pad) {
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
#pragma omp parallel for collapse(2)
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t fi = 0; fi < f; ++fi) {
            const double* kbase = ker + fi * c * kh * kw;
            double* obase = out + (ni * f + fi) * oh * ow;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (std::int64_t ci = 0; ci < c; ++ci) {
                        const double* ibase = in + (ni * c + ci) * h * w;
                        const double* kc = kbase + ci * kh * kw;
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                            const std::int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= w) continue;
                                acc += ibase[iy * w + ix] * kc[ky * kw + kx];
                            }
                        }
                    }
                    obase[oy * ow + ox] = acc;
                }
            }
        }
    }
}

void conv2d_dinput(const double* dout, const double* ker, double* din,
                   std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                   std::int64_t f, std::int64_t kh, std::int64_t kw,
                   std::int64_t stride, std::int64_t pad) {
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
#pragma omp parallel for collapse(2)
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t ci = 0; ci < c; ++ci) {
            double* dbase = din + (ni * c + ci) * h * w;
            for (std::int64_t iy = 0; iy < h; ++iy) {
                for (std::int64_t ix = 0; ix < w; ++ix) {
                    double acc = 0.0;
                    for (std::int64_t fi = 0; fi < f; ++fi) {
                        const double* gbase = dout + (ni * f + fi) * oh * ow;
                        const double* kc = ker + (fi * c + ci) * kh * kw;
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                            const std::int64_t num_y = iy + pad - ky;
                            if (num_y < 0 || num_y % stride != 0) continue;
                            const std::int64_t oy = num_y / stride;
                            if (oy >= oh) continue;
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t num_x = ix + pad - kx;
                                if (num_x < 0 || num_x % stride != 0) continue;
                                const std::int64_t ox = num_x / stride;
                                if (ox >= ow) continue;
                                acc += gbase[oy * ow + ox] * kc[ky * kw + kx];
                            }
                        }
                    }
                    dbase[iy * w + ix] += acc;
                }
            }
        }
    }
}

void conv2d_dkernel(const double* dout, const double* in, double* dker,
                    std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t f, std::int64_t kh, std::int64_t kw,
                    std::int64_t stride, std::int64_t pad) {
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
#pragma omp parallel for
    for (std::int64_t fi = 0; fi < f; ++fi) {
        for (std::int64_t ci = 0; ci < c; ++ci) {
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    double acc = 0.0;
                    for (std::int64_t ni = 0; ni < n; ++ni) {
                        const double* gbase = dout + (ni * f + fi) * oh * ow;
                        const double* ibase = in + (ni * c + ci) * h * w;
                        for (std::int64_t oy = 0; oy < oh; ++oy) {
                            const std::int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t ox = 0; ox < ow; ++ox) {
                                const std::int64_t ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= w) continue;
                                acc += gbase[oy * ow + ox] * ibase[iy * w + ix];
                            }
                        }
                    }
                    dker[((fi * c + ci) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
}

void maxpool2x2_forward(const double* in, double* out, std::int64_t* argmax,
                        std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    const std::int64_t oh = h / 2;
    const std::int64_t ow = w / 2;
    const std::int64_t planes = n * c;
#pragma omp parallel for
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* ibase = in + p * h * w;
        double* obase = out + p * oh * ow;
        std::int64_t* abase = argmax + p * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                std::int64_t best = (2 * oy) * w + 2 * ox;
                double bv = ibase[best];
                const std::int64_t cand[3] = {(2 * oy) * w + 2 * ox + 1,
                                              (2 * oy + 1) * w + 2 * ox,
                                              (2 * oy + 1) * w + 2 * ox + 1};
                for (std::int64_t idx : cand) {
                    if (ibase[idx] > bv) {
                        bv = ibase[idx];
                        best = idx;
                    }
                }
                obase[oy * ow + ox] = bv;
                abase[oy * ow + ox] = p * h * w + best;
            }
        }
    }
}

void maxpool2x2_backward(const double* dout, const std::int64_t* argmax, double* din,
                         std::int64_t out_count, std::int64_t in_count) {
    (void)in_count;
    // Pool windows are disjoint, so each input cell is written by at most one
    // output cell; serial accumulation keeps it simple.
    for (std::int64_t i = 0; i < out_count; ++i) din[argmax[i]] += dout[i];
}

namespace ref {

void matmul_nn(const double* a, const double* b, double* c,
               std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
}

void conv2d_forward(const double* in, const double* ker, double* out,
                    std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t f, std::int64_t kh, std::int64_t kw,
                    std::int64_t stride, std::int64_t pad) {
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t fi = 0; fi < f; ++fi)
            for (std::int64_t oy = 0; oy < oh; ++oy)
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (std::int64_t ci = 0; ci < c; ++ci)
                        for (std::int64_t ky = 0; ky < kh; ++ky)
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t iy = oy * stride - pad + ky;
                                const std::int64_t ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += in[((ni * c + ci) * h + iy) * w + ix] *
                                       ker[((fi * c + ci) * kh + ky) * kw + kx];
                            }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
}

}  // namespace ref

}  // namespace ntml::kernels
