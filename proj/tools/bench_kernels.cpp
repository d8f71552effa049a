// Timing comparison of the OpenMP kernels against the serial references,
// plus a max-abs-difference check between the two paths.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ntml/kernels.hpp"
#include "ntml/rng.hpp"

using namespace ntml;
using clock_type = std::chrono::steady_clock;

namespace {

double ms_since(clock_type::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("OpenMP not enabled; both paths run serially\n");
#endif

    Rng rng(42);
    const int reps = 5;

    {
        const std::int64_t m = 384, k = 384, n = 384;
        auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
        std::vector<double> c_ref(m * n), c_par(m * n);

        auto t0 = clock_type::now();
        for (int r = 0; r < reps; ++r) kernels::ref::matmul_nn(a.data(), b.data(), c_ref.data(), m, k, n);
        const double t_ref = ms_since(t0) / reps;

        t0 = clock_type::now();
        for (int r = 0; r < reps; ++r) kernels::matmul_nn(a.data(), b.data(), c_par.data(), m, k, n);
        const double t_par = ms_since(t0) / reps;

        std::printf("matmul %lldx%lldx%lld    serial %8.2f ms   parallel %8.2f ms   speedup %.2fx   maxdiff %.3g\n",
                    (long long)m, (long long)k, (long long)n, t_ref, t_par, t_ref / t_par,
                    max_abs_diff(c_ref, c_par));
    }

    {
        const std::int64_t n = 32, c = 8, h = 32, w = 32, f = 16, kh = 3, kw = 3;
        auto in = random_vec(n * c * h * w, rng), ker = random_vec(f * c * kh * kw, rng);
        std::vector<double> out_ref(n * f * h * w), out_par(n * f * h * w);

        auto t0 = clock_type::now();
        for (int r = 0; r < reps; ++r)
            kernels::ref::conv2d_forward(in.data(), ker.data(), out_ref.data(), n, c, h, w, f, kh, kw, 1, 1);
        const double t_ref = ms_since(t0) / reps;

        t0 = clock_type::now();
        for (int r = 0; r < reps; ++r)
            kernels::conv2d_forward(in.data(), ker.data(), out_par.data(), n, c, h, w, f, kh, kw, 1, 1);
        const double t_par = ms_since(t0) / reps;

        std::printf("conv2d 32x8x32x32/16f  serial %8.2f ms   parallel %8.2f ms   speedup %.2fx   maxdiff %.3g\n",
                    t_ref, t_par, t_ref / t_par, max_abs_diff(out_ref, out_par));
    }
    return 0;
}
