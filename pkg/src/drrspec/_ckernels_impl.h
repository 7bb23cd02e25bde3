/* Inner loops for _ckernels.pyx. Fixed accumulation order per build. */
#ifndef DRRSPEC_CKERNELS_IMPL_H
#define DRRSPEC_CKERNELS_IMPL_H

#include <stddef.h>

static inline void drr_axpy(double *restrict y, double a, const double *restrict x,
                            ptrdiff_t n)
{
    #pragma omp simd
    for (ptrdiff_t i = 0; i < n; ++i)
        y[i] += a * x[i];
}

static inline double drr_dot(const double *restrict a, const double *restrict b, ptrdiff_t n)
{
    double acc = 0.0;
    #pragma omp simd reduction(+:acc)
    for (ptrdiff_t i = 0; i < n; ++i)
        acc += a[i] * b[i];
    return acc;
}

#endif
