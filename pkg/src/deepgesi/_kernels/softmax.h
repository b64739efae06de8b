/* Row-wise softmax over a contiguous float32 matrix.
 *
 * exp is a Cody-Waite range reduction followed by a degree-6 polynomial,
 * accurate to about 2 ulp over the range reached after the max shift
 * (arguments <= 0).  Arguments below -87 flush to zero.
 */
#ifndef DEEPGESI_SOFTMAX_H
#define DEEPGESI_SOFTMAX_H

#include "lfb.h"

typedef int32_t lfb_vi __attribute__((vector_size(LFB_W * 4)));

/* C has no vector ?: so blend through the all-ones comparison mask */
static inline lfb_vf sm_sel(lfb_vi mask, lfb_vf a, lfb_vf b)
{
    lfb_vi ai, bi;
    memcpy(&ai, &a, sizeof ai);
    memcpy(&bi, &b, sizeof bi);
    ai = (ai & mask) | (bi & ~mask);
    memcpy(&a, &ai, sizeof a);
    return a;
}

static inline lfb_vf sm_exp(lfb_vf x)
{
    const lfb_vf lo = x - x - 87.0f;
    x = sm_sel(x < lo, lo, x);
    lfb_vf t = x * 1.44269504088896341f;
    /* round to nearest via the 1.5*2^23 trick */
    const lfb_vf magic = x - x + 12582912.0f;
    lfb_vf nf = (t + magic) - magic;
    lfb_vf r = x - nf * 0.693359375f;
    r = r + nf * 2.12194440e-4f;
    lfb_vf p = r - r + 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    lfb_vi e = __builtin_convertvector(nf, lfb_vi);
    e = (e + 127) << 23;
    lfb_vf scale;
    memcpy(&scale, &e, sizeof scale);
    lfb_vf out = p * scale;
    /* exp(-87) is ~1.6e-38; anything that far below the max contributes
     * nothing to the normalizer */
    return sm_sel(x <= lo, x - x, out);
}

static void softmax_rows(const float *x, float *y, ptrdiff_t rows,
                         ptrdiff_t n)
{
    const ptrdiff_t nv = n / LFB_W * LFB_W;
    for (ptrdiff_t r = 0; r < rows; r++) {
        const float *xr = x + r * n;
        float *yr = y + r * n;
        float m = -INFINITY;
        ptrdiff_t i = 0;
        if (nv) {
            lfb_vf mv = lfb_ld(xr);
            for (i = LFB_W; i < nv; i += LFB_W) {
                lfb_vf v = lfb_ld(xr + i);
                mv = sm_sel(v > mv, v, mv);
            }
            for (int j = 0; j < LFB_W; j++)
                m = mv[j] > m ? mv[j] : m;
        }
        for (i = nv; i < n; i++)
            m = xr[i] > m ? xr[i] : m;

        lfb_vf sv = {0};
        for (i = 0; i < nv; i += LFB_W) {
            lfb_vf e = sm_exp(lfb_ld(xr + i) - m);
            lfb_st(yr + i, e);
            sv += e;
        }
        float s = lfb_hsum(sv);
        if (nv < n) {
            /* one padded vector for the tail; -inf lanes come out as 0 */
            float buf[LFB_W];
            for (int j = 0; j < LFB_W; j++)
                buf[j] = -INFINITY;
            memcpy(buf, xr + nv, sizeof(float) * (size_t)(n - nv));
            lfb_vf e = sm_exp(lfb_ld(buf) - m);
            for (i = nv; i < n; i++) {
                yr[i] = e[i - nv];
                s += yr[i];
            }
        }

        const float inv = 1.0f / s;
        for (i = 0; i < nv; i += LFB_W)
            lfb_st(yr + i, lfb_ld(yr + i) * inv);
        for (i = nv; i < n; i++)
            yr[i] *= inv;
    }
}

#endif
