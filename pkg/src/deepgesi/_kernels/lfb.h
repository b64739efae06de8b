/* Fused filterbank kernels: "same" 1-D convolution of one signal with a bank
 * of kernels, rectify + average-pool, and the kernel gradient.
 *
 * All buffers are row-major float32.  `xpad` holds the signal with (L-1)/2
 * zeros on the left and at least (L-1)/2 + LFB_BLOCK zeros on the right so
 * that every vector load stays in bounds.
 */
#ifndef DEEPGESI_LFB_H
#define DEEPGESI_LFB_H

#include <math.h>
#include <string.h>
#include <stddef.h>
#include <stdint.h>

#if defined(__AVX512F__)
#define LFB_W 16
#else
#define LFB_W 8
#endif
#define LFB_BLOCK (2 * LFB_W)

typedef float lfb_vf __attribute__((vector_size(LFB_W * 4)));

static inline lfb_vf lfb_ld(const float *p)
{
    lfb_vf v;
    memcpy(&v, p, sizeof v);
    return v;
}

static inline void lfb_st(float *p, lfb_vf v)
{
    memcpy(p, &v, sizeof v);
}

static inline float lfb_hsum(lfb_vf v)
{
    float s = 0.0f;
    for (int i = 0; i < LFB_W; i++)
        s += v[i];
    return s;
}

static int lfb_is_symmetric(const float *h, ptrdiff_t L)
{
    for (ptrdiff_t k = 0; k < L / 2; k++)
        if (h[k] != h[L - 1 - k])
            return 0;
    return 1;
}

#define LFB_ROWS 8

/* LFB_ROWS output rows at a time.  y rows have stride ldy >= n rounded up to
 * LFB_BLOCK.  Symmetric kernels fold the mirrored taps before multiplying.
 * The row count is a compile-time constant so the accumulators stay in
 * registers. */
static void lfb_conv_rows(const float *xpad, const float *h, ptrdiff_t L,
                          float *y, ptrdiff_t ldy, ptrdiff_t n, int sym)
{
    ptrdiff_t M = L / 2;
    for (ptrdiff_t t0 = 0; t0 < n; t0 += LFB_BLOCK) {
        lfb_vf a[LFB_ROWS][2];
        for (int c = 0; c < LFB_ROWS; c++)
            a[c][0] = a[c][1] = (lfb_vf){0};
        if (sym) {
            const float *xp = xpad + t0 + M;
            lfb_vf u0 = lfb_ld(xp), u1 = lfb_ld(xp + LFB_W);
            for (int c = 0; c < LFB_ROWS; c++) {
                float hc = h[c * L + M];
                a[c][0] = hc * u0;
                a[c][1] = hc * u1;
            }
            for (ptrdiff_t k = 0; k < M; k++) {
                const float *xl = xpad + t0 + k;
                const float *xr = xpad + t0 + L - 1 - k;
                lfb_vf s0 = lfb_ld(xl) + lfb_ld(xr);
                lfb_vf s1 = lfb_ld(xl + LFB_W) + lfb_ld(xr + LFB_W);
                for (int c = 0; c < LFB_ROWS; c++) {
                    float hc = h[c * L + k];
                    a[c][0] += hc * s0;
                    a[c][1] += hc * s1;
                }
            }
        } else {
            for (ptrdiff_t k = 0; k < L; k++) {
                const float *xp = xpad + t0 + k;
                lfb_vf s0 = lfb_ld(xp), s1 = lfb_ld(xp + LFB_W);
                for (int c = 0; c < LFB_ROWS; c++) {
                    float hc = h[c * L + k];
                    a[c][0] += hc * s0;
                    a[c][1] += hc * s1;
                }
            }
        }
        for (int c = 0; c < LFB_ROWS; c++) {
            lfb_st(y + c * ldy + t0, a[c][0]);
            lfb_st(y + c * ldy + t0 + LFB_W, a[c][1]);
        }
    }
}

/* C must be a multiple of LFB_ROWS. */
static void lfb_conv(const float *xpad, const float *h, ptrdiff_t C,
                     ptrdiff_t L, float *y, ptrdiff_t ldy, ptrdiff_t n)
{
    int sym = 1;
    for (ptrdiff_t c = 0; c < C; c++)
        sym &= lfb_is_symmetric(h + c * L, L);
    for (ptrdiff_t c = 0; c < C; c += LFB_ROWS)
        lfb_conv_rows(xpad, h + c * L, L, y + c * ldy, ldy, n, sym);
}

static ptrdiff_t lfb_gcd(ptrdiff_t a, ptrdiff_t b)
{
    while (b) {
        ptrdiff_t r = a % b;
        a = b;
        b = r;
    }
    return a;
}

static inline lfb_vf lfb_vabs(lfb_vf v)
{
    typedef int32_t vi __attribute__((vector_size(LFB_W * 4)));
    vi b;
    memcpy(&b, &v, sizeof b);
    b &= 0x7fffffff;
    memcpy(&v, &b, sizeof v);
    return v;
}

/* seg[j] = sum of |row[j*g : (j+1)*g]| for j in [0, count). */
static void lfb_segment_sums(const float *row, ptrdiff_t g, ptrdiff_t count,
                             double *seg)
{
    for (ptrdiff_t j = 0; j < count; j++) {
        const float *p = row + j * g;
        lfb_vf a = {0};
        ptrdiff_t k = 0;
        for (; k + LFB_W <= g; k += LFB_W)
            a += lfb_vabs(lfb_ld(p + k));
        /* tree reduction: a serial chain here would dominate the loop */
        float t[LFB_W];
        memcpy(t, &a, sizeof t);
        for (int w = LFB_W / 2; w > 0; w /= 2)
            for (int i = 0; i < w; i++)
                t[i] += t[i + w];
        double s = (double)t[0];
        for (; k < g; k++)
            s += (double)fabsf(p[k]);
        seg[j] = s;
    }
}

static void lfb_frames_from_segments(const double *seg, ptrdiff_t per_frame,
                                     ptrdiff_t stride, ptrdiff_t win,
                                     ptrdiff_t T, float *pooled)
{
    for (ptrdiff_t f = 0; f < T; f++) {
        double s = 0.0;
        for (ptrdiff_t j = 0; j < per_frame; j++)
            s += seg[f * stride + j];
        pooled[f] = (float)(s / (double)win);
    }
}

/* pooled[c, f] = mean(|y[c, f*hop : f*hop + win]|).  Frames are assembled
 * from sums over segments of gcd(win, hop) samples so overlapping windows
 * do not re-read samples.  `seg` is scratch space for the segment sums of
 * one row. */
static void lfb_abs_pool(const float *y, ptrdiff_t C, ptrdiff_t ldy,
                         ptrdiff_t win, ptrdiff_t hop, ptrdiff_t T,
                         double *seg, float *pooled)
{
    ptrdiff_t g = lfb_gcd(win, hop);
    ptrdiff_t per_frame = win / g, stride = hop / g;
    ptrdiff_t nseg = (T - 1) * stride + per_frame;
    for (ptrdiff_t c = 0; c < C; c++) {
        lfb_segment_sums(y + c * ldy, g, nseg, seg);
        lfb_frames_from_segments(seg, per_frame, stride, win, T, pooled + c * T);
    }
}

/* Convolution and pooling in one sweep.  Each strip of LFB_ROWS rows is
 * produced in time chunks small enough to stay in L2 and its segment sums
 * are taken while the chunk is still cached, which saves a full pass over
 * y.  With y == NULL the convolution output is not kept at all and the
 * chunks go through `scratch` (LFB_ROWS * lfb_chunk_stride floats), which
 * avoids writing the whole [C, n] buffer to memory.  C must be a multiple of
 * LFB_ROWS; `seg` holds LFB_ROWS * nseg doubles; pooled has C rows of T. */
static ptrdiff_t lfb_chunk(ptrdiff_t g)
{
    /* a whole number of conv blocks and of segments */
    ptrdiff_t unit = g / lfb_gcd(g, LFB_BLOCK) * LFB_BLOCK;
    return (4096 + unit - 1) / unit * unit;
}

static ptrdiff_t lfb_chunk_stride(ptrdiff_t win, ptrdiff_t hop)
{
    return lfb_chunk(lfb_gcd(win, hop)) + LFB_BLOCK;
}

static void lfb_conv_pool(const float *xpad, const float *h, ptrdiff_t C,
                          ptrdiff_t L, float *y, ptrdiff_t ldy, ptrdiff_t n,
                          ptrdiff_t win, ptrdiff_t hop, ptrdiff_t T,
                          double *seg, float *scratch, float *pooled)
{
    int sym = 1;
    for (ptrdiff_t c = 0; c < C; c++)
        sym &= lfb_is_symmetric(h + c * L, L);
    ptrdiff_t g = lfb_gcd(win, hop);
    ptrdiff_t per_frame = win / g, stride = hop / g;
    ptrdiff_t nseg = (T - 1) * stride + per_frame;
    ptrdiff_t chunk = lfb_chunk(g);
    for (ptrdiff_t c = 0; c < C; c += LFB_ROWS) {
        for (ptrdiff_t t0 = 0; t0 < n; t0 += chunk) {
            ptrdiff_t len = n - t0 < chunk ? n - t0 : chunk;
            float *out = y ? y + c * ldy + t0 : scratch;
            ptrdiff_t ld = y ? ldy : lfb_chunk_stride(win, hop);
            lfb_conv_rows(xpad + t0, h + c * L, L, out, ld, len, sym);
            ptrdiff_t j0 = t0 / g, j1 = (t0 + len) / g;
            if (j1 > nseg)
                j1 = nseg;
            if (j1 > j0)
                for (int r = 0; r < LFB_ROWS; r++)
                    lfb_segment_sums(out + r * ld, g, j1 - j0, seg + r * nseg + j0);
        }
        for (int r = 0; r < LFB_ROWS; r++)
            lfb_frames_from_segments(seg + r * nseg, per_frame, stride, win, T,
                                     pooled + (c + r) * T);
    }
}

/* g[c, t] = sign(y[c, t]) / win * sum of dpooled[c, f] over frames f that
 * cover sample t.  g rows have stride ldy and are zero past n.  The frame
 * coverage is constant between consecutive frame edges, so each such segment
 * is filled with one value times the sign pattern.  `edges` is scratch space
 * for 2 * T + 2 entries. */
static void lfb_spread(const float *y, const float *dpooled, ptrdiff_t C,
                       ptrdiff_t ldy, ptrdiff_t n, ptrdiff_t win,
                       ptrdiff_t hop, ptrdiff_t T, double *prefix,
                       ptrdiff_t *edges, float *g)
{
    /* merge the sorted sequences f*hop and f*hop + win */
    ptrdiff_t ne = 0, i = 0, j = 0;
    while (i < T || j < T) {
        ptrdiff_t a = i < T ? i * hop : PTRDIFF_MAX;
        ptrdiff_t b = j < T ? j * hop + win : PTRDIFF_MAX;
        ptrdiff_t e = a < b ? a : b;
        if (e == a)
            i++;
        if (e == b)
            j++;
        if (ne == 0 || edges[ne - 1] != e)
            edges[ne++] = e;
    }
    for (ptrdiff_t c = 0; c < C; c++) {
        const float *dp = dpooled + c * T;
        prefix[0] = 0.0;
        for (ptrdiff_t f = 0; f < T; f++)
            prefix[f + 1] = prefix[f] + (double)dp[f];
        float *gr = g + c * ldy;
        const float *yr = y + c * ldy;
        memset(gr, 0, sizeof(float) * (size_t)ldy);
        for (ptrdiff_t s = 0; s + 1 < ne; s++) {
            ptrdiff_t t0 = edges[s], t1 = edges[s + 1];
            /* frames covering t0: ceil((t0 - win + 1) / hop) .. t0 / hop */
            ptrdiff_t hi = t0 / hop;
            ptrdiff_t lo = t0 - win + 1 <= 0 ? 0 : (t0 - win + hop) / hop;
            if (hi > T - 1)
                hi = T - 1;
            if (lo > hi)
                continue;
            float v = (float)((prefix[hi + 1] - prefix[lo]) / (double)win);
            for (ptrdiff_t t = t0; t < t1; t++)
                gr[t] = v * ((float)(yr[t] > 0.0f) - (float)(yr[t] < 0.0f));
        }
    }
}

/* Taps are processed in groups of LFB_TAP_GROUP; callers round L up to it. */
#define LFB_TAP_GROUP (2 * LFB_W)
#define LFB_CHUNK 1024

/* dh[c, k] = sum_{t < n} g[c, t] * xpad[t + k] for k < Lr.  C must be a
 * multiple of 4, Lr of LFB_TAP_GROUP, and xpad must extend n + Lr samples.
 * Vectorized over taps with float partial sums flushed to double per chunk. */
static void lfb_kernel_grad(const float *xpad, const float *g, ptrdiff_t C,
                            ptrdiff_t ldg, ptrdiff_t Lr, ptrdiff_t n,
                            double *dh)
{
    memset(dh, 0, sizeof(double) * (size_t)(C * Lr));
    for (ptrdiff_t s0 = 0; s0 < n; s0 += LFB_CHUNK) {
        ptrdiff_t s1 = s0 + LFB_CHUNK < n ? s0 + LFB_CHUNK : n;
        for (ptrdiff_t c0 = 0; c0 < C; c0 += 4) {
            const float *g0 = g + c0 * ldg, *g1 = g0 + ldg;
            const float *g2 = g1 + ldg, *g3 = g2 + ldg;
            for (ptrdiff_t k0 = 0; k0 < Lr; k0 += LFB_TAP_GROUP) {
                lfb_vf a00 = {0}, a01 = {0}, a10 = {0}, a11 = {0};
                lfb_vf a20 = {0}, a21 = {0}, a30 = {0}, a31 = {0};
                for (ptrdiff_t t = s0; t < s1; t++) {
                    lfb_vf x0 = lfb_ld(xpad + t + k0);
                    lfb_vf x1 = lfb_ld(xpad + t + k0 + LFB_W);
                    float b0 = g0[t], b1 = g1[t], b2 = g2[t], b3 = g3[t];
                    a00 += b0 * x0; a01 += b0 * x1;
                    a10 += b1 * x0; a11 += b1 * x1;
                    a20 += b2 * x0; a21 += b2 * x1;
                    a30 += b3 * x0; a31 += b3 * x1;
                }
                double *d = dh + c0 * Lr + k0;
                for (int i = 0; i < LFB_W; i++) {
                    d[i] += a00[i];
                    d[LFB_W + i] += a01[i];
                    d[Lr + i] += a10[i];
                    d[Lr + LFB_W + i] += a11[i];
                    d[2 * Lr + i] += a20[i];
                    d[2 * Lr + LFB_W + i] += a21[i];
                    d[3 * Lr + i] += a30[i];
                    d[3 * Lr + LFB_W + i] += a31[i];
                }
            }
        }
    }
}

#endif
