/* Single-pass CPU evaluation of a small rectifier MLP.
 *
 * The whole network is evaluated panel-by-panel over the batch so that
 * activations stay in L1/L2; weights are repacked into column panels for
 * contiguous SIMD access. An AVX-512 micro-kernel (6 rows x 64 columns of
 * accumulators) carries the hidden layers; a portable scalar path is kept
 * for other targets.
 */

#include <stdlib.h>
#include <string.h>
#include "fused_mlp.h"

#define HID 128
#define PANEL 144

int sgs_mlp_supported(const int* dims, int nlayers)
{
    if (nlayers < 2 || dims[0] > HID || dims[nlayers] > HID)
        return 0;
    for (int l = 1; l < nlayers; ++l)
        if (dims[l] != HID)
            return 0;
    return 1;
}

/* ---- packed layouts ---------------------------------------------------- */

#define NB 64

/* [N/NB][K][NB] column panels */
static void pack_w(const float* W, int K, int N, float* P)
{
    for (int jb = 0; jb < N; jb += NB) {
        int nb = N - jb < NB ? N - jb : NB;
        for (int k = 0; k < K; ++k) {
            memcpy(P, W + (size_t)k * N + jb, (size_t)nb * sizeof(float));
            P += nb;
        }
    }
}

static void transpose(const float* W, int K, int N, float* T)
{
    for (int j = 0; j < N; ++j)
        for (int k = 0; k < K; ++k)
            T[(size_t)j * K + k] = W[(size_t)k * N + j];
}

/* ---- micro-kernels ----------------------------------------------------- */

#if defined(__AVX512F__)

#include <immintrin.h>
#define MR 6

static __m512 relu512(__m512 v) { return _mm512_max_ps(v, _mm512_setzero_ps()); }

/* C[rows x 128] = act(A[rows x K] @ W + b); W packed with pack_w */
static void layer128(const float* restrict A, int lda, const float* restrict Wp,
                     const float* restrict b, float* restrict C, int rows,
                     int K, int relu)
{
    for (int jb = 0; jb < HID; jb += NB) {
        const float* wpanel = Wp + (size_t)(jb / NB) * K * NB;
        __m512 bv0 = _mm512_loadu_ps(b + jb), bv1 = _mm512_loadu_ps(b + jb + 16),
               bv2 = _mm512_loadu_ps(b + jb + 32), bv3 = _mm512_loadu_ps(b + jb + 48);
        int i = 0;
        for (; i + MR <= rows; i += MR) {
            __m512 acc[MR][4];
            for (int r = 0; r < MR; ++r) {
                acc[r][0] = bv0; acc[r][1] = bv1; acc[r][2] = bv2; acc[r][3] = bv3;
            }
            const float* a = A + (size_t)i * lda;
            const float* w = wpanel;
#pragma GCC unroll 2
            for (int k = 0; k < K; ++k, w += NB) {
                __m512 w0 = _mm512_loadu_ps(w), w1 = _mm512_loadu_ps(w + 16),
                       w2 = _mm512_loadu_ps(w + 32), w3 = _mm512_loadu_ps(w + 48);
                for (int r = 0; r < MR; ++r) {
                    __m512 x = _mm512_set1_ps(a[(size_t)r * lda + k]);
                    acc[r][0] = _mm512_fmadd_ps(x, w0, acc[r][0]);
                    acc[r][1] = _mm512_fmadd_ps(x, w1, acc[r][1]);
                    acc[r][2] = _mm512_fmadd_ps(x, w2, acc[r][2]);
                    acc[r][3] = _mm512_fmadd_ps(x, w3, acc[r][3]);
                }
            }
            for (int r = 0; r < MR; ++r) {
                float* c = C + (size_t)(i + r) * HID + jb;
                __m512 v0 = acc[r][0], v1 = acc[r][1], v2 = acc[r][2], v3 = acc[r][3];
                if (relu) { v0 = relu512(v0); v1 = relu512(v1); v2 = relu512(v2); v3 = relu512(v3); }
                _mm512_storeu_ps(c, v0); _mm512_storeu_ps(c + 16, v1);
                _mm512_storeu_ps(c + 32, v2); _mm512_storeu_ps(c + 48, v3);
            }
        }
        for (; i < rows; ++i) {
            __m512 a0 = bv0, a1 = bv1, a2 = bv2, a3 = bv3;
            const float* a = A + (size_t)i * lda;
            const float* w = wpanel;
            for (int k = 0; k < K; ++k, w += NB) {
                __m512 x = _mm512_set1_ps(a[k]);
                a0 = _mm512_fmadd_ps(x, _mm512_loadu_ps(w), a0);
                a1 = _mm512_fmadd_ps(x, _mm512_loadu_ps(w + 16), a1);
                a2 = _mm512_fmadd_ps(x, _mm512_loadu_ps(w + 32), a2);
                a3 = _mm512_fmadd_ps(x, _mm512_loadu_ps(w + 48), a3);
            }
            float* c = C + (size_t)i * HID + jb;
            if (relu) { a0 = relu512(a0); a1 = relu512(a1); a2 = relu512(a2); a3 = relu512(a3); }
            _mm512_storeu_ps(c, a0); _mm512_storeu_ps(c + 16, a1);
            _mm512_storeu_ps(c + 32, a2); _mm512_storeu_ps(c + 48, a3);
        }
    }
}

/* C[rows x N] = A[rows x 128] @ Wt^T + b; Wt is [N][128] (transposed) */
static void narrow_layer(const float* A, const float* Wt, const float* b,
                         float* C, int rows, int N, int ldc)
{
    for (int i = 0; i < rows; ++i) {
        const float* a = A + (size_t)i * HID;
        float* c = C + (size_t)i * ldc;
        __m512 a0 = _mm512_loadu_ps(a),      a1 = _mm512_loadu_ps(a + 16),
               a2 = _mm512_loadu_ps(a + 32), a3 = _mm512_loadu_ps(a + 48),
               a4 = _mm512_loadu_ps(a + 64), a5 = _mm512_loadu_ps(a + 80),
               a6 = _mm512_loadu_ps(a + 96), a7 = _mm512_loadu_ps(a + 112);
        for (int j = 0; j < N; ++j) {
            const float* w = Wt + (size_t)j * HID;
            __m512 s = _mm512_mul_ps(a0, _mm512_loadu_ps(w));
            s = _mm512_fmadd_ps(a1, _mm512_loadu_ps(w + 16), s);
            s = _mm512_fmadd_ps(a2, _mm512_loadu_ps(w + 32), s);
            s = _mm512_fmadd_ps(a3, _mm512_loadu_ps(w + 48), s);
            s = _mm512_fmadd_ps(a4, _mm512_loadu_ps(w + 64), s);
            s = _mm512_fmadd_ps(a5, _mm512_loadu_ps(w + 80), s);
            s = _mm512_fmadd_ps(a6, _mm512_loadu_ps(w + 96), s);
            s = _mm512_fmadd_ps(a7, _mm512_loadu_ps(w + 112), s);
            c[j] = (b ? b[j] : 0.0f) + _mm512_reduce_add_ps(s);
        }
    }
}

#else /* portable scalar fallback */

static void layer128(const float* A, int lda, const float* Wp, const float* b,
                     float* C, int rows, int K, int relu)
{
    for (int jb = 0; jb < HID; jb += NB) {
        const float* wpanel = Wp + (size_t)(jb / NB) * K * NB;
        for (int i = 0; i < rows; ++i) {
            float acc[NB];
            for (int j = 0; j < NB; ++j) acc[j] = b[jb + j];
            const float* a = A + (size_t)i * lda;
            const float* w = wpanel;
            for (int k = 0; k < K; ++k, w += NB) {
                float x = a[k];
                for (int j = 0; j < NB; ++j) acc[j] += x * w[j];
            }
            float* c = C + (size_t)i * HID + jb;
            for (int j = 0; j < NB; ++j)
                c[j] = relu && acc[j] < 0.0f ? 0.0f : acc[j];
        }
    }
}

static void narrow_layer(const float* A, const float* Wt, const float* b,
                         float* C, int rows, int N, int ldc)
{
    for (int i = 0; i < rows; ++i) {
        const float* a = A + (size_t)i * HID;
        float* c = C + (size_t)i * ldc;
        for (int j = 0; j < N; ++j) {
            const float* w = Wt + (size_t)j * HID;
            float s = b ? b[j] : 0.0f;
            for (int k = 0; k < HID; ++k) s += a[k] * w[k];
            c[j] = s;
        }
    }
}

#endif

/* first layer: pad input rows to a 128-wide zero-extended panel so the
 * packed kernel can consume an arbitrary input width */
static void pad_rows(const float* X, int rows, int in_dim, float* P)
{
    for (int i = 0; i < rows; ++i) {
        memcpy(P + (size_t)i * HID, X + (size_t)i * in_dim,
               (size_t)in_dim * sizeof(float));
        memset(P + (size_t)i * HID + in_dim, 0,
               (size_t)(HID - in_dim) * sizeof(float));
    }
}

static const float* layer_w(const float* weights, const int* dims, int l)
{
    size_t off = 0;
    for (int i = 0; i < l; ++i) off += (size_t)dims[i] * dims[i + 1];
    return weights + off;
}

static const float* layer_b(const float* biases, const int* dims, int l)
{
    size_t off = 0;
    for (int i = 0; i < l; ++i) off += dims[i + 1];
    return biases + off;
}

/* Reused per-thread scratch; avoids mmap/page-fault churn on every call. */
static __thread float* scratch_buf = NULL;
static __thread size_t scratch_cap = 0;

static float* get_scratch(size_t floats)
{
    if (scratch_cap < floats) {
        free(scratch_buf);
        size_t bytes = ((floats * sizeof(float)) + 63) & ~(size_t)63;
        scratch_buf = aligned_alloc(64, bytes);
        scratch_cap = floats;
    }
    return scratch_buf;
}

void sgs_mlp_forward(const float* X, int batch, const int* dims, int nlayers,
                     const float* weights, const float* biases, float* Y)
{
    int in_dim = dims[0], out_dim = dims[nlayers];
    size_t packed = 0;
    for (int l = 0; l < nlayers - 1; ++l)
        packed += (size_t)dims[l] * HID;
    float* Wp = get_scratch(packed + (size_t)out_dim * HID);
    float* Wt_last = Wp + packed;
    float* p = Wp;
    for (int l = 0; l < nlayers - 1; ++l) {
        pack_w(layer_w(weights, dims, l), dims[l], HID, p);
        p += (size_t)dims[l] * HID;
    }
    transpose(layer_w(weights, dims, nlayers - 1), HID, out_dim, Wt_last);

    /* Row panels are independent, so large batches fan out across cores
     * with bit-identical results regardless of the thread count. */
    int npanels = (batch + PANEL - 1) / PANEL;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (batch >= 1024)
#endif
    for (int pi = 0; pi < npanels; ++pi) {
        int r = pi * PANEL;
        int rows = batch - r < PANEL ? batch - r : PANEL;
        float b0[PANEL * HID], b1[PANEL * HID];
        const float* in = X + (size_t)r * in_dim;
        layer128(in, in_dim, Wp, layer_b(biases, dims, 0), b0, rows, in_dim, 1);
        float* cur = b0;
        float* nxt = b1;
        const float* wp = Wp + (size_t)in_dim * HID;
        for (int l = 1; l < nlayers - 1; ++l) {
            layer128(cur, HID, wp, layer_b(biases, dims, l), nxt, rows, HID, 1);
            wp += (size_t)HID * HID;
            float* t = cur; cur = nxt; nxt = t;
        }
        narrow_layer(cur, Wt_last, layer_b(biases, dims, nlayers - 1),
                     Y + (size_t)r * out_dim, rows, out_dim, out_dim);
    }
}

void sgs_mlp_backward(const float* X, int batch, const int* dims, int nlayers,
                      const float* weights, const float* biases,
                      const float* dY, float* dW, float* db, float* dX)
{
    int in_dim = dims[0], out_dim = dims[nlayers];
    size_t packed = 0;
    for (int l = 0; l < nlayers - 1; ++l)
        packed += (size_t)dims[l] * HID;
    size_t sz_wtp = (size_t)(nlayers - 2) * HID * HID;
    size_t sz_acts = (size_t)nlayers * PANEL * HID;
    float* Wp = get_scratch(packed + sz_wtp + (size_t)HID * HID
                            + (size_t)out_dim * HID + sz_acts
                            + (size_t)2 * PANEL * HID + HID);
    float* WtP = Wp + packed;
    float* tmp = WtP + sz_wtp;
    float* WtLp = tmp + (size_t)HID * HID;
    float* acts = WtLp + (size_t)out_dim * HID;
    float* dz = acts + sz_acts;
    float* zeros = dz + (size_t)2 * PANEL * HID;
    memset(zeros, 0, HID * sizeof(float));

    float* p = Wp;
    for (int l = 0; l < nlayers - 1; ++l) {
        pack_w(layer_w(weights, dims, l), dims[l], HID, p);
        p += (size_t)dims[l] * HID;
    }
    /* transposed weights, packed, for gradient propagation */
    for (int l = 1; l < nlayers - 1; ++l) {
        transpose(layer_w(weights, dims, l), HID, HID, tmp);
        pack_w(tmp, HID, HID, WtP + (size_t)(l - 1) * HID * HID);
    }
    /* last layer transposed (out_dim x 128) packed for layer128 (K=out_dim) */
    transpose(layer_w(weights, dims, nlayers - 1), HID, out_dim, tmp);
    pack_w(tmp, out_dim, HID, WtLp);

    for (int r = 0; r < batch; r += PANEL) {
        int rows = batch - r < PANEL ? batch - r : PANEL;
        /* forward, keeping post-activation of every layer */
        float* A0 = acts;
        pad_rows(X + (size_t)r * in_dim, rows, in_dim, A0);
        const float* wp = Wp;
        for (int l = 0; l < nlayers - 1; ++l) {
            layer128(acts + (size_t)l * PANEL * HID, HID, wp,
                     layer_b(biases, dims, l),
                     acts + (size_t)(l + 1) * PANEL * HID, rows, dims[l], 1);
            wp += (size_t)dims[l] * HID;
        }

        /* output layer grads */
        const float* dYp = dY + (size_t)r * out_dim;
        const float* Alast = acts + (size_t)(nlayers - 1) * PANEL * HID;
        float* dWl = dW; float* dbl = db;
        for (int l = 0; l < nlayers - 1; ++l) {
            dWl += (size_t)dims[l] * dims[l + 1];
            dbl += dims[l + 1];
        }
        for (int i = 0; i < rows; ++i)
            for (int k = 0; k < HID; ++k) {
                float a = Alast[(size_t)i * HID + k];
                if (a != 0.0f)
                    for (int j = 0; j < out_dim; ++j)
                        dWl[(size_t)k * out_dim + j] += a * dYp[(size_t)i * out_dim + j];
            }
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < out_dim; ++j)
                dbl[j] += dYp[(size_t)i * out_dim + j];

        /* dA into the last hidden layer: dY @ W_last^T via packed kernel */
        float* padY = dz + PANEL * HID;
        pad_rows(dYp, rows, out_dim, padY);
        layer128(padY, HID, WtLp, zeros, dz, rows, out_dim, 0);

        for (int l = nlayers - 2; l >= 0; --l) {
            /* dZ_l = dA ⊙ relu'(A_{l+1}) */
            const float* A = acts + (size_t)(l + 1) * PANEL * HID;
            for (int i = 0; i < rows * HID; ++i)
                if (A[i] == 0.0f) dz[i] = 0.0f;
            /* weight/bias grads for layer l */
            const float* Ain = acts + (size_t)l * PANEL * HID;
            dWl = dW; dbl = db;
            for (int m = 0; m < l; ++m) {
                dWl += (size_t)dims[m] * dims[m + 1];
                dbl += dims[m + 1];
            }
            int K = dims[l];
            for (int i = 0; i < rows; ++i)
                for (int k = 0; k < K; ++k) {
                    float a = Ain[(size_t)i * HID + k];
                    if (a != 0.0f)
                        for (int j = 0; j < HID; ++j)
                            dWl[(size_t)k * HID + j] += a * dz[(size_t)i * HID + j];
                }
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < HID; ++j)
                    dbl[j] += dz[(size_t)i * HID + j];
            if (l > 0) {
                layer128(dz, HID, WtP + (size_t)(l - 1) * HID * HID, zeros,
                         dz + PANEL * HID, rows, HID, 0);
                memcpy(dz, dz + PANEL * HID, (size_t)rows * HID * sizeof(float));
            }
        }
        if (dX) {
            /* dX = dZ_0 @ W_0^T; W_0 row-major (in_dim x 128) doubles as
             * the transposed layout for narrow_layer */
            narrow_layer(dz, layer_w(weights, dims, 0), NULL,
                         dX + (size_t)r * in_dim, rows, in_dim, in_dim);
        }
    }
}
