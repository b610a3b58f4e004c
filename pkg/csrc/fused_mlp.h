#ifndef SGS_FUSED_MLP_H
#define SGS_FUSED_MLP_H

/* Fused evaluation of a small rectifier MLP with 128-wide hidden layers.
 *
 * dims: nlayers+1 widths; dims[0] = input, dims[nlayers] = output, all
 * intermediate widths must be 128 and dims[0], dims[nlayers] <= 128.
 * weights: concatenated row-major W_l (dims[l] x dims[l+1]);
 * biases: concatenated b_l (dims[l+1]).
 */

int sgs_mlp_supported(const int* dims, int nlayers);

void sgs_mlp_forward(const float* X, int batch, const int* dims, int nlayers,
                     const float* weights, const float* biases, float* Y);

/* Reverse-mode pass; recomputes activations panel-wise.
 * dW/db must be zero-initialized by the caller; dX may be NULL. */
void sgs_mlp_backward(const float* X, int batch, const int* dims, int nlayers,
                      const float* weights, const float* biases,
                      const float* dY, float* dW, float* db, float* dX);

#endif
