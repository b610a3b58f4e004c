# cython: language_level=3, boundscheck=False, wraparound=False
"""Bindings for the fused C evaluation of the deformation MLP."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef extern from "fused_mlp.h":
    int sgs_mlp_supported(const int* dims, int nlayers) nogil
    void sgs_mlp_forward(const float* X, int batch, const int* dims,
                         int nlayers, const float* weights,
                         const float* biases, float* Y) nogil
    void sgs_mlp_backward(const float* X, int batch, const int* dims,
                          int nlayers, const float* weights,
                          const float* biases, const float* dY,
                          float* dW, float* db, float* dX) nogil


def supported(dims):
    cdef cnp.ndarray[cnp.int32_t, ndim=1] d = np.ascontiguousarray(dims, np.int32)
    return bool(sgs_mlp_supported(<const int*> d.data, d.shape[0] - 1))


def forward(cnp.ndarray[cnp.float32_t, ndim=2] x, dims,
            cnp.ndarray[cnp.float32_t, ndim=1] weights,
            cnp.ndarray[cnp.float32_t, ndim=1] biases):
    """Evaluate the network on a (batch, in_dim) float32 array."""
    cdef cnp.ndarray[cnp.int32_t, ndim=1] d = np.ascontiguousarray(dims, np.int32)
    cdef int nlayers = d.shape[0] - 1
    if not sgs_mlp_supported(<const int*> d.data, nlayers):
        raise ValueError("unsupported layer widths for the fused kernel")
    if x.shape[1] != d[0]:
        raise ValueError("input width does not match dims[0]")
    cdef cnp.ndarray[cnp.float32_t, ndim=2] xc = np.ascontiguousarray(x)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] y = np.empty(
        (x.shape[0], d[nlayers]), np.float32)
    with nogil:
        sgs_mlp_forward(<const float*> xc.data, xc.shape[0],
                        <const int*> d.data, nlayers,
                        <const float*> weights.data,
                        <const float*> biases.data,
                        <float*> y.data)
    return y


def backward(cnp.ndarray[cnp.float32_t, ndim=2] x, dims,
             cnp.ndarray[cnp.float32_t, ndim=1] weights,
             cnp.ndarray[cnp.float32_t, ndim=1] biases,
             cnp.ndarray[cnp.float32_t, ndim=2] dy,
             bint need_dx=True):
    """Gradients wrt flattened weights, biases and optionally the input."""
    cdef cnp.ndarray[cnp.int32_t, ndim=1] d = np.ascontiguousarray(dims, np.int32)
    cdef int nlayers = d.shape[0] - 1
    if not sgs_mlp_supported(<const int*> d.data, nlayers):
        raise ValueError("unsupported layer widths for the fused kernel")
    cdef cnp.ndarray[cnp.float32_t, ndim=2] xc = np.ascontiguousarray(x)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] dyc = np.ascontiguousarray(dy)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] dw = np.zeros(weights.shape[0], np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] db = np.zeros(biases.shape[0], np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] dx
    cdef float* dx_ptr = NULL
    if need_dx:
        dx = np.zeros((x.shape[0], d[0]), np.float32)
        dx_ptr = <float*> dx.data
    with nogil:
        sgs_mlp_backward(<const float*> xc.data, xc.shape[0],
                         <const int*> d.data, nlayers,
                         <const float*> weights.data,
                         <const float*> biases.data,
                         <const float*> dyc.data,
                         <float*> dw.data, <float*> db.data, dx_ptr)
    if need_dx:
        return dw, db, dx
    return dw, db, None
