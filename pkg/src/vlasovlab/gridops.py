"""Lattice convolution helpers shared by the field solver and the verifiers."""

import numpy as np

__all__ = ["offset_lattice", "lattice_convolve", "max_gradient_estimate"]


def offset_lattice(shape, h):
    """All pairwise cell-center offsets for a lattice of the given shape,
    as an array of shape (*(2n-1 per axis), d) centered on the zero offset."""
    axes = [np.arange(-(n - 1), n) * h for n in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack(grids, axis=-1)


def lattice_convolve(kernel_slab, masses):
    """Linear (non-periodic) convolution of per-cell masses with a kernel
    sampled on the offset lattice; returns the field on the original lattice.

    kernel_slab has shape (*(2n-1), ...) as produced from offset_lattice;
    trailing axes (e.g. force components) are convolved independently.
    """
    shape = masses.shape
    d = masses.ndim
    full = tuple(2 * n - 1 for n in shape)
    axes = tuple(range(d))
    trailing = kernel_slab.shape[d:]
    out = np.empty(shape + trailing)
    f_m = np.fft.rfftn(masses, s=full, axes=axes)
    for idx in np.ndindex(trailing if trailing else (1,)):
        slab = kernel_slab[(...,) + idx] if trailing else kernel_slab
        f_k = np.fft.rfftn(np.fft.ifftshift(slab, axes=axes), s=full, axes=axes)
        conv = np.fft.irfftn(f_m * f_k, s=full, axes=axes)
        block = conv[tuple(slice(0, n) for n in shape)]
        if trailing:
            out[(...,) + idx] = block
        else:
            out[...] = block
    return out


def max_gradient_estimate(field, h):
    """Max finite-difference slope of a (possibly vector-valued) lattice field:
    an estimate of its Lipschitz constant."""
    best = 0.0
    vec = field.ndim > 1 and field.shape[-1] <= 3 and field.ndim - 1 <= 3
    d = field.ndim - 1 if vec else field.ndim
    for ax in range(d):
        diff = np.diff(field, axis=ax) / h
        if vec:
            mag = np.sqrt((diff * diff).sum(axis=-1))
        else:
            mag = np.abs(diff)
        if mag.size:
            best = max(best, float(mag.max()))
    return best
