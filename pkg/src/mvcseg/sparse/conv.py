"""Submanifold sparse convolution as an autodiff primitive.

out[s] = bias + sum over offsets o with s+o active of W[o]^T in[s+o]
Outputs exist exactly at the input's active sites.
"""
from __future__ import annotations

import numpy as np

from ..autodiff import ShapeError, Tensor, apply_primitive, register
from .voxel import OFFSETS, Rulebook


def _fwd(arrs, neighbors=None, pairs=None):
    x, w, b = arrs
    n, k = neighbors.shape
    if x.ndim != 2 or x.shape[0] != n:
        raise ShapeError(f"subm_conv: features {x.shape} do not match {n} active sites")
    if w.shape[:2] != (k, x.shape[1]) or b.shape != (w.shape[2],):
        raise ShapeError(f"subm_conv: weights {w.shape} / bias {b.shape} incompatible with features {x.shape}")
    out = np.tile(b, (n, 1))
    # within one offset every site is at most one source and one destination,
    # so fancy-index accumulation is exact
    for o, (src, dst) in enumerate(pairs):
        if len(src):
            out[dst] += x[src] @ w[o]
    return out, None


def _bwd(g, arrs, out, saved, neighbors=None, pairs=None):
    x, w, b = arrs
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for o, (src, dst) in enumerate(pairs):
        if len(src):
            gd = g[dst]
            gw[o] = x[src].T @ gd
            gx[src] += gd @ w[o].T
    return gx, gw, g.sum(axis=0)


register("subm_conv", _fwd, _bwd)


def submanifold_conv(features, rulebook: Rulebook, weights, bias) -> Tensor:
    if len(OFFSETS) != rulebook.neighbors.shape[1]:
        raise ShapeError("rulebook does not cover a 3x3x3 kernel")
    return apply_primitive("subm_conv", [features, weights, bias], neighbors=rulebook.neighbors,
                           pairs=rulebook.pairs)
