"""Analytic multiply-accumulate and parameter counts for similarity heads.

One multiply-accumulate is one MAC and every bias addition on an output
element is one more. MVC counts include kernel generation.
"""
from __future__ import annotations


def _mvc(views, q, s, d):
    macs = params = 0
    prev_views, width = None, d
    for i, v in enumerate(views):
        if i == 0:
            gen = d * d + v * d + v * d  # w_l h, w_c outer product, + b_k
            apply = q * v * d + q * v
            params += d * d + v + v * d + v
            kw = d
        else:
            gen = prev_views * width + v * prev_views + v * prev_views
            apply = q * v * prev_views + q * v
            params += width + v + v * prev_views + v
            kw = prev_views
        macs += s * gen + s * apply
        width, prev_views = kw, v
    return macs, params


def _concat(views, q, s, d):
    macs = params = 0
    cin = 2 * d
    for cout in views:
        macs += q * s * (cin * cout + cout)
        params += cin * cout + cout
        cin = cout
    return macs, params


def count_macs_params(kind: str, views=(), q: int = 10000, s: int = 1, d: int = 128) -> tuple[int, int]:
    views = tuple(int(v) for v in views)
    if min(q, s, d) < 1:
        raise ValueError("query count, support count and dimension must be positive")
    if kind == "inner":
        return q * s * d, 0
    if kind == "mvc":
        return _mvc(views, q, s, d)
    if kind == "concatconv":
        return _concat(views, q, s, d)
    raise ValueError(f"unknown head kind {kind!r}")


# rows of the complexity comparison at Q=10000, S=1, D=128
REFERENCE_ROWS = (
    ("inner", ()),
    ("mvc", (1,)),
    ("mvc", (8, 1)),
    ("mvc", (64, 1)),
    ("mvc", (64, 16, 1)),
    ("concatconv", (64, 16, 1)),
)
