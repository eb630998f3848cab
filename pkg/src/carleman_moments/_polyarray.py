"""Sparse commutative polynomials stored as exponent/coefficient arrays."""

from __future__ import annotations

import numpy as np


class PolyArray:
    __slots__ = ("exps", "coefs")

    def __init__(self, exps: np.ndarray, coefs: np.ndarray):
        self.exps = np.asarray(exps, dtype=np.int64)
        self.coefs = np.asarray(coefs, dtype=float)

    @classmethod
    def one(cls, nvars: int) -> "PolyArray":
        return cls(np.zeros((1, nvars), dtype=np.int64), np.ones(1))

    def __len__(self):
        return self.coefs.size

    def multiply(self, other: "PolyArray", nstate: int | None = None, max_degree: int | None = None):
        """Product, dropping terms whose degree in the first ``nstate`` variables exceeds ``max_degree``."""
        d = self.exps.shape[1]
        e = (self.exps[:, None, :] + other.exps[None, :, :]).reshape(-1, d)
        c = np.multiply.outer(self.coefs, other.coefs).ravel()
        if max_degree is not None:
            keep = e[:, :nstate].sum(axis=1) <= max_degree
            e, c = e[keep], c[keep]
        return PolyArray(e, c).combined()

    def combined(self) -> "PolyArray":
        e, c = self.exps, self.coefs
        if c.size == 0:
            return self
        radix = e.max(axis=0) + 1
        if np.prod(radix.astype(float)) < 2.0**62:
            weights = np.concatenate([np.cumprod(radix[::-1])[::-1][1:], [1]])
            keys = e @ weights
            _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        else:
            _, first, inverse = np.unique(e, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.ravel()
        summed = np.bincount(inverse, weights=c, minlength=first.size)
        keep = summed != 0
        return PolyArray(e[first][keep], summed[keep])
