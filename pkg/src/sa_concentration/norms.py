"""The three iterate-space norms used throughout: euclidean, weighted
euclidean sqrt(x^T W x), and sup-norm.  All evaluations act on the last axis."""
from __future__ import annotations

import numpy as np
from scipy import linalg


class Norm:
    """A norm on R^d.

    Parameters
    ----------
    kind : {"euclidean", "weighted", "sup"}
    dim : int
    weight : ndarray, optional
        Symmetric positive definite matrix for ``kind="weighted"``.
    """

    def __init__(self, kind, dim, weight=None):
        if kind not in ("euclidean", "weighted", "sup"):
            raise ValueError("unknown norm kind %r" % kind)
        self.kind = kind
        self.dim = int(dim)
        if kind == "weighted":
            W = np.asarray(weight, dtype=float)
            if W.shape != (dim, dim):
                raise ValueError("weight must be d x d")
            W = 0.5 * (W + W.T)
            evals, evecs = linalg.eigh(W)
            if evals[0] <= 0:
                raise ValueError("weight must be positive definite")
            self.weight = W
            self._root = (evecs * np.sqrt(evals)) @ evecs.T
            self._iroot = (evecs / np.sqrt(evals)) @ evecs.T
            self._evals = evals
        else:
            self.weight = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.sqrt(np.sum(x * x, axis=-1))
        if self.kind == "sup":
            return np.max(np.abs(x), axis=-1)
        y = x @ self._root
        return np.sqrt(np.sum(y * y, axis=-1))

    def sq(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.sum(x * x, axis=-1)
        if self.kind == "sup":
            m = np.max(np.abs(x), axis=-1)
            return m * m
        y = x @ self._root
        return np.sum(y * y, axis=-1)

    def equivalence_to_euclidean(self):
        """(l, u) with l*|x|_2 <= |x| <= u*|x|_2."""
        if self.kind == "euclidean":
            return 1.0, 1.0
        if self.kind == "sup":
            return 1.0 / np.sqrt(self.dim), 1.0
        return float(np.sqrt(self._evals[0])), float(np.sqrt(self._evals[-1]))

    def operator_norm(self, A):
        """Induced norm of the matrix A."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if self.kind == "euclidean":
            return float(linalg.norm(A, 2))
        if self.kind == "sup":
            return float(np.max(np.sum(np.abs(A), axis=1)))
        return float(linalg.norm(self._root @ A @ self._iroot, 2))

    def project(self, x, center, radius):
        """Project rows of x onto the ball {|y - center| <= radius}.

        Radial scaling for the euclidean and weighted norms, coordinate
        clamping for the sup-norm.  Returns (projected, hit_mask).
        """
        x = np.asarray(x, dtype=float)
        diff = x - center
        if self.kind == "sup":
            hit = np.max(np.abs(diff), axis=-1) > radius
            out = np.where(hit[..., None], center + np.clip(diff, -radius, radius), x)
            return out, hit
        r = self(diff)
        hit = r > radius
        scale = np.where(hit, radius / np.where(hit, r, 1.0), 1.0)
        out = np.where(hit[..., None], center + diff * scale[..., None], x)
        return out, hit

    def describe(self):
        out = {"kind": self.kind, "dim": self.dim}
        if self.weight is not None:
            out["weight"] = self.weight.tolist()
        return out

    def __repr__(self):
        return "Norm(%s, d=%d)" % (self.kind, self.dim)
