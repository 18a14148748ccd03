"""Gaussian random projection between parameter space (p) and sketch space (d).

The p x d matrix P has i.i.d. N(0, 1/d) entries. In gaussian mode P is never
stored; row blocks are regenerated on demand from a counter-based Philox
stream keyed by (seed, block index), so projections are reproducible and
memory stays O(block_rows * d). Injected mode takes an explicit matrix and is
meant for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GENERATOR_VERSION = 1

_BLOCK_ROWS = 8192


@dataclass(frozen=True)
class Projector:
    p: int
    d: int
    seed: int = 0
    mode: str = "gaussian"
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.p < 1 or self.d < 1:
            raise ValueError("p and d must be positive")
        if self.mode not in ("gaussian", "injected"):
            raise ValueError("mode must be 'gaussian' or 'injected'")
        if self.mode == "injected":
            if self.matrix is None:
                raise ValueError("injected mode requires a matrix")
            m = np.ascontiguousarray(self.matrix, dtype=np.float64)
            if m.shape != (self.p, self.d):
                raise ValueError(f"injected matrix must be ({self.p}, {self.d})")
            object.__setattr__(self, "matrix", m)
        elif self.matrix is not None:
            raise ValueError("gaussian mode does not take a matrix")

    def _block(self, index: int) -> np.ndarray:
        """Rows [index*B, min((index+1)*B, p)) of P, regenerated from the seed."""
        lo = index * _BLOCK_ROWS
        rows = min(_BLOCK_ROWS, self.p - lo)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(GENERATOR_VERSION, index))
        gen = np.random.Generator(np.random.Philox(ss))
        return gen.standard_normal((rows, self.d)) / np.sqrt(self.d)

    def _n_blocks(self) -> int:
        return -(-self.p // _BLOCK_ROWS)

    def project(self, g: np.ndarray) -> np.ndarray:
        """P^T g: sketch a p-vector down to d dimensions."""
        return self.project_many(np.asarray(g, dtype=np.float64)[None, :])[0]

    def project_many(self, G: np.ndarray) -> np.ndarray:
        """P^T applied to the rows of G (m, p) -> (m, d), one pass over P."""
        G = np.asarray(G, dtype=np.float64)
        if G.ndim != 2 or G.shape[1] != self.p:
            raise ValueError(f"expected (m, {self.p}) gradients, got {G.shape}")
        if self.mode == "injected":
            return G @ self.matrix
        out = np.zeros((G.shape[0], self.d))
        for i in range(self._n_blocks()):
            lo = i * _BLOCK_ROWS
            block = self._block(i)
            out += G[:, lo : lo + block.shape[0]] @ block
        return out

    def lift(self, x_d: np.ndarray) -> np.ndarray:
        """P x_d: map a d-vector back to parameter space."""
        x_d = np.asarray(x_d, dtype=np.float64)
        if x_d.shape != (self.d,):
            raise ValueError(f"expected a length-{self.d} vector, got {x_d.shape}")
        if self.mode == "injected":
            return self.matrix @ x_d
        out = np.empty(self.p)
        for i in range(self._n_blocks()):
            lo = i * _BLOCK_ROWS
            block = self._block(i)
            out[lo : lo + block.shape[0]] = block @ x_d
        return out

    def materialize(self) -> np.ndarray:
        """Dense copy of P, for small-p oracle checks only; never cached."""
        if self.mode == "injected":
            return self.matrix.copy()
        return np.vstack([self._block(i) for i in range(self._n_blocks())])


def identity_projector(p: int) -> Projector:
    """Injected d = p identity projection, used by exactness tests."""
    return Projector(p=p, d=p, mode="injected", matrix=np.eye(p))
