"""Sparsifying front end: keep the K largest-magnitude wavelet coefficients.

The defended input is ``x_hat = synthesize(top_k(analyze(x)))``, a projection
of the input onto the K-dimensional subspace spanned by the retained basis
vectors. ``check_high_snr`` evaluates the sufficient condition under which an
l-infinity perturbation of size epsilon cannot change the retained support:
lambda / epsilon > 2 M, with lambda the smallest retained nonzero magnitude
and M the largest l1 norm over basis columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import transform
from .transform import Basis, CoeffVector

__all__ = [
    "FrontEndConfig",
    "SparseCode",
    "CertificateReport",
    "top_k",
    "top_k_batch",
    "apply",
    "apply_batch",
    "support_of",
    "support_batch",
    "check_high_snr",
]


@dataclass(frozen=True)
class FrontEndConfig:
    """Front-end parameters: basis plus sparsity fraction rho = K/N.

    K is derived as round(rho * N), clamped to at least 1. Ties at the K-th
    magnitude break toward the lowest coefficient index.
    """

    basis: Basis
    rho: float
    tie_rule: str = "lowest_index"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.tie_rule != "lowest_index":
            raise ValueError(f"unsupported tie rule: {self.tie_rule!r}")

    @property
    def n(self) -> int:
        return self.basis.size

    @property
    def k(self) -> int:
        return max(1, int(round(self.rho * self.basis.size)))


@dataclass
class SparseCode:
    """Top-K coefficients: zeroed vector, retained support, and lambda.

    support is sorted ascending and omits exact zeros, so it can be shorter
    than K. lam is the smallest retained nonzero magnitude (0 for an empty
    support).
    """

    coeffs: CoeffVector
    support: np.ndarray
    lam: float


@dataclass(frozen=True)
class CertificateReport:
    certified: bool
    lam: float
    m: float
    threshold: float  # 2*M, the bound lambda/epsilon must strictly exceed
    epsilon: float


def _top_k_indices(values, k):
    # stable sort on -|c| puts the lowest index first among tied magnitudes
    order = np.argsort(-np.abs(values), axis=-1, kind="stable")
    return order[..., :k]


def top_k(c: CoeffVector, k: int) -> SparseCode:
    """Retain the k largest-magnitude coefficients of c, zeroing the rest."""
    n = c.values.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"K must be in [1, {n}], got {k}")
    picked = _top_k_indices(c.values, k)
    kept = np.zeros(n)
    kept[picked] = c.values[picked]
    support = np.sort(picked[c.values[picked] != 0.0])
    lam = float(np.min(np.abs(c.values[support]))) if support.size else 0.0
    return SparseCode(CoeffVector(kept, c.layout), support, lam)


def top_k_batch(values, k):
    """Vectorized top-K over rows of a (batch, N) coefficient array."""
    values = np.asarray(values, dtype=np.float64)
    picked = _top_k_indices(values, k)
    kept = np.zeros_like(values)
    rows = np.arange(values.shape[0])[:, None]
    kept[rows, picked] = values[rows, picked]
    return kept


def apply(config: FrontEndConfig, x) -> np.ndarray:
    """Sparsify one flat image: analyze, keep top K, synthesize."""
    code = top_k(transform.forward(config.basis, x), config.k)
    return transform.inverse(config.basis, code.coeffs)


def apply_batch(config: FrontEndConfig, images, chunk: int = 4096) -> np.ndarray:
    """Sparsify a (batch, N) stack of flat images."""
    images = np.asarray(images, dtype=np.float64)
    out = np.empty_like(images)
    for start in range(0, images.shape[0], chunk):
        sl = slice(start, start + chunk)
        coeffs = transform.forward_batch(config.basis, images[sl])
        out[sl] = transform.inverse_batch(config.basis, top_k_batch(coeffs, config.k))
    return out


def support_of(config: FrontEndConfig, x) -> np.ndarray:
    """Indices of the coefficients the front end retains for x (sorted)."""
    return top_k(transform.forward(config.basis, x), config.k).support


def support_batch(config: FrontEndConfig, images) -> list:
    """Per-row retained supports for a (batch, N) stack (each sorted)."""
    coeffs = transform.forward_batch(config.basis, images)
    picked = _top_k_indices(coeffs, config.k)
    rows = np.arange(coeffs.shape[0])[:, None]
    nonzero = coeffs[rows, picked] != 0.0
    return [np.sort(picked[s][nonzero[s]]) for s in range(coeffs.shape[0])]


def check_high_snr(config: FrontEndConfig, x, epsilon: float) -> CertificateReport:
    """Sufficient-condition certificate that the support survives any ||e||_inf <= epsilon.

    Certified iff lambda/epsilon > 2M (strict). epsilon = 0 is always
    certified; an all-zero input with epsilon > 0 is never certified (the
    empty support carries no margin).
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    code = top_k(transform.forward(config.basis, x), config.k)
    m = transform.max_l1_norm(config.basis)
    threshold = 2.0 * m
    if epsilon == 0.0:
        certified = True
    elif code.support.size == 0:
        certified = False
    else:
        certified = code.lam / epsilon > threshold
    return CertificateReport(certified, code.lam, m, threshold, epsilon)
