"""Multi-level 2D wavelet analysis/synthesis.

Two bases are provided:

* ``haar_orthonormal`` -- the orthonormal Haar transform. Odd-length rows or
  columns keep their last sample in the low band unchanged, which preserves
  orthonormality at every level.
* ``cdf97_biorthogonal`` -- the Cohen-Daubechies-Feauveau 9/7 biorthogonal
  transform, computed with the standard four-step lifting factorization plus
  a final scaling. Boundaries use whole-sample symmetric extension (the
  JPEG2000 convention), so odd lengths are handled exactly and the output
  agrees with direct FIR filtering of the symmetrically extended signal.

Normalization: the analysis lowpass has DC gain sqrt(2) for both bases, so a
constant image gains a factor of 2 per 2D level.

Coefficient vectors are flat, length N = height*width, in subband-major
order: the coarsest LL block first, then per level from coarsest to finest
the LH, HL, HH blocks, each flattened row-major. ``SubbandLayout`` describes
the extents.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Basis",
    "CoeffVector",
    "SubbandLayout",
    "forward",
    "inverse",
    "forward_batch",
    "inverse_batch",
    "basis_vector",
    "max_l1_norm",
    "analysis_matrix",
    "synthesis_matrix",
    "subband_layout",
]

# Lifting constants for the CDF 9/7 factorization (two predicts, two updates,
# one scaling). With these values the analysis filters equal the published
# 9/7 taps scaled to DC gain sqrt(2) on the lowpass side.
CDF97_ALPHA = -1.586134342059924
CDF97_BETA = -0.052980118572961
CDF97_GAMMA = 0.882911075530934
CDF97_DELTA = 0.443506852043971
CDF97_ZETA = 1.149604398860241

_SQRT2 = math.sqrt(2.0)

# Padding widths (in samples) for the boundary extension. Each of the four
# lifting steps widens the influence of a boundary by one subband sample, so
# half of _FWD_PAD must exceed 4; both values carry slack.
_FWD_PAD = 12
_INV_PAD = 6


@dataclass(frozen=True)
class Basis:
    """An invertible analysis/synthesis transform pair over height*width images."""

    kind: str  # "haar_orthonormal" | "cdf97_biorthogonal"
    height: int
    width: int
    levels: int = 1
    boundary: str = "symmetric"

    def __post_init__(self):
        if self.kind not in ("haar_orthonormal", "cdf97_biorthogonal"):
            raise ValueError(f"unknown basis kind: {self.kind!r}")
        if self.boundary != "symmetric":
            raise ValueError(f"unsupported boundary mode: {self.boundary!r}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be positive")
        max_levels = int(math.floor(math.log2(min(self.height, self.width))))
        if not 1 <= self.levels <= max_levels:
            raise ValueError(
                f"levels must be in [1, {max_levels}] for a "
                f"{self.height}x{self.width} image, got {self.levels}"
            )

    @property
    def size(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class SubbandLayout:
    """Extents of each subband in the flat coefficient vector.

    ``bands`` is a tuple of (name, level, rows, cols, offset) entries where
    name is "ll", "lh", "hl" or "hh" (first letter = vertical band, second =
    horizontal band), rows/cols are (start, stop) slices into the 2D pyramid
    arrangement and offset is the subband's start in the flat vector. The
    order is LL at the deepest level, then (lh, hl, hh) per level from
    deepest to level 1.
    """

    height: int
    width: int
    levels: int
    bands: tuple = field(default=())

    @staticmethod
    def build(height, width, levels) -> "SubbandLayout":
        dims = [(height, width)]
        for _ in range(levels):
            h, w = dims[-1]
            dims.append(((h + 1) // 2, (w + 1) // 2))
        bands = []
        offset = 0
        hL, wL = dims[levels]
        bands.append(("ll", levels, (0, hL), (0, wL), offset))
        offset += hL * wL
        for lev in range(levels, 0, -1):
            hp, wp = dims[lev - 1]  # parent extents
            hc, wc = dims[lev]
            for name, rows, cols in (
                ("lh", (0, hc), (wc, wp)),
                ("hl", (hc, hp), (0, wc)),
                ("hh", (hc, hp), (wc, wp)),
            ):
                bands.append((name, lev, rows, cols, offset))
                offset += (rows[1] - rows[0]) * (cols[1] - cols[0])
        assert offset == height * width
        return SubbandLayout(height, width, levels, tuple(bands))

    @property
    def size(self) -> int:
        return self.height * self.width


@dataclass
class CoeffVector:
    """Flat analysis coefficients plus the layout describing the subbands."""

    values: np.ndarray
    layout: SubbandLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError(
                f"coefficient vector has {self.values.shape}, expected ({self.layout.size},)"
            )


# ---------------------------------------------------------------------------
# 1D lifting kernels. All kernels act on the last axis of a 2D (batch, n)
# array; s is the even-indexed (low) phase, d the odd-indexed (high) phase.
# ---------------------------------------------------------------------------


def _lift_predict(d, s, c):
    # d[i] += c*(s[i] + s[i+1]); the clamped tail only touches pad samples
    nd = d.shape[-1]
    if s.shape[-1] > nd:
        s_next = s[:, 1 : nd + 1]
    else:
        s_next = np.concatenate([s[:, 1:], s[:, -1:]], axis=-1)
    d += c * (s[:, :nd] + s_next)


def _lift_update(s, d, c):
    # s[i] += c*(d[i-1] + d[i]); clamped ends only touch pad samples
    ns = s.shape[-1]
    d_prev = np.concatenate([d[:, :1], d[:, :-1]], axis=-1)
    if d.shape[-1] < ns:
        d_cur = np.concatenate([d, d[:, -1:]], axis=-1)
        d_prev = np.concatenate([d_prev, d[:, -1:]], axis=-1)
    else:
        d_cur = d
    s += c * (d_prev[:, :ns] + d_cur[:, :ns])


def _cdf97_analyze(x):
    """(batch, n) -> (low (batch, ceil(n/2)), high (batch, floor(n/2)))."""
    n = x.shape[-1]
    ext = np.pad(x, [(0, 0), (_FWD_PAD, _FWD_PAD)], mode="reflect")
    s = ext[:, 0::2].copy()
    d = ext[:, 1::2].copy()
    _lift_predict(d, s, CDF97_ALPHA)
    _lift_update(s, d, CDF97_BETA)
    _lift_predict(d, s, CDF97_GAMMA)
    _lift_update(s, d, CDF97_DELTA)
    p = _FWD_PAD // 2
    return (
        CDF97_ZETA * s[:, p : p + (n + 1) // 2],
        (1.0 / CDF97_ZETA) * d[:, p : p + n // 2],
    )


def _reflect_index(p, length, dup_left, dup_right):
    if length == 1:
        return 0
    while p < 0 or p >= length:
        if p < 0:
            p = -p - 1 if dup_left else -p
        else:
            p = 2 * length - 1 - p if dup_right else 2 * length - 2 - p
    return p


def _cdf97_synthesize(s, d, n):
    """Inverse of :func:`_cdf97_analyze` for an original length n."""
    s = s / CDF97_ZETA
    d = d * CDF97_ZETA
    ns, nd = s.shape[-1], d.shape[-1]
    odd = n % 2 == 1
    # Symmetric extension of the deinterleaved subbands. Whole-sample (ws)
    # reflection omits the edge sample, half-sample (dup) repeats it; the
    # rules below are exactly those induced on the even/odd phases by
    # whole-sample extension of the original signal.
    sidx = [_reflect_index(i - _INV_PAD, ns, False, not odd) for i in range(ns + 2 * _INV_PAD)]
    didx = [_reflect_index(i - _INV_PAD, nd, True, odd) for i in range(nd + 2 * _INV_PAD)]
    sP = s[:, sidx]
    dP = d[:, didx]
    _lift_update(sP, dP, -CDF97_DELTA)
    _lift_predict(dP, sP, -CDF97_GAMMA)
    _lift_update(sP, dP, -CDF97_BETA)
    _lift_predict(dP, sP, -CDF97_ALPHA)
    x = np.empty(s.shape[:-1] + (n,))
    x[:, 0::2] = sP[:, _INV_PAD : _INV_PAD + (n + 1) // 2]
    x[:, 1::2] = dP[:, _INV_PAD : _INV_PAD + n // 2]
    return x


def _haar_analyze(x):
    n = x.shape[-1]
    m = n // 2
    a = x[:, 0 : 2 * m : 2]
    b = x[:, 1 : 2 * m : 2]
    s = (a + b) / _SQRT2
    d = (a - b) / _SQRT2
    if n % 2 == 1:
        s = np.concatenate([s, x[:, -1:]], axis=-1)  # unpaired sample passes through
    return s, d


def _haar_synthesize(s, d, n):
    m = n // 2
    x = np.empty(s.shape[:-1] + (n,))
    x[:, 0 : 2 * m : 2] = (s[:, :m] + d[:, :m]) / _SQRT2
    x[:, 1 : 2 * m : 2] = (s[:, :m] - d[:, :m]) / _SQRT2
    if n % 2 == 1:
        x[:, -1] = s[:, -1]
    return x


_ANALYZE = {"haar_orthonormal": _haar_analyze, "cdf97_biorthogonal": _cdf97_analyze}
_SYNTHESIZE = {"haar_orthonormal": _haar_synthesize, "cdf97_biorthogonal": _cdf97_synthesize}


def _analyze_axis(block, axis, kind):
    """Apply the 1D analysis along ``axis`` of a (batch, h, w) stack, in place layout [s|d]."""
    moved = np.moveaxis(block, axis, -1)
    shape = moved.shape
    flat = moved.reshape(-1, shape[-1])
    s, d = _ANALYZE[kind](flat)
    out = np.concatenate([s, d], axis=-1).reshape(shape)
    return np.moveaxis(out, -1, axis)


def _synthesize_axis(block, axis, kind):
    moved = np.moveaxis(block, axis, -1)
    shape = moved.shape
    flat = moved.reshape(-1, shape[-1])
    n = shape[-1]
    ns = (n + 1) // 2
    x = _SYNTHESIZE[kind](flat[:, :ns], flat[:, ns:], n)
    return np.moveaxis(x.reshape(shape), -1, axis)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

# RLock: the matrix builders call back into subband_layout under the lock
_layout_cache: dict = {}
_matrix_cache: dict = {}
_m_cache: dict = {}
_cache_lock = threading.RLock()


def subband_layout(basis: Basis) -> SubbandLayout:
    key = (basis.height, basis.width, basis.levels)
    with _cache_lock:
        if key not in _layout_cache:
            _layout_cache[key] = SubbandLayout.build(*key)
        return _layout_cache[key]


def _pyramid_to_flat(pyr, layout):
    """(batch, h, w) pyramid -> (batch, N) subband-major flat vectors."""
    parts = []
    for _, _, rows, cols, _ in layout.bands:
        parts.append(pyr[:, rows[0] : rows[1], cols[0] : cols[1]].reshape(pyr.shape[0], -1))
    return np.concatenate(parts, axis=-1)


def _flat_to_pyramid(flat, layout):
    pyr = np.empty((flat.shape[0], layout.height, layout.width))
    for _, _, rows, cols, offset in layout.bands:
        h = rows[1] - rows[0]
        w = cols[1] - cols[0]
        pyr[:, rows[0] : rows[1], cols[0] : cols[1]] = flat[
            :, offset : offset + h * w
        ].reshape(flat.shape[0], h, w)
    return pyr


def forward_batch(basis: Basis, images) -> np.ndarray:
    """Analysis of a (batch, N) stack of flat images; returns (batch, N) coefficients."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != basis.size:
        raise ValueError(
            f"expected (batch, {basis.size}) images for a "
            f"{basis.height}x{basis.width} basis, got {images.shape}"
        )
    block = images.reshape(-1, basis.height, basis.width).copy()
    h, w = basis.height, basis.width
    for _ in range(basis.levels):
        sub = block[:, :h, :w]
        sub = _analyze_axis(sub, 2, basis.kind)
        sub = _analyze_axis(sub, 1, basis.kind)
        block[:, :h, :w] = sub
        h, w = (h + 1) // 2, (w + 1) // 2
    return _pyramid_to_flat(block, subband_layout(basis))


def inverse_batch(basis: Basis, coeffs) -> np.ndarray:
    """Synthesis of a (batch, N) stack of flat coefficient vectors."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != basis.size:
        raise ValueError(
            f"expected (batch, {basis.size}) coefficient vectors, got {coeffs.shape}"
        )
    block = _flat_to_pyramid(coeffs, subband_layout(basis))
    dims = [(basis.height, basis.width)]
    for _ in range(basis.levels):
        h, w = dims[-1]
        dims.append(((h + 1) // 2, (w + 1) // 2))
    for lev in range(basis.levels, 0, -1):
        h, w = dims[lev - 1]
        sub = block[:, :h, :w]
        sub = _synthesize_axis(sub, 1, basis.kind)
        sub = _synthesize_axis(sub, 2, basis.kind)
        block[:, :h, :w] = sub
    return block.reshape(-1, basis.size)


def forward(basis: Basis, x) -> CoeffVector:
    """Analysis coefficients of one flat image vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (basis.size,):
        raise ValueError(f"expected image of length {basis.size}, got shape {x.shape}")
    values = forward_batch(basis, x[None, :])[0]
    return CoeffVector(values, subband_layout(basis))


def inverse(basis: Basis, c: CoeffVector) -> np.ndarray:
    """Synthesis of a coefficient vector back to a flat image."""
    layout = subband_layout(basis)
    if c.layout != layout:
        raise ValueError("coefficient layout does not match basis")
    return inverse_batch(basis, c.values[None, :])[0]


def basis_vector(basis: Basis, j: int) -> np.ndarray:
    """Column j of the synthesis operator: the image of the j-th unit coefficient."""
    if not 0 <= j < basis.size:
        raise IndexError(f"coefficient index {j} out of range [0, {basis.size})")
    e = np.zeros((1, basis.size))
    e[0, j] = 1.0
    return inverse_batch(basis, e)[0]


def synthesis_matrix(basis: Basis) -> np.ndarray:
    """Dense N x N synthesis operator; column j is ``basis_vector(basis, j)``. Cached."""
    key = (basis, "synthesis")
    with _cache_lock:
        if key not in _matrix_cache:
            _matrix_cache[key] = inverse_batch(basis, np.eye(basis.size)).T.copy()
        return _matrix_cache[key]


def analysis_matrix(basis: Basis) -> np.ndarray:
    """Dense N x N analysis operator; row k maps an image to coefficient k. Cached."""
    key = (basis, "analysis")
    with _cache_lock:
        if key not in _matrix_cache:
            _matrix_cache[key] = forward_batch(basis, np.eye(basis.size)).T.copy()
        return _matrix_cache[key]


def max_l1_norm(basis: Basis, side: str = "synthesis") -> float:
    """max_j of the l1 norm over basis columns.

    ``side`` selects synthesis columns (default; what the front end multiplies
    by) or analysis rows. The two coincide for the orthonormal Haar basis.
    """
    if side not in ("synthesis", "analysis"):
        raise ValueError(f"side must be 'synthesis' or 'analysis', got {side!r}")
    key = (basis, side)
    with _cache_lock:
        cached = _m_cache.get(key)
    if cached is not None:
        return cached
    mat = synthesis_matrix(basis) if side == "synthesis" else analysis_matrix(basis).T
    value = float(np.abs(mat).sum(axis=0).max())
    with _cache_lock:
        _m_cache[key] = value
    return value
