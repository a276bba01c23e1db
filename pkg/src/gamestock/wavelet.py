"""Orthogonal Daubechies filter bank (analysis and synthesis).

Coefficients are computed along the last axis, so a ``(N, D, L)`` block of
indicator windows is decomposed in one call.  Two boundary modes exist:

* ``periodization``: circular filtering, coefficient count equals the input
  length and the transform is orthogonal.  When a sub-band has odd length the
  trailing sample is carried into the approximation band unchanged, which
  keeps the transform orthogonal for every length.
* ``symmetric``: half-sample symmetric extension (redundant, not energy
  preserving); inverted by least squares.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
from numpy.polynomial import polynomial as P

MODES = ("periodization", "symmetric")
MAX_ORDER = 8


class WaveletError(ValueError):
    pass


@lru_cache(maxsize=None)
def daubechies_filter(order: int) -> np.ndarray:
    """Scaling (low-pass) filter of the Daubechies wavelet with `order` vanishing moments.

    Derived by spectral factorization of the Daubechies polynomial, keeping the
    roots inside the unit circle (minimum phase).  ``order=1`` is Haar.
    """
    if not 1 <= order <= MAX_ORDER:
        raise WaveletError(f"Daubechies order must be in [1, {MAX_ORDER}], got {order}")
    # z^(N-1) * sum_k C(N-1+k, k) y^k  with  y = (2 - z - 1/z) / 4
    total = np.zeros(2 * order - 1)
    for k in range(order):
        term = np.array([1.0])
        for _ in range(k):
            term = P.polymul(term, np.array([-1.0, 2.0, -1.0]) / 4.0)
        term = np.concatenate([np.zeros(order - 1 - k), term])
        total[: len(term)] += comb(order - 1 + k, k) * term
    h = np.array([1.0])
    for _ in range(order):
        h = P.polymul(h, [0.5, 0.5])
    if order > 1:
        roots = P.polyroots(total)
        for root in roots[np.abs(roots) < 1.0]:
            h = P.polymul(h, [-root, 1.0])
    h = np.real(h)[::-1]
    h = h * np.sqrt(2.0) / h.sum()
    h.setflags(write=False)
    return h


def filter_pair(wavelet: str) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(lo, hi)`` analysis filters in correlation orientation.

    ``cA[k] = sum_n lo[n] x[2k+n]`` and ``cD[k] = sum_n hi[n] x[2k+n]``; for
    Haar this gives ``cA = (x0+x1)/sqrt2`` and ``cD = (x0-x1)/sqrt2``.
    """
    m = re.fullmatch(r"(?:db(\d+)|haar)", wavelet)
    if m is None:
        raise WaveletError(f"unknown wavelet {wavelet!r}; expected 'haar' or 'db<N>'")
    order = 1 if wavelet == "haar" else int(m.group(1))
    lo = daubechies_filter(order)
    n = np.arange(len(lo))
    hi = ((-1.0) ** n) * lo[::-1]
    return lo, hi


@dataclass(frozen=True)
class WaveletCoeffs:
    """Multilevel decomposition along the last axis.

    ``details[k-1]`` is the level-``k`` detail band (k = 1 is the finest);
    ``approx`` is the level-``level`` approximation band.  ``lengths[k]`` is
    the input length at level ``k+1``, needed to invert.
    """

    approx: np.ndarray
    details: tuple[np.ndarray, ...]
    wavelet: str
    level: int
    mode: str
    lengths: tuple[int, ...]

    def count(self) -> int:
        return self.approx.shape[-1] + sum(d.shape[-1] for d in self.details)

    def energy(self) -> np.ndarray:
        e = np.sum(self.approx**2, axis=-1)
        for d in self.details:
            e = e + np.sum(d**2, axis=-1)
        return e


def max_level(length: int, wavelet: str = "db1", mode: str = "periodization") -> int:
    """Deepest admissible decomposition level for a signal of `length` samples.

    Periodization splits any band of two or more samples.  Symmetric mode
    stops once a band would be shorter than the filter support.
    """
    lo, _ = filter_pair(wavelet)
    level = 0
    n = length
    if mode == "periodization":
        while n >= 2:
            n = (n + 1) // 2
            level += 1
        return level
    while n >= max(len(lo) - 1, 2):
        n //= 2
        level += 1
    return level


def _periodic_index(n: int, flen: int) -> np.ndarray:
    return (2 * np.arange(n // 2)[:, None] + np.arange(flen)[None, :]) % n


def _symmetric_index(n: int, flen: int) -> np.ndarray:
    # symmetric padding may need to bounce more than once for short inputs
    left = flen - 1
    idx = np.arange(-left, n + left)
    period = 2 * n
    idx = idx % period
    ext = np.where(idx < n, idx, period - 1 - idx)
    m = (n + flen - 1) // 2
    return ext[2 * np.arange(m)[:, None] + 1 + np.arange(flen)[None, :]]


def _analysis_step(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, mode: str):
    n = x.shape[-1]
    if mode == "periodization":
        even = n - (n % 2)
        seg = x[..., _periodic_index(even, len(lo))]
        cA = seg @ lo
        cD = seg @ hi
        if n % 2:
            cA = np.concatenate([cA, x[..., -1:]], axis=-1)
        return cA, cD
    seg = x[..., _symmetric_index(n, len(lo))]
    return seg @ lo, seg @ hi


def _synthesis_step(cA: np.ndarray, cD: np.ndarray, lo: np.ndarray, hi: np.ndarray, n: int, mode: str):
    if mode == "periodization":
        even = n - (n % 2)
        carry = None
        if n % 2:
            carry = cA[..., -1:]
            cA = cA[..., :-1]
        idx = _periodic_index(even, len(lo))
        contrib = cA[..., :, None] * lo + cD[..., :, None] * hi
        out = np.zeros(cA.shape[:-1] + (even,))
        lead = out.reshape(-1, even)
        np.add.at(lead, (slice(None), idx.ravel()), contrib.reshape(-1, idx.size))
        out = lead.reshape(out.shape)
        if carry is not None:
            out = np.concatenate([out, carry], axis=-1)
        return out
    # redundant frame: least-squares inverse of the analysis operator
    basis = np.eye(n)
    a_lo, a_hi = _analysis_step(basis, lo, hi, mode)
    op = np.concatenate([a_lo.T, a_hi.T], axis=0)
    rhs = np.concatenate([cA, cD], axis=-1)
    flat = rhs.reshape(-1, rhs.shape[-1]).T
    sol, *_ = np.linalg.lstsq(op, flat, rcond=None)
    return sol.T.reshape(cA.shape[:-1] + (n,))


def dwt_decompose(x, wavelet: str = "db4", level: int = 3, mode: str = "periodization") -> WaveletCoeffs:
    """Cascade analysis filter bank along the last axis of `x`.

    A ``(L, D)`` window must be transposed to ``(D, L)`` first (see
    :func:`decompose_window`).
    """
    if mode not in MODES:
        raise WaveletError(f"unknown boundary mode {mode!r}; expected one of {MODES}")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = filter_pair(wavelet)
    n = x.shape[-1]
    if level < 1:
        raise WaveletError(f"decomposition level must be >= 1, got {level}")
    if n < len(lo):
        raise WaveletError(f"input length {n} shorter than {wavelet} filter length {len(lo)}")
    deepest = max_level(n, wavelet, mode)
    if level > deepest:
        raise WaveletError(f"level {level} too deep for length {n}; max level is {deepest}")
    details = []
    lengths = []
    approx = x
    for _ in range(level):
        lengths.append(approx.shape[-1])
        approx, detail = _analysis_step(approx, lo, hi, mode)
        details.append(detail)
    return WaveletCoeffs(approx, tuple(details), wavelet, level, mode, tuple(lengths))


def dwt_reconstruct(coeffs: WaveletCoeffs) -> np.ndarray:
    lo, hi = filter_pair(coeffs.wavelet)
    approx = coeffs.approx
    for k in range(coeffs.level - 1, -1, -1):
        approx = _synthesis_step(approx, coeffs.details[k], lo, hi, coeffs.lengths[k], coeffs.mode)
    return approx


def decompose_window(window, wavelet: str = "db4", level: int = 3, mode: str = "periodization") -> WaveletCoeffs:
    """Decompose an ``(..., L, D)`` window channel by channel (time on axis -2)."""
    return dwt_decompose(np.swapaxes(np.asarray(window, dtype=np.float64), -1, -2), wavelet, level, mode)


def pooled_features(windows, wavelet: str = "db4", level: int = 3, mode: str = "periodization"):
    """Global pooling of each sub-band over time for ``(..., L, D)`` windows.

    Returns ``(detail_max, approx_mean)`` with shapes ``(..., level, D)`` and
    ``(..., D)``: the max-pooled detail band per level and channel, and the
    average-pooled final approximation band per channel.
    """
    coeffs = decompose_window(windows, wavelet, level, mode)
    detail_max = np.stack([d.max(axis=-1) for d in coeffs.details], axis=-2)
    return detail_max, coeffs.approx.mean(axis=-1)
