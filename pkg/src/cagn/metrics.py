"""Evaluation: proxy-FID with a fixed random feature extractor, PSD matrix
square root, and loss-stability statistics.

The extractor is a frozen random-weight conv net, so absolute scores are
not comparable to Inception-based FID; everything downstream labels them
"proxy-FID".  Covariance math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError

FEATURE_DIM = 64


def _extractor_weights(extractor_seed: int, d: int):
    rng = np.random.default_rng([extractor_seed, 0xFEA7])
    chans = [3, 16, 32, d]
    ws = []
    for cin, cout in zip(chans[:-1], chans[1:]):
        std = np.sqrt(2.0 / (cin * 9))
        ws.append(rng.normal(0, std, size=(cout, cin, 3, 3)))
    return ws


def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    b, c, h, wd = x.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(b, h, wd, w.shape[0]).transpose(0, 3, 1, 2)


def feature_embed(images: np.ndarray, extractor_seed: int, d: int = FEATURE_DIM) -> np.ndarray:
    """[N,3,H,W] in [-1,1] -> [N,d] float64 features, frozen forever."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ContractViolationError("feature_embed: non-empty [N,3,H,W] batch required")
    x = images.astype(np.float64)
    for i, w in enumerate(_extractor_weights(extractor_seed, d)):
        x = _conv3x3(x, w)
        x = np.where(x >= 0, x, 0.2 * x)
        if i < 2 and x.shape[2] % 2 == 0 and x.shape[2] > 2:
            b, c, h, wd = x.shape
            x = x.reshape(b, c, h // 2, 2, wd // 2, 2).mean(axis=(3, 5))
    return x.mean(axis=(2, 3))


@dataclass
class FidStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FidStats":
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        if n < d + 1:
            raise ContractViolationError(
                f"FidStats: need at least d+1={d + 1} samples for a well-conditioned "
                f"covariance, got {n}"
            )
        mu = feats.mean(axis=0)
        sigma = np.cov(feats, rowvar=False)
        return cls(mu=mu, sigma=sigma, count=n)


def matrix_sqrt_psd(s: np.ndarray, sym_tol: float = 1e-6) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; negative
    eigenvalues (numerical noise) are clamped at zero."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractViolationError("matrix_sqrt_psd: expects a square matrix")
    asym = np.abs(s - s.T).max() if s.size else 0.0
    if asym > sym_tol * max(1.0, np.abs(s).max()):
        raise ContractViolationError(f"matrix_sqrt_psd: asymmetry {asym:.3e} beyond tolerance")
    s = 0.5 * (s + s.T)
    vals, vecs = np.linalg.eigh(s)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return 0.5 * (root + root.T)


RIDGE = 1e-6


def fid(a: FidStats, b: FidStats) -> float:
    """||mu1-mu2||^2 + Tr(S1+S2-2(S1 S2)^(1/2)), via the symmetrized form
    sqrt(S1^(1/2) S2 S1^(1/2)); clamped at zero."""
    if a.mu.shape != b.mu.shape:
        raise ContractViolationError("fid: feature dimension mismatch")
    d = a.mu.shape[0]
    s1 = a.sigma + RIDGE * np.eye(d)
    s2 = b.sigma + RIDGE * np.eye(d)
    r1 = matrix_sqrt_psd(s1)
    inner = r1 @ s2 @ r1
    tr_cross = np.trace(matrix_sqrt_psd(0.5 * (inner + inner.T)))
    diff = a.mu - b.mu
    val = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_cross)
    return max(val, 0.0)


def proxy_fid(
    real_images: np.ndarray,
    fake_images: np.ndarray,
    extractor_seed: int,
    d: int = FEATURE_DIM,
) -> float:
    fa = FidStats.from_features(feature_embed(real_images, extractor_seed, d))
    fb = FidStats.from_features(feature_embed(fake_images, extractor_seed, d))
    return fid(fa, fb)


@dataclass
class StabilityReport:
    window_means: np.ndarray
    window_vars: np.ndarray
    diverged: bool
    iterations: int

    @property
    def post_warmup_variance(self) -> float:
        """Variance pooled over every window after the first."""
        if len(self.window_vars) <= 1:
            return float(self.window_vars[-1]) if len(self.window_vars) else 0.0
        return float(np.mean(self.window_vars[1:]))


def stability_scan(loss_log, window: int, threshold: float) -> StabilityReport:
    """Windowed mean/variance of a loss series; divergence means any
    NaN/Inf or |loss| above the threshold."""
    log = np.asarray(loss_log, dtype=np.float64)
    if log.size == 0:
        raise ContractViolationError("stability_scan: empty loss log")
    if window > log.size or window < 1:
        raise ContractViolationError("stability_scan: window must be in [1, len(log)]")
    bad = ~np.isfinite(log)
    diverged = bool(bad.any() or np.abs(log[~bad]).max(initial=0.0) > threshold)
    nwin = log.size // window
    chunks = log[: nwin * window].reshape(nwin, window)
    with np.errstate(invalid="ignore"):
        means = chunks.mean(axis=1)
        varis = chunks.var(axis=1)
    return StabilityReport(means, varis, diverged, int(log.size))
