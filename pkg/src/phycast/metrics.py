"""Frame-level error metrics.

MSE and MAE are summed over the pixels of a frame; SSIM is the windowed
structural similarity with an 11x11 Gaussian window (sigma 1.5), constants
K1 = 0.01, K2 = 0.03 and dynamic range 1, averaged over valid window
positions. Sequence metrics are per forecast step, averaged over the batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass
class MetricReport:
    mse: float
    mae: float
    ssim: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _gaussian_taps(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable valid-mode weighted average over the last two axes."""
    n = len(taps)
    rows = sliding_window_view(img, n, axis=-1) @ taps
    return np.swapaxes(sliding_window_view(np.swapaxes(rows, -1, -2), n, axis=-1) @ taps, -1, -2)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM of two single-channel frames; global SSIM below the window size."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim expects two equal 2-D frames, got {a.shape} and {b.shape}")
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    if min(a.shape) < WINDOW:
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
    else:
        taps = _gaussian_taps()
        mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
        va = _filter_valid(a * a, taps) - mu_a**2
        vb = _filter_valid(b * b, taps) - mu_b**2
        cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def frame_mse(pred, target) -> np.ndarray:
    """Per-frame sum of squared errors over all trailing ``C, H, W`` axes."""
    d = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    return (d * d).sum(axis=(-3, -2, -1))


def frame_mae(pred, target) -> np.ndarray:
    d = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    return np.abs(d).sum(axis=(-3, -2, -1))


def frame_ssim(pred, target) -> np.ndarray:
    """SSIM per ``[..., C, H, W]`` frame, averaged over channels."""
    pred, target = np.asarray(pred), np.asarray(target)
    lead = pred.shape[:-3]
    out = np.empty(lead)
    for idx in np.ndindex(*lead):
        out[idx] = np.mean([ssim(p, t) for p, t in zip(pred[idx], target[idx])])
    return out


def sequence_metrics(pred, target) -> list[MetricReport]:
    """One report per step of ``[B, N, C, H, W]`` sequences, averaged over ``B``."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 5:
        raise ValueError(f"expected matching [B,N,C,H,W] arrays, got {pred.shape} and {target.shape}")
    mse = frame_mse(pred, target).mean(axis=0)
    mae = frame_mae(pred, target).mean(axis=0)
    ss = frame_ssim(pred, target).mean(axis=0)
    return [MetricReport(float(m), float(a), float(s)) for m, a, s in zip(mse, mae, ss)]


def mean_report(reports: list[MetricReport]) -> MetricReport:
    return MetricReport(
        float(np.mean([r.mse for r in reports])),
        float(np.mean([r.mae for r in reports])),
        float(np.mean([r.ssim for r in reports])),
    )
