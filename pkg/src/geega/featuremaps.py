"""Topography maps and spectrograms: the two domain inputs of the model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .container import Container
from .signal_io import EegRecording, Montage, Segment, montage_for_channels, segment

logger = logging.getLogger(__name__)

GRID = 32


class InterpolationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RbfInterpolant:
    """Gaussian RBF interpolant with an affine tail ``a0 + a1 x + a2 y``."""

    nodes: np.ndarray  # [n, 2]
    weights: np.ndarray  # [n]
    affine: np.ndarray  # [3]
    epsilon: float

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        d2 = (x[..., None] - self.nodes[:, 0]) ** 2 + (y[..., None] - self.nodes[:, 1]) ** 2
        return np.exp(-d2 / self.epsilon ** 2) @ self.weights + self.affine[0] + self.affine[1] * x + self.affine[2] * y


def mean_nearest_neighbour(xy: np.ndarray) -> float:
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())


def rbf_fit(points, epsilon: float | None = None) -> RbfInterpolant:
    """Fit through ``points`` given as rows ``(x, y, value)``.

    Solves the saddle-point system ``[[K, P], [P^T, 0]] [w; a] = [v; 0]`` so
    that the interpolant reproduces affine fields exactly.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be rows of (x, y, value)")
    n = pts.shape[0]
    if n < 3:
        raise InterpolationError("RBF with affine tail needs at least 3 points")
    xy, v = pts[:, :2], pts[:, 2]
    if len(np.unique(xy, axis=0)) < n:
        raise InterpolationError("duplicate interpolation nodes")
    P = np.column_stack([np.ones(n), xy])
    if np.linalg.matrix_rank(P) < 3:
        raise InterpolationError("interpolation nodes are collinear")
    eps = mean_nearest_neighbour(xy) if epsilon is None else float(epsilon)
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    K = np.exp(-d2 / eps ** 2)
    A = np.zeros((n + 3, n + 3))
    A[:n, :n] = K
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.concatenate([v, np.zeros(3)])
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise InterpolationError(f"singular RBF system: {exc}") from None
    return RbfInterpolant(xy.copy(), sol[:n], sol[n:], eps)


def grid_coords(size: int = GRID):
    """Pixel centres covering [-1, 1]^2; row 0 is the front of the head."""
    ax = np.linspace(-1.0, 1.0, size)
    gx, gy = np.meshgrid(ax, ax[::-1])
    return gx, gy


def band_powers(data: np.ndarray, sample_rate_hz: float, bands, window_seconds=1.0, overlap=0.5) -> np.ndarray:
    """[channels x bands] band power from a Welch PSD per channel."""
    est = dsp.psd(data, sample_rate_hz, window_seconds, overlap)
    out = np.empty((data.shape[0], len(bands)))
    for ch in range(data.shape[0]):
        one = dsp.PsdEstimate(est.freqs_hz, est.power[ch])
        for b, band in enumerate(bands):
            out[ch, b] = dsp.band_power(one, band)
    return out


def interpolate_map(montage: Montage, values: np.ndarray, size: int = GRID, epsilon=None) -> np.ndarray:
    gx, gy = grid_coords(size)
    xy = montage.xy
    f = rbf_fit(np.column_stack([xy, values]), epsilon)
    img = f(gx, gy)
    img[gx ** 2 + gy ** 2 > 1.0] = 0.0
    return img


def topomap(seg: Segment, montage: Montage, bands=dsp.DEFAULT_BANDS, *, size: int = GRID,
            psd_window_seconds=1.0, psd_overlap=0.5, log_power=False) -> np.ndarray:
    """[bands x size x size] band-power maps, zero outside the head disc."""
    if len(montage) != seg.data.shape[0]:
        raise ValueError(f"montage has {len(montage)} electrodes, segment has {seg.data.shape[0]} channels")
    if len(montage) < 3:
        raise ValueError("topomap needs at least 3 electrodes")
    powers = band_powers(seg.data, seg.sample_rate_hz, bands, psd_window_seconds, psd_overlap)
    if log_power:
        powers = np.log1p(powers)
    out = np.empty((len(bands), size, size))
    for b, band in enumerate(bands):
        try:
            out[b] = interpolate_map(montage, powers[:, b], size)
        except InterpolationError as exc:
            raise InterpolationError(f"band {band.name}: {exc}") from None
    return out


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    """[n_out x n_in] triangle-filter weights, widened when shrinking (antialiased)."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    w = np.maximum(0.0, 1.0 - np.abs(np.arange(n_in)[None, :] - centers[:, None]) / support)
    return w / w.sum(axis=1, keepdims=True)


def resize_bilinear(img: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Separable bilinear resize on pixel centres; antialiased along shrinking axes.

    Plain point-sampled interpolation would skip most of the 129 frequency
    bins when shrinking to 32 columns, dropping narrow-band peaks entirely.
    """
    img = np.asarray(img, dtype=np.float64)
    return _linear_weights(img.shape[0], rows) @ img @ _linear_weights(img.shape[1], cols).T


def spectrogram(seg: Segment, size: int = GRID) -> np.ndarray:
    """[channels x size x size] log(1 + |FFT|) images; rows are time, columns frequency."""
    if seg.data.shape[1] < dsp.STFT_WINDOW:
        raise ValueError(f"segment of {seg.data.shape[1]} samples shorter than one STFT frame")
    out = np.empty((seg.data.shape[0], size, size))
    for ch, x in enumerate(seg.data):
        out[ch] = resize_bilinear(np.log1p(dsp.stft_frames(x)), size, size)
    return out


# --------------------------------------------------------------------------
# dataset assembly

@dataclass
class FeatureConfig:
    window_seconds: float = 10.0
    bandpass_lo_hz: float = 1.0
    bandpass_hi_hz: float = 75.0
    filter_order: int = 4
    use_notch: bool = True
    notch_hz: float = 60.0
    notch_q: float = 30.0
    psd_window_seconds: float = 1.0
    psd_overlap: float = 0.5
    log_topo: bool = False
    bands: tuple = field(default_factory=lambda: dsp.DEFAULT_BANDS)


@dataclass
class FeatureSet:
    topo: np.ndarray  # [n, k, 32, 32]
    spectro: np.ndarray  # [n, c, 32, 32]
    labels: np.ndarray  # [n]
    subjects: list[str]  # per sample

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.topo[idx], self.spectro[idx], self.labels[idx], [self.subjects[i] for i in idx])

    @property
    def subject_ids(self) -> list[str]:
        return sorted(set(self.subjects))

    def save(self, path, meta=None):
        names = self.subject_ids
        box = Container(meta=dict(meta or {}, subjects=names))
        box.add("topo", self.topo, "TopoMapBatch")
        box.add("spectro", self.spectro, "SpectrogramBatch")
        box.add("labels", self.labels)
        box.add("subject_index", np.array([names.index(s) for s in self.subjects], dtype=np.int64))
        box.save(path)

    @classmethod
    def load(cls, path) -> "FeatureSet":
        box = Container.load(path)
        names = box.meta["subjects"]
        return cls(box["topo"], box["spectro"], box["labels"], [names[i] for i in box["subject_index"]])

    @classmethod
    def concat(cls, parts) -> "FeatureSet":
        parts = list(parts)
        return cls(
            np.concatenate([p.topo for p in parts]),
            np.concatenate([p.spectro for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [s for p in parts for s in p.subjects],
        )


def preprocess(rec: EegRecording, cfg: FeatureConfig) -> EegRecording:
    hi = min(cfg.bandpass_hi_hz, 0.45 * rec.sample_rate_hz)
    x = dsp.bandpass(rec.data, rec.sample_rate_hz, cfg.bandpass_lo_hz, hi, cfg.filter_order)
    if cfg.use_notch and cfg.notch_hz < rec.sample_rate_hz / 2:
        x = dsp.notch(x, rec.sample_rate_hz, cfg.notch_hz, cfg.notch_q)
    return EegRecording(rec.subject_id, rec.channels, rec.sample_rate_hz, x.astype(np.float32),
                        rec.label_track, rec.label_scheme)


def featurize(rec: EegRecording, cfg: FeatureConfig, montage: Montage | None = None) -> FeatureSet:
    montage = montage or montage_for_channels(rec.channels)
    if montage.channel_names != rec.channels:
        montage = montage.subset(rec.channels)
    segs = segment(preprocess(rec, cfg), cfg.window_seconds)
    c = len(rec.channels)
    if not segs:
        return FeatureSet(np.zeros((0, len(cfg.bands), GRID, GRID), np.float32),
                          np.zeros((0, c, GRID, GRID), np.float32), np.zeros(0, np.int64), [])
    topo = np.stack([topomap(s, montage, cfg.bands, psd_window_seconds=cfg.psd_window_seconds,
                             psd_overlap=cfg.psd_overlap, log_power=cfg.log_topo) for s in segs])
    spec = np.stack([spectrogram(s) for s in segs])
    labels = np.array([s.label for s in segs], dtype=np.int64)
    return FeatureSet(topo.astype(np.float32), spec.astype(np.float32), labels, [rec.subject_id] * len(segs))


@dataclass
class Standardizer:
    """Per-channel zero-mean / unit-variance scaling fitted on a training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        std = x.std(axis=(0, 2, 3), dtype=np.float64)
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean[None, :, None, None]) / self.std[None, :, None, None]).astype(np.float32)
