"""EEG recordings: montages, on-disk formats, synthetic generation and windowing."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"GEEG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQd")


class IngestionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Montage:
    name: str
    electrodes: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        names = [e[0] for e in self.electrodes]
        if len(set(names)) != len(names):
            raise ValueError(f"montage {self.name!r}: duplicate electrode names")
        for name, x, y in self.electrodes:
            if x * x + y * y > 1.0 + 1e-12:
                raise ValueError(f"montage {self.name!r}: electrode {name} outside unit disc")

    @property
    def channel_names(self) -> list[str]:
        return [e[0] for e in self.electrodes]

    @property
    def xy(self) -> np.ndarray:
        return np.array([(x, y) for _, x, y in self.electrodes], dtype=np.float64)

    def __len__(self):
        return len(self.electrodes)

    def subset(self, channels: list[str]) -> "Montage":
        lookup = {e[0].lower(): e for e in self.electrodes}
        try:
            picked = tuple(lookup[ch.lower()] for ch in channels)
        except KeyError as exc:
            raise ValueError(f"channel {exc.args[0]} not in montage {self.name!r}") from None
        return Montage(self.name, picked)


@dataclass
class EegRecording:
    subject_id: str
    channels: list[str]
    sample_rate_hz: float
    data: np.ndarray  # [c, T] float32, microvolts
    label_track: np.ndarray  # [T] raw labels (1..9 scores, or 0/1)
    label_scheme: str = "score"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.label_track = np.asarray(self.label_track, dtype=np.int64)
        if self.data.ndim != 2:
            raise IngestionError(f"data must be [channels x samples], got shape {self.data.shape}")
        c, t = self.data.shape
        if c < 1 or c != len(self.channels):
            raise IngestionError(f"{len(self.channels)} channel names for {c} data rows")
        if t < 1:
            raise IngestionError("recording has no samples")
        if not self.sample_rate_hz > 0:
            raise IngestionError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.label_track.shape != (t,):
            raise IngestionError(f"label track has {self.label_track.size} entries for {t} samples")
        if self.label_scheme not in ("score", "binary"):
            raise IngestionError(f"unknown label scheme {self.label_scheme!r}")
        bad = np.argwhere(~np.isfinite(self.data))
        if bad.size:
            ch, t0 = bad[0]
            raise IngestionError(f"non-finite sample at channel {self.channels[ch]!r}, sample {t0}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class Segment:
    data: np.ndarray  # [c, L]
    label: int
    subject_id: str
    sample_rate_hz: float
    channels: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# montages

# row -> (polar angle of the midline electrode in degrees, signed: + frontal,
# azimuth of the row's "7" electrode on the equator in degrees, 0 = nose, + right)
_ROWS = {
    "FP": (90.0, -18.0),
    "AF": (67.5, -36.0),
    "F": (45.0, -54.0),
    "FC": (22.5, -72.0),
    "FT": (22.5, -72.0),
    "C": (0.0, -90.0),
    "T": (0.0, -90.0),
    "CP": (-22.5, -108.0),
    "TP": (-22.5, -108.0),
    "P": (-45.0, -126.0),
    "PO": (-67.5, -144.0),
    "O": (-90.0, -162.0),
}
# radius of the 10-20 equator (Fpz, T7, Oz) in the projected head plane; leaves
# room for the inferior 9/10 positions inside the unit disc
EQUATOR_RADIUS = 0.8


def _unit(polar_deg: float, azimuth_deg: float) -> np.ndarray:
    th, ph = math.radians(polar_deg), math.radians(azimuth_deg)
    return np.array([math.sin(th) * math.sin(ph), math.sin(th) * math.cos(ph), math.cos(th)])


def _parse_label(name: str) -> tuple[str, str]:
    upper = name.upper()
    for i, ch in enumerate(upper):
        if ch.isdigit() or ch == "Z":
            return upper[:i], upper[i:]
    raise ValueError(f"cannot parse electrode label {name!r}")


def ten_ten_xy(name: str) -> tuple[float, float]:
    """Head-plane (x right, y nose) position of a 10-10 electrode.

    Positions are placed on an ideal spherical head by the 10% arc rule and
    flattened with an azimuthal equidistant projection centred on Cz.
    """
    row, idx = _parse_label(name)
    if row not in _ROWS:
        raise ValueError(f"unknown electrode row in {name!r}")
    mid_polar, eq_az = _ROWS[row]
    if idx == "Z":
        frac = 0.0
    else:
        k = int(idx)
        # odd = left, even = right; 1/2 next to midline, 7/8 on the equator, 9/10 below
        step = (k + 1) // 2
        frac = (-1.0 if k % 2 else 1.0) * step / 4.0
    if mid_polar >= 0:
        mid = _unit(mid_polar, 0.0)
    else:
        mid = _unit(-mid_polar, 180.0)
    if abs(mid_polar) == 90.0:
        # Fp/O rows lie on the equator itself, 18 degrees per step
        steps = frac * 4.0
        az = 18.0 * steps if mid_polar > 0 else 180.0 - 18.0 * steps
        p = _unit(90.0, az)
    else:
        left = _unit(90.0, eq_az)
        right = _unit(90.0, -eq_az)
        # circle through left, mid, right on the sphere; arc parametrised by angle
        normal = np.cross(left - mid, right - mid)
        normal /= np.linalg.norm(normal)
        centre = normal * float(normal @ mid)
        u = mid - centre
        radius = np.linalg.norm(u)
        u /= radius
        v = np.cross(normal, u)
        half = math.atan2(float((right - centre) @ v), float((right - centre) @ u))
        ang = frac * half
        p = centre + radius * (math.cos(ang) * u + math.sin(ang) * v)
    p /= np.linalg.norm(p)
    polar = math.degrees(math.acos(max(-1.0, min(1.0, p[2]))))
    r = EQUATOR_RADIUS * polar / 90.0
    azimuth = math.atan2(p[0], p[1])
    return r * math.sin(azimuth), r * math.cos(azimuth)


HEADBAND_4 = ("TP9", "AF7", "AF8", "TP10")
BCI2A_22 = (
    "Fz", "FC3", "FC1", "FCz", "FC2", "FC4", "C5", "C3", "C1", "Cz", "C2",
    "C4", "C6", "CP3", "CP1", "CPz", "CP2", "CP4", "P1", "Pz", "P2", "POz",
)
BUILTIN_MONTAGES = {"headband4": "headband4.txt", "bci2a22": "bci2a22.txt"}


def build_montage(name: str, channels) -> Montage:
    return Montage(name, tuple((ch, *ten_ten_xy(ch)) for ch in channels))


def read_montage(path) -> Montage:
    electrodes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'name x y'")
        electrodes.append((parts[0], float(parts[1]), float(parts[2])))
    return Montage(Path(path).stem, tuple(electrodes))


def write_montage(montage: Montage, path) -> None:
    lines = [f"{name} {x:.6f} {y:.6f}" for name, x, y in montage.electrodes]
    Path(path).write_text("\n".join(lines) + "\n")


def load_montage(name_or_path: str) -> Montage:
    """Built-in montage by name, or a montage file."""
    if name_or_path in BUILTIN_MONTAGES:
        ref = resources.files("geega") / "data" / BUILTIN_MONTAGES[name_or_path]
        with resources.as_file(ref) as p:
            m = read_montage(p)
        return Montage(name_or_path, m.electrodes)
    return read_montage(name_or_path)


def montage_for_channels(channels: list[str]) -> Montage:
    """First built-in montage containing every channel, restricted to them."""
    wanted = {c.lower() for c in channels}
    for name in BUILTIN_MONTAGES:
        m = load_montage(name)
        if wanted <= {c.lower() for c in m.channel_names}:
            return m.subset(channels)
    raise ValueError(f"no built-in montage covers channels {channels}")


# --------------------------------------------------------------------------
# file formats

def write_binary(rec: EegRecording, path) -> None:
    c, t = rec.data.shape
    meta = json.dumps(
        {"subject_id": rec.subject_id, "channels": list(rec.channels), "label_scheme": rec.label_scheme},
        sort_keys=True,
    ).encode()
    if rec.label_track.min() < 0 or rec.label_track.max() > 255:
        raise IngestionError("labels must fit in one unsigned byte")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c, t, float(rec.sample_rate_hz)))
        fh.write(rec.data.astype("<f4", copy=False).tobytes(order="C"))
        fh.write(rec.label_track.astype(np.uint8).tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def _read_binary(path: Path, subject_id: str | None) -> EegRecording:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise IngestionError(f"{path}: truncated header")
    magic, version, c, t, rate = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise IngestionError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IngestionError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    nbytes = 4 * c * t
    if len(raw) < off + nbytes + t:
        raise IngestionError(f"{path}: truncated sample/label block for {c}x{t}")
    data = np.frombuffer(raw, dtype="<f4", count=c * t, offset=off).reshape(c, t)
    off += nbytes
    labels = np.frombuffer(raw, dtype=np.uint8, count=t, offset=off).astype(np.int64)
    off += t
    meta = {}
    if len(raw) >= off + 4:
        (mlen,) = struct.unpack_from("<I", raw, off)
        meta = json.loads(raw[off + 4:off + 4 + mlen].decode())
    channels = meta.get("channels") or [f"ch{i}" for i in range(c)]
    return EegRecording(
        subject_id=subject_id or meta.get("subject_id") or path.stem,
        channels=list(channels),
        sample_rate_hz=rate,
        data=data.astype(np.float32),
        label_track=labels,
        label_scheme=meta.get("label_scheme", "score"),
    )


def write_csv(rec: EegRecording, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *rec.channels, "label"])
        times = np.arange(rec.n_samples) / rec.sample_rate_hz
        for i in range(rec.n_samples):
            w.writerow([repr(float(times[i])), *(repr(float(v)) for v in rec.data[:, i]), int(rec.label_track[i])])


def _read_csv(path: Path, sample_rate_hz: float | None, subject_id: str | None, label_scheme: str) -> EegRecording:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0].lower() != "time" or header[-1].lower() != "label":
        raise IngestionError(f"{path}: header must be 'time,<ch1>,...,<chC>,label', got {rows[0]}")
    channels = header[1:-1]
    body = rows[1:]
    if not body:
        raise IngestionError(f"{path}: no samples")
    values = np.empty((len(body), len(header)), dtype=np.float64)
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {r + 2} has {len(row)} columns, header has {len(header)}")
        for col, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"{path}: row {r + 2}, column {header[col]!r}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise IngestionError(f"{path}: row {r + 2}, column {header[col]!r}: non-finite value {cell!r}")
            values[r, col] = v
    if sample_rate_hz is None:
        if len(body) < 2:
            raise IngestionError(f"{path}: cannot infer sample rate from one row")
        dt = float(np.median(np.diff(values[:, 0])))
        if dt <= 0:
            raise IngestionError(f"{path}: time column is not increasing")
        sample_rate_hz = 1.0 / dt
    labels = values[:, -1]
    if np.any(labels != np.round(labels)):
        raise IngestionError(f"{path}: label column must be integer")
    return EegRecording(
        subject_id=subject_id or path.stem,
        channels=channels,
        sample_rate_hz=float(sample_rate_hz),
        data=values[:, 1:-1].T.astype(np.float32),
        label_track=labels.astype(np.int64),
        label_scheme=label_scheme,
    )


def ingest(path, fmt: str | None = None, *, sample_rate_hz: float | None = None,
           subject_id: str | None = None, label_scheme: str = "score") -> EegRecording:
    """Read a recording from ``.csv`` or ``.geeg`` (binary) format.

    ``fmt`` overrides the extension-based format choice. CSV sample rate is
    inferred from the time column unless ``sample_rate_hz`` is given.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "binary")
    if fmt == "csv":
        rec = _read_csv(path, sample_rate_hz, subject_id, label_scheme)
    elif fmt == "binary":
        rec = _read_binary(path, subject_id)
    else:
        raise IngestionError(f"unknown format {fmt!r}")
    logger.debug("ingested %s: %d channels x %d samples", path, *rec.data.shape)
    return rec


# --------------------------------------------------------------------------
# labels and windows

def binarize_label(raw_score: int, scheme: str = "score") -> int:
    """Map a 1..9 rating to low (0) / high (1); ``binary`` passes 0/1 through."""
    raw_score = int(raw_score)
    if scheme == "binary":
        if raw_score not in (0, 1):
            raise LabelError(f"binary label must be 0 or 1, got {raw_score}")
        return raw_score
    if not 1 <= raw_score <= 9:
        raise LabelError(f"score must be within 1..9, got {raw_score}")
    return 0 if raw_score <= 5 else 1


def segment(rec: EegRecording, window_seconds: float = 10.0) -> list[Segment]:
    length = int(round(window_seconds * rec.sample_rate_hz))
    if length < 1:
        raise ValueError("window shorter than one sample")
    out = []
    for k in range(rec.n_samples // length):
        sl = slice(k * length, (k + 1) * length)
        raw = np.bincount(rec.label_track[sl]).argmax()
        out.append(Segment(
            data=rec.data[:, sl].copy(),
            label=binarize_label(raw, rec.label_scheme),
            subject_id=rec.subject_id,
            sample_rate_hz=rec.sample_rate_hz,
            channels=list(rec.channels),
        ))
    return out


# --------------------------------------------------------------------------
# synthetic data

BAND_TONES_HZ = {"Delta": 2.5, "Theta": 6.0, "Alpha": 10.0, "Beta": 20.0, "Gamma": 40.0}


@dataclass
class SyntheticSpec:
    """Per-class band-power signatures for generated EEG.

    Every channel carries one sinusoid per band (random phase) with amplitude
    ``band_amplitudes[band]``. Class-1 recordings multiply the amplitude of
    ``target_band`` on ``target_channels`` by ``class_gain``. Subjects differ by
    a random per-channel gain in ``1 +/- subject_jitter``.
    """

    n_subjects: int = 4
    channels: tuple[str, ...] = HEADBAND_4
    sample_rate_hz: float = 256.0
    duration_s: float = 160.0
    band_amplitudes: dict = field(default_factory=lambda: {
        "Delta": 4.0, "Theta": 3.0, "Alpha": 2.0, "Beta": 1.5, "Gamma": 1.0})
    band_tones_hz: dict = field(default_factory=lambda: dict(BAND_TONES_HZ))
    target_band: str = "Alpha"
    target_channels: tuple[str, ...] = ("AF7", "AF8")
    class_gain: float = 2.0
    noise_level: float = 1.0
    subject_jitter: float = 0.2
    low_score: int = 3
    high_score: int = 7

    def validate(self):
        if len(self.channels) == 0:
            raise SpecError("synthetic spec needs at least one channel")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise SpecError("synthetic spec needs positive duration and sample rate")
        if int(self.duration_s * self.sample_rate_hz) < 1:
            raise SpecError("synthetic duration shorter than one sample")
        if self.n_subjects < 1:
            raise SpecError("synthetic spec needs at least one subject")
        missing = set(self.target_channels) - set(self.channels)
        if missing:
            raise SpecError(f"target channels {sorted(missing)} not in channel list")
        if self.target_band not in self.band_amplitudes:
            raise SpecError(f"unknown target band {self.target_band!r}")


def synthesize(spec: SyntheticSpec, seed: int) -> list[EegRecording]:
    """One recording per (subject, class), deterministic in ``seed``."""
    spec.validate()
    n = int(spec.duration_s * spec.sample_rate_hz)
    t = np.arange(n) / spec.sample_rate_hz
    c = len(spec.channels)
    target = np.array([ch in spec.target_channels for ch in spec.channels])
    out = []
    subject_seqs = np.random.SeedSequence(seed).spawn(spec.n_subjects)
    for s, sseq in enumerate(subject_seqs):
        subj_rng, *class_seqs = sseq.spawn(3)
        gain = 1.0 + spec.subject_jitter * np.random.default_rng(subj_rng).uniform(-1, 1, size=c)
        for label, cseq in enumerate(class_seqs):
            rng = np.random.default_rng(cseq)
            data = np.zeros((c, n))
            for band, amp in spec.band_amplitudes.items():
                if amp == 0:
                    continue
                f = spec.band_tones_hz[band]
                phase = rng.uniform(0, 2 * np.pi, size=(c, 1))
                a = np.full(c, float(amp))
                if label == 1 and band == spec.target_band:
                    a = np.where(target, a * spec.class_gain, a)
                data += (a * gain)[:, None] * np.sin(2 * np.pi * f * t[None, :] + phase)
            if spec.noise_level > 0:
                data += spec.noise_level * rng.standard_normal((c, n))
            score = spec.high_score if label == 1 else spec.low_score
            out.append(EegRecording(
                subject_id=f"S{s + 1:02d}",
                channels=list(spec.channels),
                sample_rate_hz=spec.sample_rate_hz,
                data=data.astype(np.float32),
                label_track=np.full(n, score),
            ))
    return out
