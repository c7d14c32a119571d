"""Signal-processing layer: IIR pre-filtering, beat segmentation, STFT grids.

Everything here is a pure function of its inputs (safe to call from several
workers at once). Filtering follows the usual clinical recipe: zero-phase
band-pass between 3 and 50 Hz at 1 kHz sampling, then fixed-length windows
around each beat. Time-frequency grids use a rectangular window so the
overlap-add inverse is exact.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE_HZ = 1000.0
BAND_LO_HZ = 3.0
BAND_HI_HZ = 50.0
FILTER_ORDER = 5

N_EGM_CHANNELS = 5
N_ECG_CHANNELS = 12
ECG_LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF",
                  "V1", "V2", "V3", "V4", "V5", "V6")

# Window 30 / overlap 6 gives hop 24; 390 is the unique beat length that
# yields exactly 16 frames, matching the 16 frequency bins of a 30-point
# real FFT.
STFT_WINDOW = 30
STFT_OVERLAP = 6
BEAT_LEN = 390


# ---------------------------------------------------------------------------
# IIR band-pass design and zero-phase filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IirCascade:
    """A digital IIR filter as a cascade of biquad sections.

    ``sections`` is an (n, 5) array with columns (b0, b1, b2, a1, a2);
    the leading denominator coefficient is implicitly 1.
    """

    sections: np.ndarray
    sample_rate_hz: float

    @property
    def order(self) -> int:
        return len(self.sections)

    def poles(self) -> np.ndarray:
        """All denominator roots, concatenated over sections."""
        ps = [np.roots([1.0, a1, a2]) for _, _, _, a1, a2 in self.sections]
        return np.concatenate(ps) if ps else np.empty(0, complex)

    def is_stable(self, margin: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0 - margin))

    def freq_response(self, freqs_hz) -> np.ndarray:
        """Complex response at the given frequencies (Hz) on the unit circle."""
        z = np.exp(2j * np.pi * np.asarray(freqs_hz, dtype=float) / self.sample_rate_hz)
        zi1, zi2 = 1.0 / z, 1.0 / (z * z)
        h = np.ones_like(z)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * zi1 + b2 * zi2) / (1.0 + a1 * zi1 + a2 * zi2)
        return h


def _conjugate_pairs(roots: np.ndarray) -> list[tuple[complex, complex]]:
    """Group roots of a real polynomial into conjugate (or real) pairs."""
    tol = 1e-8 * max(1.0, float(np.max(np.abs(roots))))
    upper = [r for r in roots if r.imag > tol]
    lower = [r for r in roots if r.imag < -tol]
    reals = sorted(r.real for r in roots if abs(r.imag) <= tol)
    if len(upper) != len(lower) or len(reals) % 2:
        raise ValueError("roots do not form conjugate pairs")
    pairs = []
    remaining = list(lower)
    for u in upper:
        j = int(np.argmin([abs(np.conj(u) - l) for l in remaining]))
        pairs.append((u, remaining.pop(j)))
    for k in range(0, len(reals), 2):
        pairs.append((complex(reals[k]), complex(reals[k + 1])))
    return pairs


def design_bandpass(order: int, lo_hz: float, hi_hz: float, fs_hz: float) -> IirCascade:
    """Design a Butterworth band-pass filter as second-order sections.

    The analog low-pass prototype is band-transformed and digitized with the
    bilinear transform, pre-warping the band edges so the digital cutoffs
    land where requested.

    Args:
        order: prototype order; the cascade has this many biquads.
        lo_hz, hi_hz: band edges in Hz, 0 < lo < hi < fs/2.
        fs_hz: sampling rate in Hz.

    Raises:
        ValueError: on invalid band edges or order.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if not (0.0 < lo_hz < hi_hz < fs_hz / 2.0):
        raise ValueError(
            f"band edges must satisfy 0 < lo < hi < fs/2, got lo={lo_hz}, "
            f"hi={hi_hz}, fs={fs_hz}")

    # Analog Butterworth prototype: poles on the unit circle, left half-plane.
    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))

    # Pre-warp edges, then low-pass -> band-pass: s <- (s^2 + w0^2)/(bw*s).
    warped_lo = 2.0 * fs_hz * np.tan(np.pi * lo_hz / fs_hz)
    warped_hi = 2.0 * fs_hz * np.tan(np.pi * hi_hz / fs_hz)
    bw = warped_hi - warped_lo
    w0_sq = warped_lo * warped_hi

    half = proto * bw / 2.0
    root = np.sqrt(half * half - w0_sq)
    poles_s = np.concatenate([half + root, half - root])
    # n zeros at s=0; gain bw^order from the substitution.

    # Bilinear transform z = (2fs + s) / (2fs - s).
    fs2 = 2.0 * fs_hz
    poles_z = (fs2 + poles_s) / (fs2 - poles_s)
    gain = (bw ** order) * (fs2 ** order) / np.prod(fs2 - poles_s)
    gain = float(np.real(gain))

    # Every section carries one zero at z=+1 and one at z=-1 (numerator
    # z^2 - 1), with the overall gain spread evenly for balanced dynamics.
    g = abs(gain) ** (1.0 / order)
    sign = 1.0 if gain >= 0 else -1.0
    pairs = _conjugate_pairs(poles_z)
    pairs.sort(key=lambda pq: abs(pq[0] * pq[1]))  # high-Q sections last
    sections = np.zeros((order, 5))
    for i, (p, q) in enumerate(pairs):
        s = g * (sign if i == 0 else 1.0)
        sections[i] = (s, 0.0, -s, -float(np.real(p + q)), float(np.real(p * q)))
    casc = IirCascade(sections=sections, sample_rate_hz=float(fs_hz))
    if not casc.is_stable():
        raise ValueError("designed filter is unstable; check band edges")
    return casc


def _section_zi(section: np.ndarray) -> np.ndarray:
    """Steady-state DF2T filter state for a unit constant input."""
    b0, b1, b2, a1, a2 = section
    a_mat = np.array([[-a1, 1.0], [-a2, 0.0]])
    rhs = np.array([b1 - a1 * b0, b2 - a2 * b0])
    return np.linalg.solve(np.eye(2) - a_mat, rhs)


def sosfilt(cascade: IirCascade, x: np.ndarray, zi: np.ndarray | None = None) -> np.ndarray:
    """Causal cascade filtering (direct form II transposed).

    ``zi``, when given, holds one (z1, z2) state pair per section.
    """
    y = np.asarray(x, dtype=float).copy()
    n_sec = cascade.order
    state = np.zeros((n_sec, 2)) if zi is None else np.array(zi, dtype=float)
    for s in range(n_sec):
        b0, b1, b2, a1, a2 = cascade.sections[s]
        z1, z2 = state[s]
        out = y  # filter in place, section by section
        for i in range(len(out)):
            xi = out[i]
            yi = b0 * xi + z1
            z1 = b1 * xi - a1 * yi + z2
            z2 = b2 * xi - a2 * yi
            out[i] = yi
        state[s] = (z1, z2)
    return y


def filtfilt(cascade: IirCascade, x: np.ndarray) -> np.ndarray:
    """Zero-phase filtering: forward pass, reverse, second pass, reverse.

    The signal is extended on both ends by odd reflection (three times the
    realized filter order) and each pass starts from the steady-state filter
    response to the first sample, which keeps edge transients out of the
    returned segment.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return np.stack([filtfilt(cascade, row) for row in x])
    if x.ndim != 1:
        raise ValueError("filtfilt expects a vector or a channels x time matrix")
    padlen = 3 * 2 * cascade.order
    if len(x) <= padlen:
        raise ValueError(f"input too short: need more than {padlen} samples, got {len(x)}")

    ext = np.concatenate([
        2.0 * x[0] - x[padlen:0:-1],
        x,
        2.0 * x[-1] - x[-2:-padlen - 2:-1],
    ])

    # Per-section steady states, scaled by the running DC gain of the chain.
    zi_unit = np.zeros((cascade.order, 2))
    scale = 1.0
    for s in range(cascade.order):
        zi_unit[s] = scale * _section_zi(cascade.sections[s])
        b0, b1, b2, a1, a2 = cascade.sections[s]
        scale *= (b0 + b1 + b2) / (1.0 + a1 + a2)

    y = sosfilt(cascade, ext, zi=zi_unit * ext[0])
    y = y[::-1]
    y = sosfilt(cascade, y, zi=zi_unit * y[0])
    y = y[::-1]
    return y[padlen:len(y) - padlen]


# ---------------------------------------------------------------------------
# Beats
# ---------------------------------------------------------------------------

@dataclass
class BeatRecord:
    """One heartbeat: paired EGM (5 x T) and ECG (12 x T) matrices."""

    egm: np.ndarray
    ecg: np.ndarray
    beat_id: int
    patient_id: int = 0

    def __post_init__(self):
        self.egm = np.asarray(self.egm, dtype=float)
        self.ecg = np.asarray(self.ecg, dtype=float)
        if self.egm.shape[0] != N_EGM_CHANNELS:
            raise ValueError(f"expected {N_EGM_CHANNELS} EGM channels, got {self.egm.shape[0]}")
        if self.ecg.shape[0] != N_ECG_CHANNELS:
            raise ValueError(f"expected {N_ECG_CHANNELS} ECG channels, got {self.ecg.shape[0]}")
        if self.egm.shape[1] != self.ecg.shape[1]:
            raise ValueError("EGM and ECG lengths differ")
        if not (np.isfinite(self.egm).all() and np.isfinite(self.ecg).all()):
            raise ValueError("beat contains non-finite samples")

    @property
    def n_samples(self) -> int:
        return self.egm.shape[1]


@dataclass
class Dataset:
    """Beat list plus a disjoint train/test partition."""

    beats: list
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test splits overlap")

    @property
    def train_beats(self) -> list:
        return [self.beats[i] for i in self.train_idx]

    @property
    def test_beats(self) -> list:
        return [self.beats[i] for i in self.test_idx]


def make_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 50/50 shuffle split (test keeps the odd element out)."""
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return perm[:n // 2].copy(), perm[n // 2:].copy()


def normalize_channels(mat: np.ndarray) -> np.ndarray:
    """Mean-center each row and scale it to unit maximum magnitude.

    All-zero (constant) rows stay zero, so row max-abs is either 0 or 1.
    """
    out = np.asarray(mat, dtype=float)
    out = out - out.mean(axis=1, keepdims=True)
    peak = np.abs(out).max(axis=1, keepdims=True)
    nonzero = peak[:, 0] > 0
    out[nonzero] /= peak[nonzero]
    return out


@dataclass
class SegmentResult:
    beats: list
    skipped: int


def segment_beats(egm: np.ndarray, ecg: np.ndarray, centers,
                  beat_len: int = BEAT_LEN, patient_id: int = 0) -> SegmentResult:
    """Cut fixed windows around beat centers from a continuous recording.

    Each window spans [c - beat_len//2, c - beat_len//2 + beat_len) and each
    channel is normalized per beat. Windows that fall outside the recording
    are skipped and counted in the result.
    """
    egm = np.asarray(egm, dtype=float)
    ecg = np.asarray(ecg, dtype=float)
    if egm.shape[1] != ecg.shape[1]:
        raise ValueError("EGM and ECG recordings have different lengths")
    n = egm.shape[1]
    half = beat_len // 2
    beats, skipped = [], 0
    for c in centers:
        start = int(c) - half
        if start < 0 or start + beat_len > n:
            skipped += 1
            continue
        sl = slice(start, start + beat_len)
        beats.append(BeatRecord(
            egm=normalize_channels(egm[:, sl]),
            ecg=normalize_channels(ecg[:, sl]),
            beat_id=len(beats),
            patient_id=patient_id,
        ))
    if skipped:
        warnings.warn(f"segment_beats skipped {skipped} out-of-range window(s)")
    return SegmentResult(beats=beats, skipped=skipped)


def detect_beats(ecg_lead: np.ndarray, fs_hz: float = SAMPLE_RATE_HZ) -> np.ndarray:
    """Locate beats as peaks of the smoothed squared-derivative envelope.

    Expects a pre-filtered lead. Candidate peaks must exceed an adaptive
    threshold (a quarter of the envelope maximum) and are thinned with a
    200 ms refractory window, keeping the strongest candidate in each.
    """
    x = np.asarray(ecg_lead, dtype=float)
    if x.size < 3:
        return np.empty(0, dtype=int)
    env = np.diff(x) ** 2
    win = int(round(0.061 * fs_hz)) | 1
    env = np.convolve(env, np.ones(win) / win, mode="same")
    thr = 0.25 * env.max()
    if thr <= 0.0:
        return np.empty(0, dtype=int)
    interior = np.arange(1, len(env) - 1)
    is_peak = (env[interior] > thr) & (env[interior] >= env[interior - 1]) \
        & (env[interior] > env[interior + 1])
    candidates = interior[is_peak]
    refractory = int(round(0.2 * fs_hz))
    kept: list[int] = []
    for i in candidates[np.argsort(env[candidates])[::-1]]:
        if all(abs(i - j) > refractory for j in kept):
            kept.append(int(i))
    # diff() shifts the envelope half a sample early; +1 recenters.
    return np.array(sorted(k + 1 for k in kept), dtype=int)


# ---------------------------------------------------------------------------
# Time-frequency grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StftConfig:
    """Rectangular-window STFT geometry.

    hop = window_len - overlap; n_freq_bins must equal window_len//2 + 1
    (real FFT) and n_frames is pinned to the beat length in use.
    """

    window_len: int = STFT_WINDOW
    overlap: int = STFT_OVERLAP
    n_freq_bins: int = field(default=STFT_WINDOW // 2 + 1)
    n_frames: int = 16

    def __post_init__(self):
        if self.hop <= 0:
            raise ValueError("overlap must be smaller than the window")
        if self.n_freq_bins != self.window_len // 2 + 1:
            raise ValueError("n_freq_bins must be window_len//2 + 1")

    @property
    def hop(self) -> int:
        return self.window_len - self.overlap

    @property
    def signal_len(self) -> int:
        return (self.n_frames - 1) * self.hop + self.window_len

    @classmethod
    def for_signal_len(cls, n: int, window_len: int = STFT_WINDOW,
                       overlap: int = STFT_OVERLAP) -> "StftConfig":
        hop = window_len - overlap
        if (n - window_len) % hop:
            raise ValueError(f"signal length {n} does not tile into hop-{hop} frames")
        return cls(window_len=window_len, overlap=overlap,
                   n_freq_bins=window_len // 2 + 1,
                   n_frames=(n - window_len) // hop + 1)


DEFAULT_STFT = StftConfig()


def stft(channels: np.ndarray, config: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Per-channel rectangular-window STFT.

    Args:
        channels: (M, T) real matrix with T matching the config exactly.

    Returns:
        (M, K, T_f) complex grid; rows are frequency bins, columns frames.
    """
    x = np.atleast_2d(np.asarray(channels, dtype=float))
    m, t = x.shape
    if t != config.signal_len:
        raise ValueError(f"expected {config.signal_len} samples per channel, got {t}")
    frames = np.lib.stride_tricks.sliding_window_view(x, config.window_len, axis=1)
    frames = frames[:, ::config.hop, :]           # (M, T_f, window)
    spec = np.fft.rfft(frames, axis=-1)           # (M, T_f, K)
    return np.ascontiguousarray(spec.transpose(0, 2, 1))


def istft(grid: np.ndarray, config: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Inverse STFT by overlap-add, normalized by the summed window."""
    g = np.asarray(grid)
    if g.ndim != 3 or g.shape[1:] != (config.n_freq_bins, config.n_frames):
        raise ValueError(f"grid shape {g.shape} does not match the STFT config")
    m = g.shape[0]
    frames = np.fft.irfft(g.transpose(0, 2, 1), n=config.window_len, axis=-1)
    out = np.zeros((m, config.signal_len))
    wsum = np.zeros(config.signal_len)
    for i in range(config.n_frames):
        lo = i * config.hop
        out[:, lo:lo + config.window_len] += frames[:, i, :]
        wsum[lo:lo + config.window_len] += 1.0
    return out / wsum


def grid_to_planes(grid: np.ndarray) -> np.ndarray:
    """Complex (M, K, T_f) -> real (2M, K, T_f), real/imag interleaved."""
    g = np.asarray(grid)
    planes = np.empty((2 * g.shape[0],) + g.shape[1:], dtype=float)
    planes[0::2] = g.real
    planes[1::2] = g.imag
    return planes


def planes_to_grid(planes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`grid_to_planes`."""
    p = np.asarray(planes, dtype=float)
    if p.shape[0] % 2:
        raise ValueError("plane count must be even (real/imag pairs)")
    return p[0::2] + 1j * p[1::2]


# ---------------------------------------------------------------------------
# Correlation metric
# ---------------------------------------------------------------------------

def pearson_flagged(x, y) -> tuple[float, bool]:
    """Pearson r with population statistics, plus a degeneracy flag.

    A constant input has no defined correlation; we report r=0 and set the
    flag instead of raising so batched evaluation never aborts.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("inputs must share a length of at least 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.mean(xc * xc))
    sy = np.sqrt(np.mean(yc * yc))
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    r = float(np.mean(xc * yc) / (sx * sy))
    return float(np.clip(r, -1.0, 1.0)), False


def pearson(x, y) -> float:
    """Pearson correlation in [-1, 1]; 0 for degenerate (constant) inputs."""
    return pearson_flagged(x, y)[0]


# ---------------------------------------------------------------------------
# Beat directory persistence
# ---------------------------------------------------------------------------

_INDEX_NAME = "index.json"


def _channel_names() -> list[str]:
    return [f"egm{i}" for i in range(N_EGM_CHANNELS)] + list(ECG_LEAD_NAMES)


def save_beats(dirpath: str, beats, sample_rate_hz: float = SAMPLE_RATE_HZ,
               split: tuple[np.ndarray, np.ndarray] | None = None) -> None:
    """Persist beats as little-endian float64 files with JSON sidecars.

    Each beat is stored row-major as a (17, T) stack of the 5 EGM rows over
    the 12 ECG rows; ``index.json`` maps beat ids to files and carries the
    optional train/test split.
    """
    os.makedirs(dirpath, exist_ok=True)
    index = {"sample_rate_hz": sample_rate_hz, "n_beats": len(beats), "beats": {}}
    for beat in beats:
        fname = f"beat_{beat.beat_id:06d}.f64"
        stacked = np.vstack([beat.egm, beat.ecg]).astype("<f8")
        with open(os.path.join(dirpath, fname), "wb") as fh:
            fh.write(stacked.tobytes(order="C"))
        header = {
            "shape": list(stacked.shape),
            "dtype": "<f8",
            "order": "row-major",
            "sample_rate_hz": sample_rate_hz,
            "channel_names": _channel_names(),
            "beat_id": beat.beat_id,
            "patient_id": beat.patient_id,
        }
        with open(os.path.join(dirpath, fname.replace(".f64", ".json")), "w") as fh:
            json.dump(header, fh, indent=1, sort_keys=True)
        index["beats"][str(beat.beat_id)] = fname
    if split is not None:
        index["split"] = {"train": [int(i) for i in split[0]],
                          "test": [int(i) for i in split[1]]}
    with open(os.path.join(dirpath, _INDEX_NAME), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def load_beats(dirpath: str):
    """Load a beat directory written by :func:`save_beats`.

    Returns:
        (beats, split, sample_rate_hz) where split is (train_idx, test_idx)
        arrays or None if the directory carries no partition.
    """
    with open(os.path.join(dirpath, _INDEX_NAME)) as fh:
        index = json.load(fh)
    beats = []
    for beat_id in sorted(index["beats"], key=int):
        fname = index["beats"][beat_id]
        with open(os.path.join(dirpath, fname.replace(".f64", ".json"))) as fh:
            header = json.load(fh)
        shape = tuple(header["shape"])
        with open(os.path.join(dirpath, fname), "rb") as fh:
            stacked = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
        beats.append(BeatRecord(
            egm=stacked[:N_EGM_CHANNELS].copy(),
            ecg=stacked[N_EGM_CHANNELS:].copy(),
            beat_id=header["beat_id"],
            patient_id=header.get("patient_id", 0),
        ))
    split = None
    if "split" in index:
        split = (np.asarray(index["split"]["train"], dtype=int),
                 np.asarray(index["split"]["test"], dtype=int))
    return beats, split, float(index["sample_rate_hz"])
