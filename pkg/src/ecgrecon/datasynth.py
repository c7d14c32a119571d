"""Seeded synthetic paired EGM/ECG beats with a learnable nonlinear link.

Three latent channels (atrial, ventricular and repolarization bump trains
with per-beat jitter) drive both signals: the 12 ECG leads are linear mixes
of the latents while the 5 EGM channels pass through a tanh saturation plus
sensor noise. Both signals therefore carry the same information and a
reconstruction failure points at the toolkit, not the data. Every beat is
generated from its own counter-based random stream, so regeneration is
exact and order-free.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .sigproc import BEAT_LEN, BeatRecord, Dataset, make_split, normalize_channels

N_LATENTS = 3
_MISC_STREAM = 2 ** 62  # keeps model/split streams clear of beat indices


@dataclass
class Bump:
    center: float
    width: float
    amplitude: float


def _default_bumps() -> list:
    # atrial wave / ventricular complex / repolarization wave at 1 kHz
    return [
        [Bump(105.0, 14.0, 0.28)],
        [Bump(175.0, 4.0, -0.30), Bump(195.0, 6.0, 1.00), Bump(213.0, 5.0, -0.35)],
        [Bump(300.0, 26.0, 0.45)],
    ]


@dataclass
class PatientModel:
    """Everything needed to regenerate one synthetic patient exactly."""

    seed: int
    bumps: list = field(default_factory=_default_bumps)
    a_ecg: np.ndarray = None
    a_egm: np.ndarray = None
    gain: float = 1.5
    noise_sd: float = 0.01

    def __post_init__(self):
        if self.a_ecg is None or self.a_egm is None:
            rng = np.random.Generator(np.random.Philox(key=[self.seed, _MISC_STREAM]))
            if self.a_ecg is None:
                self.a_ecg = _random_mixing(rng, 12)
            if self.a_egm is None:
                self.a_egm = _random_mixing(rng, 5)
        self.a_ecg = np.asarray(self.a_ecg, dtype=float)
        self.a_egm = np.asarray(self.a_egm, dtype=float)
        for name, mat in (("a_ecg", self.a_ecg), ("a_egm", self.a_egm)):
            if mat.shape[1] != N_LATENTS:
                raise ValueError(f"{name} must have {N_LATENTS} columns")
            if np.linalg.cond(mat) >= 1e3:
                raise ValueError(f"{name} is ill-conditioned")
        if any(b.width <= 0 for row in self.bumps for b in row):
            raise ValueError("bump widths must be positive")

    def save(self, path: str) -> None:
        payload = {
            "seed": self.seed,
            "gain": self.gain,
            "noise_sd": self.noise_sd,
            "bumps": [[vars(b) for b in row] for row in self.bumps],
            "a_ecg": self.a_ecg.tolist(),
            "a_egm": self.a_egm.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "PatientModel":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            seed=payload["seed"],
            bumps=[[Bump(**b) for b in row] for row in payload["bumps"]],
            a_ecg=np.asarray(payload["a_ecg"]),
            a_egm=np.asarray(payload["a_egm"]),
            gain=payload["gain"],
            noise_sd=payload["noise_sd"],
        )


def _random_mixing(rng, rows: int) -> np.ndarray:
    """Full-rank rows of unit norm; resampled until well-conditioned."""
    for _ in range(100):
        mat = rng.standard_normal((rows, N_LATENTS))
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        if np.linalg.cond(mat) < 1e3:
            return mat
    raise RuntimeError("could not draw a well-conditioned mixing matrix")


def _beat_rng(model: PatientModel, beat_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[model.seed, beat_index]))


def _latents(model: PatientModel, rng) -> np.ndarray:
    """Jittered bump trains: +-3 samples in time, +-5% in amplitude."""
    t = np.arange(BEAT_LEN, dtype=float)
    s = np.zeros((N_LATENTS, BEAT_LEN))
    for j, row in enumerate(model.bumps):
        for bump in row:
            center = bump.center + rng.uniform(-3.0, 3.0)
            amp = bump.amplitude * (1.0 + rng.uniform(-0.05, 0.05))
            s[j] += amp * np.exp(-0.5 * ((t - center) / bump.width) ** 2)
    return s


def gen_beat(model: PatientModel, beat_index: int) -> BeatRecord:
    """One beat from the (seed, beat_index)-keyed stream; bit-reproducible."""
    rng = _beat_rng(model, beat_index)
    s = _latents(model, rng)
    ecg = model.a_ecg @ s
    egm = np.tanh(model.gain * (model.a_egm @ s))
    if model.noise_sd > 0:
        egm = egm + rng.normal(0.0, model.noise_sd, egm.shape)
    return BeatRecord(
        egm=normalize_channels(egm),
        ecg=normalize_channels(ecg),
        beat_id=beat_index,
        patient_id=model.seed,
    )


def gen_dataset(model: PatientModel, n_beats: int) -> Dataset:
    """n_beats beats plus a seeded 50/50 split."""
    if n_beats < 2:
        raise ValueError("need at least 2 beats to form a split")
    beats = [gen_beat(model, i) for i in range(n_beats)]
    train_idx, test_idx = make_split(n_beats, seed=model.seed)
    return Dataset(beats=beats, train_idx=train_idx, test_idx=test_idx)


def check_channel_subset(model: PatientModel, channels) -> None:
    """Warn when a kept EGM channel couples too weakly to the latents."""
    for ch in channels:
        norm = float(np.linalg.norm(model.a_egm[ch]))
        if norm < 0.1:
            warnings.warn(
                f"EGM channel {ch} has mixing norm {norm:.3g} < 0.1; "
                "reconstruction from it alone may be ill-posed")
