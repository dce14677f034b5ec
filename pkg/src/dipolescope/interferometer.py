"""Balanced-homodyne Mach-Zehnder pulse detection and its noise statistics.

A pulse area is the photon-count difference between the two interferometer
output ports integrated over one pulse. For n photons at visibility V the
mean area is ``n * V * cos(fringe_offset - phase)``, which at half fringe
(offset pi/2) reduces to ``n V sin(phase)``. Coherent-state shot noise gives
the difference a variance of exactly n.
"""

import csv
import json
import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .atomic import CS_D2, AtomicLine, ProbePulseConfig

log = logging.getLogger(__name__)

PhaseInput = Union[float, Sequence[float], np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class NoiseConfig:
    """Noise sources of the detection chain.

    ``balanced=False`` replaces the differential signal by a single output
    port, so common-mode amplitude noise is no longer cancelled.
    """

    shot_noise: bool = True
    amplitude_rms: float = 0.0
    phase_rms: float = 0.0
    drift_rate: float = 0.0
    drift_walk_rms: float = 0.0
    residual_phase: float = 0.0
    balanced: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("amplitude_rms", "phase_rms", "drift_walk_rms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class PulseTrainRecord:
    areas: np.ndarray
    timestamps: np.ndarray
    photon_number: float
    visibility: float = 0.98
    fringe_offset: float = np.pi / 2
    seed: int = 0
    balanced: bool = True

    def __post_init__(self):
        self.areas = np.asarray(self.areas, dtype=float)
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if self.areas.shape != self.timestamps.shape:
            raise ValueError("areas and timestamps differ in length")
        if not 0 < self.visibility <= 1:
            raise ValueError(f"visibility {self.visibility} outside (0, 1]")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must increase strictly")

    def __len__(self):
        return len(self.areas)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp_s", "area"])
            for t, a in zip(self.timestamps, self.areas):
                w.writerow([repr(float(t)), repr(float(a))])

    def to_dict(self):
        return {
            "photon_number": self.photon_number,
            "visibility": self.visibility,
            "fringe_offset_rad": self.fringe_offset,
            "seed": self.seed,
            "balanced": self.balanced,
            "timestamps_s": self.timestamps.tolist(),
            "areas": self.areas.tolist(),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        return cls(
            areas=d["areas"],
            timestamps=d["timestamps_s"],
            photon_number=d["photon_number"],
            visibility=d["visibility"],
            fringe_offset=d["fringe_offset_rad"],
            seed=d["seed"],
            balanced=d.get("balanced", True),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _evaluate_phase(phase: PhaseInput, t: np.ndarray) -> np.ndarray:
    if callable(phase):
        out = np.asarray(phase(t), dtype=float)
        out = np.broadcast_to(out, t.shape)
    else:
        out = np.broadcast_to(np.asarray(phase, dtype=float), t.shape)
    if not np.all(np.isfinite(out)):
        raise ValueError("phase trajectory is not finite at every pulse")
    return np.array(out)


def simulate_areas(photon_number: float, phases, timestamps, noise: NoiseConfig, rng,
                   visibility: float = 0.98, fringe_offset: float = np.pi / 2) -> np.ndarray:
    """Pulse areas for one or many trains.

    ``phases`` has shape (..., K) with K pulses per train at ``timestamps``;
    every leading index is an independent train with its own noise.
    """
    if not 0 < visibility <= 1:
        raise ValueError(f"visibility {visibility} outside (0, 1]")
    phases = np.asarray(phases, dtype=float)
    t = np.asarray(timestamps, dtype=float) - timestamps[0]
    shape = phases.shape
    residual = noise.residual_phase + noise.drift_rate * t
    if noise.drift_walk_rms > 0:
        residual = residual + np.cumsum(rng.normal(0.0, noise.drift_walk_rms, shape), axis=-1)
    jitter = rng.normal(0.0, noise.phase_rms, shape) if noise.phase_rms > 0 else 0.0
    photons = photon_number * (1 + rng.normal(0.0, noise.amplitude_rms, shape)) \
        if noise.amplitude_rms > 0 else np.full(shape, float(photon_number))
    photons = np.clip(photons, 0.0, None)

    # cos(offset - phase) written as a sine so the half-fringe point is exactly balanced
    fringe = visibility * np.sin(residual + phases + jitter + (np.pi / 2 - fringe_offset))
    if noise.balanced:
        mean, var = photons * fringe, photons
    else:
        mean = photons * (1 + fringe) / 2
        var = mean
    if not noise.shot_noise:
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(shape)


def simulate_pulse_train(probe: ProbePulseConfig, phase: PhaseInput, noise: NoiseConfig = NoiseConfig(),
                         visibility: float = 0.98, fringe_offset: float = np.pi / 2,
                         line: AtomicLine = CS_D2, rng=None, photon_number=None) -> PulseTrainRecord:
    """Simulate integrated pulse areas for one train.

    ``phase`` is the atomic phase shift per pulse: a constant, an array with
    one value per pulse, or a function of the pulse timestamps (s). The
    residual interferometer phase is ``residual_phase + drift_rate * t`` plus
    an optional random walk, with t measured from the first pulse.
    """
    if not 0 < visibility <= 1:
        raise ValueError(f"visibility {visibility} outside (0, 1]")
    rng = np.random.default_rng(noise.seed) if rng is None else rng
    t = probe.timestamps
    n = probe.photon_number(line) if photon_number is None else float(photon_number)
    areas = simulate_areas(n, _evaluate_phase(phase, t), t, noise, rng, visibility, fringe_offset)
    return PulseTrainRecord(areas=areas, timestamps=t, photon_number=n, visibility=visibility,
                            fringe_offset=fringe_offset, seed=noise.seed, balanced=noise.balanced)


def two_point_variance(record, m: int = 1) -> float:
    """Half mean squared difference of areas ``m`` pulses apart."""
    a = np.asarray(record.areas if isinstance(record, PulseTrainRecord) else record, dtype=float)
    m = int(m)
    if m < 1 or m >= len(a):
        raise ValueError(f"separation {m} must satisfy 1 <= m < {len(a)}")
    d = a[m:] - a[:-m]
    return float(np.mean(d * d) / 2)


def phase_from_record(record: PulseTrainRecord, reference: PulseTrainRecord, return_flags: bool = False):
    """Per-pulse atomic phase from a probe train and its atom-free reference.

    Each area is inverted through the fringe separately and the reference
    phase subtracted, which removes any residual interferometer phase common
    to both trains. Pulses whose normalised area leaves [-1, 1] are clamped
    and flagged.
    """
    if len(record) != len(reference):
        raise ValueError(f"record has {len(record)} pulses, reference {len(reference)}")
    if record.photon_number != reference.photon_number:
        raise ValueError("record and reference photon numbers differ")
    if not record.balanced or not reference.balanced:
        raise ValueError("phase inversion needs balanced-detection records")
    phi, flags = invert_areas(record.areas, reference.areas, record.photon_number, record.visibility,
                              record.fringe_offset, reference.fringe_offset)
    if flags.any():
        log.warning("%d pulse(s) outside the fringe range were clamped", int(flags.sum()))
    return (phi, flags) if return_flags else phi


def invert_areas(areas, ref_areas, photon_number, visibility=0.98, fringe_offset=np.pi / 2,
                 ref_fringe_offset=None):
    """Vectorised core of :func:`phase_from_record`; returns (phase, flags)."""
    ref_fringe_offset = fringe_offset if ref_fringe_offset is None else ref_fringe_offset
    scale = photon_number * visibility
    x = np.asarray(areas, dtype=float) / scale
    y = np.asarray(ref_areas, dtype=float) / scale
    flags = (np.abs(x) > 1) | (np.abs(y) > 1)
    phi = np.arcsin(np.clip(x, -1, 1)) - np.arcsin(np.clip(y, -1, 1))
    # an offset away from pi/2 shifts the sin-branch by the same amount
    phi = phi - (np.pi / 2 - fringe_offset) + (np.pi / 2 - ref_fringe_offset)
    return phi, flags


def noise_scaling_exponent(points):
    """OLS slope of log(variance) against log(photon number) and its standard
    error. ``points`` is an iterable of (n, variance) pairs."""
    arr = np.asarray(list(points), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 3:
        raise ValueError("need at least three (n, variance) pairs")
    if np.any(arr <= 0):
        raise ValueError("photon numbers and variances must be positive")
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    xm = x - x.mean()
    sxx = np.dot(xm, xm)
    slope = np.dot(xm, y - y.mean()) / sxx
    resid = y - y.mean() - slope * xm
    s2 = np.dot(resid, resid) / (len(x) - 2)
    return float(slope), float(np.sqrt(s2 / sxx))
