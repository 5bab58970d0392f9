"""Linear-threshold rejector cascade: plaintext evaluation, encryption, and cloud-side secure evaluation.

A weak classifier votes ``alpha`` when the window's response ``x·y`` clears
its threshold and ``beta`` otherwise; a stage accepts when the vote sum is
non-negative; the cascade accepts when every stage does, stopping at the
first rejection.

Both evaluation paths compare with ``>=`` by default so that plaintext and
secure decisions agree exactly. Pass ``inclusive=False`` for the strict form.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .aspe import (AspeKey, DimensionError, EncDataVector, EncQueryVector, _rng,
                   encrypt_data_many, read_ciphertext, secure_inner)
from .binio import FormatError, Reader, TruncatedError, VersionError, Writer

MODEL_MAGIC = b"CASC"
ENC_MODEL_MAGIC = b"ECAS"
MODEL_VERSION = 1

# 22 stages, 3 classifiers first, 213 at most, 2135 in total
FRONTAL_STAGE_SIZES = (3, 16, 21, 39, 33, 44, 50, 51, 56, 71, 80,
                       103, 111, 102, 135, 137, 140, 160, 177, 182, 211, 213)

PROBE_WINDOWS = 256


@dataclass(frozen=True, eq=False)
class WeakClassifier:
    hyperplane: np.ndarray
    alpha: float
    beta: float
    theta: float

    def __post_init__(self):
        h = np.array(self.hyperplane, dtype=np.float64, copy=True)
        if h.ndim != 1 or h.size == 0:
            raise DimensionError("hyperplane must be a non-empty vector")
        h.setflags(write=False)
        object.__setattr__(self, "hyperplane", h)
        for name in ("alpha", "beta", "theta"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.alpha == self.beta:
            raise ValueError("alpha == beta makes a constant classifier")

    def __eq__(self, other):
        if not isinstance(other, WeakClassifier):
            return NotImplemented
        return (np.array_equal(self.hyperplane, other.hyperplane)
                and (self.alpha, self.beta, self.theta) == (other.alpha, other.beta, other.theta))


@dataclass(frozen=True)
class CascadeStage:
    weak_classifiers: tuple[WeakClassifier, ...]

    def __post_init__(self):
        object.__setattr__(self, "weak_classifiers", tuple(self.weak_classifiers))
        if not self.weak_classifiers:
            raise ValueError("a stage needs at least one weak classifier")

    def __len__(self):
        return len(self.weak_classifiers)

    @cached_property
    def arrays(self):
        """Stacked (hyperplanes, alpha, beta, theta) for vectorized evaluation."""
        wcs = self.weak_classifiers
        return (np.stack([w.hyperplane for w in wcs]),
                np.array([w.alpha for w in wcs]),
                np.array([w.beta for w in wcs]),
                np.array([w.theta for w in wcs]))


@dataclass(frozen=True)
class CascadeModel:
    window_edge: int
    stages: tuple[CascadeStage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.window_edge < 1:
            raise ValueError("window_edge must be positive")
        if not self.stages:
            raise ValueError("a cascade needs at least one stage")
        for s in self.stages:
            for wc in s.weak_classifiers:
                if wc.hyperplane.size != self.dim:
                    raise DimensionError(
                        f"hyperplane length {wc.hyperplane.size} != window length {self.dim}")

    @property
    def dim(self) -> int:
        return self.window_edge ** 2

    @property
    def n_weak(self) -> int:
        return sum(len(s) for s in self.stages)


@dataclass(frozen=True)
class DetectionOutcome:
    accepted: bool
    rejected_at_stage: int | None
    stage_scores: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "stage_scores", tuple(float(s) for s in self.stage_scores))
        if self.accepted != (self.rejected_at_stage is None):
            raise ValueError("accepted must hold exactly when no stage rejected")


@dataclass(frozen=True, eq=False)
class EncryptedWeak:
    enc_hyperplane: EncDataVector
    alpha: float
    beta: float
    theta: float

    def __eq__(self, other):
        if not isinstance(other, EncryptedWeak):
            return NotImplemented
        return (self.enc_hyperplane == other.enc_hyperplane
                and (self.alpha, self.beta, self.theta) == (other.alpha, other.beta, other.theta))


@dataclass(frozen=True)
class EncryptedDetector:
    """The cloud's copy of the detector: encrypted hyperplanes, plaintext votes and thresholds."""

    window_edge: int
    stages: tuple[tuple[EncryptedWeak, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        if not self.stages or any(not s for s in self.stages):
            raise ValueError("encrypted detector needs non-empty stages")
        for s in self.stages:
            for ew in s:
                if ew.enc_hyperplane.dim != self.dim:
                    raise DimensionError("ciphertext dim does not match window length")

    @property
    def dim(self) -> int:
        return self.window_edge ** 2

    @property
    def n_weak(self) -> int:
        return sum(len(s) for s in self.stages)

    @cached_property
    def arrays(self):
        out = []
        for s in self.stages:
            out.append((np.stack([w.enc_hyperplane.part1 for w in s]),
                        np.stack([w.enc_hyperplane.part2 for w in s]),
                        np.array([w.alpha for w in s]),
                        np.array([w.beta for w in s]),
                        np.array([w.theta for w in s])))
        return out


def _votes(t, alpha, beta, theta, inclusive: bool):
    fires = t >= theta if inclusive else t > theta
    return np.where(fires, alpha, beta)


def _check_window(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise DimensionError(f"window length {x.shape} != {dim}")
    return x


# --- plaintext path -----------------------------------------------------------

def eval_weak_plain(wc: WeakClassifier, x, inclusive: bool = True) -> float:
    x = _check_window(x, wc.hyperplane.size)
    t = float(x @ wc.hyperplane)
    fires = t >= wc.theta if inclusive else t > wc.theta
    return wc.alpha if fires else wc.beta


def eval_stage_plain(stage: CascadeStage, x, inclusive: bool = True) -> tuple[bool, float]:
    h, alpha, beta, theta = stage.arrays
    x = _check_window(x, h.shape[1])
    score = float(_votes(h @ x, alpha, beta, theta, inclusive).sum())
    return score >= 0.0, score


def eval_cascade_plain(model: CascadeModel, x, inclusive: bool = True) -> DetectionOutcome:
    x = _check_window(x, model.dim)
    scores = []
    for k, stage in enumerate(model.stages):
        ok, score = eval_stage_plain(stage, x, inclusive)
        scores.append(score)
        if not ok:
            return DetectionOutcome(False, k, tuple(scores))
    return DetectionOutcome(True, None, tuple(scores))


# --- encryption and secure path ------------------------------------------------

def encrypt_detector(key: AspeKey, model: CascadeModel, rng=None) -> EncryptedDetector:
    key.require("detector")
    if key.dim != model.dim:
        raise DimensionError(f"key dim {key.dim} != window length {model.dim}")
    rng = _rng(rng)
    stages = []
    for stage in model.stages:
        h, alpha, beta, theta = stage.arrays
        encs = encrypt_data_many(key, h, rng)
        stages.append(tuple(EncryptedWeak(e, a, b, t)
                            for e, a, b, t in zip(encs, alpha.tolist(), beta.tolist(), theta.tolist())))
    return EncryptedDetector(model.window_edge, tuple(stages))


def eval_cascade_secure(enc: EncryptedDetector, ew: EncQueryVector, trace: list | None = None,
                        inclusive: bool = True) -> DetectionOutcome:
    """Cloud-side evaluation of one encrypted window.

    If ``trace`` is given, one record per evaluated stage is appended holding
    exactly what the server observes: the recovered responses ``t``, the
    chosen votes ``h``, the stage score and the stage decision.
    """
    if not isinstance(ew, EncQueryVector):
        raise TypeError("detection windows must be EncQueryVector")
    if ew.dim != enc.dim:
        raise DimensionError(f"window ciphertext dim {ew.dim} != detector dim {enc.dim}")
    scores = []
    for k, (p1, p2, alpha, beta, theta) in enumerate(enc.arrays):
        t = p1 @ ew.part1 + p2 @ ew.part2
        h = _votes(t, alpha, beta, theta, inclusive)
        score = float(h.sum())
        scores.append(score)
        ok = score >= 0.0
        if trace is not None:
            trace.append({"stage": k, "t": tuple(t.tolist()), "h": tuple(h.tolist()),
                          "score": score, "accepted": ok})
        if not ok:
            return DetectionOutcome(False, k, tuple(scores))
    return DetectionOutcome(True, None, tuple(scores))


def eval_cascade_secure_many(enc: EncryptedDetector, windows: Sequence[EncQueryVector],
                             inclusive: bool = True) -> list[DetectionOutcome]:
    """Batch form of :func:`eval_cascade_secure`; stages only see still-active windows."""
    n = len(windows)
    if n == 0:
        return []
    for ew in windows:
        if not isinstance(ew, EncQueryVector):
            raise TypeError("detection windows must be EncQueryVector")
        if ew.dim != enc.dim:
            raise DimensionError(f"window ciphertext dim {ew.dim} != detector dim {enc.dim}")
    q1 = np.stack([w.part1 for w in windows])
    q2 = np.stack([w.part2 for w in windows])
    scores: list[list[float]] = [[] for _ in range(n)]
    rejected: list[int | None] = [None] * n
    active = np.arange(n)
    for k, (p1, p2, alpha, beta, theta) in enumerate(enc.arrays):
        if active.size == 0:
            break
        t = q1[active] @ p1.T + q2[active] @ p2.T
        stage_score = _votes(t, alpha, beta, theta, inclusive).sum(axis=1)
        for i, s in zip(active.tolist(), stage_score.tolist()):
            scores[i].append(s)
            if s < 0.0:
                rejected[i] = k
        active = active[stage_score >= 0.0]
    return [DetectionOutcome(r is None, r, tuple(s)) for r, s in zip(rejected, scores)]


def secure_responses(enc: EncryptedDetector, ew: EncQueryVector) -> list[float]:
    """Every recovered response t_i with no short-circuit (diagnostics and tests)."""
    return [secure_inner(w.enc_hyperplane, ew) for s in enc.stages for w in s]


# --- synthetic models ---------------------------------------------------------

def random_normalized_windows(n: int, dim: int, rng=None) -> np.ndarray:
    raw = _rng(rng).standard_normal((n, dim))
    raw -= raw.mean(axis=1, keepdims=True)
    return raw / raw.std(axis=1, keepdims=True)


def synth_cascade(stage_sizes: Sequence[int], window_edge: int = 24, rng=None) -> CascadeModel:
    """Random cascade with unit hyperplanes and thresholds at the median probe response."""
    stage_sizes = list(stage_sizes)
    if not stage_sizes:
        raise ValueError("stage_sizes must be non-empty")
    if any(int(n) < 1 for n in stage_sizes):
        raise ValueError("stage sizes must be positive")
    rng = _rng(rng)
    dim = window_edge ** 2
    probes = random_normalized_windows(PROBE_WINDOWS, dim, rng)
    stages = []
    for n in stage_sizes:
        h = rng.standard_normal((int(n), dim))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        theta = np.median(probes @ h.T, axis=0)
        alpha = rng.uniform(0.2, 1.0, size=int(n))
        beta = -rng.uniform(0.2, 1.0, size=int(n))
        stages.append(CascadeStage(tuple(WeakClassifier(*row) for row in zip(h, alpha, beta, theta))))
    return CascadeModel(window_edge, tuple(stages))


def parse_stage_sizes(text: str) -> list[int]:
    """Parse a comma-separated stage shape such as ``"3,16,21"``; ``"frontal"`` gives the 22-stage shape."""
    if text.strip().lower() == "frontal":
        return list(FRONTAL_STAGE_SIZES)
    try:
        sizes = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ValueError(f"bad stage shape {text!r}") from None
    if not sizes or any(n < 1 for n in sizes):
        raise ValueError(f"bad stage shape {text!r}")
    return sizes


# --- model files --------------------------------------------------------------

def _write_header(w: Writer, magic: bytes, edge: int, n_stages: int) -> None:
    if edge > 0xFFFF or n_stages > 0xFFFF:
        raise ValueError("window edge / stage count exceed u16")
    w.raw(magic).u16(MODEL_VERSION).u16(edge).u16(n_stages)


def _read_header(r: Reader, magic: bytes) -> tuple[int, int]:
    r.magic(magic)
    pos = r.pos
    version = r.u16()
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model version {version}", pos)
    edge, n_stages = r.u16(), r.u16()
    if edge < 1 or n_stages < 1:
        raise FormatError("window edge and stage count must be positive", pos + 2)
    return edge, n_stages


def model_to_bytes(model: CascadeModel) -> bytes:
    w = Writer()
    _write_header(w, MODEL_MAGIC, model.window_edge, len(model.stages))
    for stage in model.stages:
        w.u32(len(stage))
        for wc in stage.weak_classifiers:
            w.f64_array(wc.hyperplane).f64(wc.alpha).f64(wc.beta).f64(wc.theta)
    return w.getvalue()


def _build(fn, pos):
    try:
        return fn()
    except (ValueError, DimensionError) as exc:
        raise FormatError(str(exc), pos) from None


def model_from_bytes(data: bytes) -> CascadeModel:
    r = Reader(data)
    edge, n_stages = _read_header(r, MODEL_MAGIC)
    dim = edge * edge
    stages = []
    for _ in range(n_stages):
        pos = r.pos
        count = r.u32()
        if count == 0:
            raise FormatError("empty stage", pos)
        if count * 8 * (dim + 3) > r.remaining():
            raise TruncatedError(f"truncated stage of {count} classifiers", r.pos)
        wcs = []
        for _ in range(count):
            pos = r.pos
            h = r.f64_array(dim)
            a, b, t = r.f64(), r.f64(), r.f64()
            wcs.append(_build(lambda: WeakClassifier(h, a, b, t), pos))
        stages.append(CascadeStage(tuple(wcs)))
    r.expect_end()
    return CascadeModel(edge, tuple(stages))


def write_encrypted_detector(w: Writer, enc: EncryptedDetector) -> None:
    _write_header(w, ENC_MODEL_MAGIC, enc.window_edge, len(enc.stages))
    for stage in enc.stages:
        w.u32(len(stage))
        for ew in stage:
            ew.enc_hyperplane.write(w)
            w.f64(ew.alpha).f64(ew.beta).f64(ew.theta)


def read_encrypted_detector(r: Reader) -> EncryptedDetector:
    edge, n_stages = _read_header(r, ENC_MODEL_MAGIC)
    dim = edge * edge
    stages = []
    for _ in range(n_stages):
        pos = r.pos
        count = r.u32()
        if count == 0:
            raise FormatError("empty stage", pos)
        if count * (5 + 16 * dim + 24) > r.remaining():
            raise TruncatedError(f"truncated stage of {count} classifiers", r.pos)
        weak = []
        for _ in range(count):
            ct = read_ciphertext(r, dim)
            if not isinstance(ct, EncDataVector):
                raise FormatError("detector hyperplanes must be data-side ciphertexts", r.pos)
            weak.append(EncryptedWeak(ct, r.f64(), r.f64(), r.f64()))
        stages.append(tuple(weak))
    return EncryptedDetector(edge, tuple(stages))


def encrypted_detector_to_bytes(enc: EncryptedDetector) -> bytes:
    w = Writer()
    write_encrypted_detector(w, enc)
    return w.getvalue()


def encrypted_detector_from_bytes(data: bytes) -> EncryptedDetector:
    r = Reader(data)
    enc = read_encrypted_detector(r)
    r.expect_end()
    return enc


def save_model(model: CascadeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> CascadeModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def save_encrypted_detector(enc: EncryptedDetector, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encrypted_detector_to_bytes(enc))


def load_encrypted_detector(path) -> EncryptedDetector:
    with open(path, "rb") as fh:
        return encrypted_detector_from_bytes(fh.read())
