"""Synthetic multi-task identity-retrieval suites with controllable relatedness.

Every task renders identities as smooth grayscale textures: an identity is a
latent code, an image is that code (plus per-sample jitter) projected through
the task's bank of template fields, plus pixel noise, squashed to uint8.

Besides content, each task has a rendering *style*: a maximum circular shift,
a polarity-inversion rate and a noise gain, applied per sample. Style changes
what a network must do (translation tolerance, sign invariance), so it is what
makes tasks prefer different architectures.

Relatedness comes from mixing independent random *sources*: source ``s``
draws template fields, identity codes, jitter, noise, style and per-sample
nuisance variables, and task ``t`` uses ``sum_s R[t, s] * source_s`` with ``R``
the symmetric square root of the relatedness matrix. Two tasks therefore share
a ``rho_ij`` correlation in all generative factors (style normals included);
``rho = I`` gives independent tasks and identical rows give identical data.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"UFODATA"
VERSION = 1
SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class TaskSuiteSpec:
    names: tuple[str, ...]
    identities: tuple[int, ...]
    samples_per_identity: tuple[int, ...]
    relatedness: tuple[tuple[float, ...], ...]
    image_size: int = 16
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2)
    latent_dim: int = 8
    jitter: float = 0.5
    pixel_noise: float = 0.3
    max_shift: int = 2
    max_flip: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "identities", tuple(int(i) for i in self.identities))
        object.__setattr__(self, "samples_per_identity", tuple(int(i) for i in self.samples_per_identity))
        object.__setattr__(self, "relatedness", tuple(tuple(float(v) for v in row) for row in self.relatedness))
        object.__setattr__(self, "splits", tuple(float(s) for s in self.splits))
        self.validate()

    @property
    def num_tasks(self) -> int:
        return len(self.names)

    def validate(self) -> None:
        t = self.num_tasks
        if t < 1:
            raise ValueError("need at least one task")
        if len(self.identities) != t or len(self.samples_per_identity) != t:
            raise ValueError("identities / samples_per_identity need one entry per task")
        if min(self.identities) < 2:
            raise ValueError("every task needs at least 2 identities")
        if min(self.samples_per_identity) < 3:
            raise ValueError("every identity needs at least 3 samples (train, query, gallery)")
        rho = np.asarray(self.relatedness, dtype=np.float64)
        if rho.shape != (t, t):
            raise ValueError(f"relatedness must be {t}x{t}")
        if not np.allclose(rho, rho.T) or not np.allclose(np.diag(rho), 1.0):
            raise ValueError("relatedness must be symmetric with unit diagonal")
        if rho.min() < 0 or rho.max() > 1:
            raise ValueError("relatedness entries must lie in [0, 1]")
        if len(self.splits) != 3 or min(self.splits) <= 0 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("splits must be three positive fractions summing to 1")
        if self.max_shift < 0 or not 0.0 <= self.max_flip <= 1.0:
            raise ValueError("max_shift must be >= 0 and max_flip in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "identities": list(self.identities),
            "samples_per_identity": list(self.samples_per_identity),
            "relatedness": [list(r) for r in self.relatedness],
            "image_size": self.image_size,
            "splits": list(self.splits),
            "latent_dim": self.latent_dim,
            "jitter": self.jitter,
            "pixel_noise": self.pixel_noise,
            "max_shift": self.max_shift,
            "max_flip": self.max_flip,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TaskSuiteSpec:
        return cls(**d)


@dataclass
class TaskData:
    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    gallery_images: np.ndarray
    gallery_labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train_labels)

    @property
    def num_classes(self) -> int:
        return int(self.train_labels.max()) + 1

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"{name}_images"), getattr(self, f"{name}_labels")


@dataclass
class TaskDatasets:
    tasks: list[TaskData]
    seed: int = 0
    spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def sizes(self) -> list[int]:
        return [t.size for t in self.tasks]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaskDatasets) or len(self) != len(other) or self.seed != other.seed:
            return False
        for a, b in zip(self.tasks, other.tasks):
            if a.name != b.name:
                return False
            for s in SPLITS:
                for x, y in zip(a.split(s), b.split(s)):
                    if x.shape != y.shape or not np.array_equal(x, y):
                        return False
        return True


_erf = np.vectorize(math.erf, otypes=[np.float64])


def ndtr(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF."""
    return 0.5 * (1.0 + _erf(np.asarray(x, dtype=np.float64) / math.sqrt(2.0)))


def mixing_matrix(rho: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of the relatedness matrix (negative modes clipped)."""
    w, v = np.linalg.eigh(np.asarray(rho, dtype=np.float64))
    r = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    # renormalize rows so each task keeps unit variance after clipping
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    # snap round-off so identical rows stay bit-identical
    return np.round(r, 12)


def _templates(rng: np.random.Generator, k: int, size: int, max_freq: int = 3) -> np.ndarray:
    """``k`` smooth random fields of shape (size, size), unit RMS."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((k, size, size))
    for i in range(k):
        field_ = np.zeros((size, size))
        for fy in range(max_freq + 1):
            for fx in range(max_freq + 1):
                amp = rng.normal(size=2) / (1.0 + fy + fx)
                phase = 2 * np.pi * (fy * yy + fx * xx) / size
                field_ += amp[0] * np.cos(phase) + amp[1] * np.sin(phase)
        out[i] = field_ / np.sqrt(np.mean(field_**2))
    return out


def _split_counts(n: int, splits: Sequence[float]) -> tuple[int, int, int]:
    n_q = max(1, int(round(n * splits[1])))
    n_g = max(1, int(round(n * splits[2])))
    n_tr = n - n_q - n_g
    if n_tr < 1:
        n_tr, n_q = 1, n - 1 - n_g
    return n_tr, n_q, n_g


@dataclass(frozen=True)
class TaskStyle:
    shift: int
    flip_rate: float
    noise_gain: float


def task_styles(spec: TaskSuiteSpec) -> list[TaskStyle]:
    """Per-task rendering style; the underlying normals correlate by ``rho`` across tasks."""
    mix = mixing_matrix(np.asarray(spec.relatedness))
    z = np.stack([np.random.default_rng([spec.seed, s, 1]).normal(size=3) for s in range(spec.num_tasks)])
    u = ndtr(mix @ z)
    return [
        TaskStyle(min(spec.max_shift, int(row[0] * (spec.max_shift + 1))), float(spec.max_flip * row[1]), float(0.5 + row[2]))
        for row in u
    ]


def generate(spec: TaskSuiteSpec) -> TaskDatasets:
    """Render every task of ``spec``; a pure function of the spec."""
    t_count = spec.num_tasks
    size = spec.image_size
    k = spec.latent_dim
    max_ids = max(spec.identities)
    max_spi = max(spec.samples_per_identity)
    mix = mixing_matrix(np.asarray(spec.relatedness))
    styles = task_styles(spec)

    sources = []
    for s in range(t_count):
        rng = np.random.default_rng([spec.seed, s])
        sources.append({
            "templates": _templates(rng, k, size),
            "codes": rng.normal(size=(max_ids, k)),
            "jitter": rng.normal(size=(max_ids, max_spi, k)),
            "noise": rng.normal(size=(max_ids, max_spi, size, size)),
            "nuisance": rng.normal(size=(max_ids, max_spi, 3)),
        })

    def mixed(key: str, t: int) -> np.ndarray:
        acc = np.zeros_like(sources[0][key])
        for s in range(t_count):
            if mix[t, s] != 0.0:
                acc = acc + mix[t, s] * sources[s][key]
        return acc

    tasks = []
    for t in range(t_count):
        n_ids, spi = spec.identities[t], spec.samples_per_identity[t]
        templates = mixed("templates", t)
        codes = mixed("codes", t)[:n_ids]
        jitter = mixed("jitter", t)[:n_ids, :spi]
        noise = mixed("noise", t)[:n_ids, :spi]
        latent = codes[:, None, :] + spec.jitter * jitter
        field_ = np.einsum("isk,kyx->isyx", latent, templates) / np.sqrt(k)
        shift, flip_rate, gain = styles[t].shift, styles[t].flip_rate, styles[t].noise_gain
        field_ = field_ + spec.pixel_noise * gain * noise
        v = ndtr(mixed("nuisance", t)[:n_ids, :spi])
        field_ = np.where((v[..., 2] < flip_rate)[..., None, None], -field_, field_)
        if shift:
            offsets = np.clip(np.floor(v[..., :2] * (2 * shift + 1)), 0, 2 * shift).astype(int) - shift
            for i in range(n_ids):
                for j in range(spi):
                    field_[i, j] = np.roll(field_[i, j], tuple(offsets[i, j]), axis=(0, 1))
        images = np.clip(np.round(255.0 / (1.0 + np.exp(-1.5 * field_))), 0, 255).astype(np.uint8)

        n_tr, n_q, _ = _split_counts(spi, spec.splits)
        labels = np.repeat(np.arange(n_ids), spi).reshape(n_ids, spi)

        def take(lo, hi):
            imgs = images[:, lo:hi].reshape(-1, 1, size, size)
            return imgs, labels[:, lo:hi].reshape(-1).astype(np.int64)

        tr, q, g = take(0, n_tr), take(n_tr, n_tr + n_q), take(n_tr + n_q, spi)
        tasks.append(TaskData(spec.names[t], tr[0], tr[1], q[0], q[1], g[0], g[1]))
    return TaskDatasets(tasks, spec.seed, spec.to_dict())


# ---------------------------------------------------------------------------
# container format


class DataFormatError(ValueError):
    pass


def _segments(data: TaskDatasets):
    for t in data.tasks:
        for s in SPLITS:
            imgs, labels = t.split(s)
            yield np.ascontiguousarray(imgs, dtype=np.uint8), np.ascontiguousarray(labels, dtype="<i4")


def save(data: TaskDatasets, path: str | Path) -> None:
    """Write the container: magic, JSON header line, then per task and split
    the uint8 image block followed by int32 little-endian labels."""
    segs = list(_segments(data))
    header = {
        "version": VERSION,
        "seed": data.seed,
        "tasks": [t.name for t in data.tasks],
        "splits": list(SPLITS),
        "shapes": [[list(img.shape), list(lab.shape)] for img, lab in segs],
        "payload_bytes": int(sum(img.nbytes + lab.nbytes for img, lab in segs)),
        "spec": data.spec,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n")
        for img, lab in segs:
            fh.write(img.tobytes())
            fh.write(lab.tobytes())


def load(path: str | Path) -> TaskDatasets:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: bad magic (not a UFODATA container)")
    nl = buf.find(b"\n")
    try:
        header = json.loads(buf[len(MAGIC):nl])
        version = header["version"]
        shapes = header["shapes"]
        names = header["tasks"]
        expected = int(header["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: corrupted header") from exc
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    payload = memoryview(buf)[nl + 1:]
    if len(payload) != expected:
        raise DataFormatError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    if len(shapes) != len(names) * len(SPLITS):
        raise DataFormatError(f"{path}: header lists {len(shapes)} segments for {len(names)} tasks")
    off = 0
    arrays = []
    for img_shape, lab_shape in shapes:
        n_img = int(np.prod(img_shape))
        img = np.frombuffer(payload, dtype=np.uint8, count=n_img, offset=off).reshape(img_shape).copy()
        off += n_img
        n_lab = int(np.prod(lab_shape))
        lab = np.frombuffer(payload, dtype="<i4", count=n_lab, offset=off).reshape(lab_shape).astype(np.int64)
        off += 4 * n_lab
        arrays.append((img, lab))
    tasks = []
    for i, name in enumerate(names):
        (tr, trl), (q, ql), (g, gl) = arrays[3 * i: 3 * i + 3]
        tasks.append(TaskData(name, tr, trl, q, ql, g, gl))
    return TaskDatasets(tasks, int(header["seed"]), header.get("spec", {}))


def checksums(data: TaskDatasets) -> dict[str, str]:
    """sha256 per task and split over image bytes followed by int32 labels."""
    out = {}
    for t in data.tasks:
        for s in SPLITS:
            imgs, labels = t.split(s)
            h = hashlib.sha256(np.ascontiguousarray(imgs, dtype=np.uint8).tobytes())
            h.update(np.ascontiguousarray(labels, dtype="<i4").tobytes())
            out[f"{t.name}/{s}"] = h.hexdigest()
    return out
