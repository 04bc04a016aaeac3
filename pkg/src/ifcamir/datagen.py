"""Non-IID client populations, group test sets and the server's shadow pool.

Datasets are held column-wise (``Dataset``) because every consumer works on
whole feature matrices; ``DataPoint`` is the per-row view.

Group codes double as the sensitive attribute: ``MAJORITY`` (1) is the
privileged group, ``MINORITY`` (0) the unprivileged one.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

from .errors import FormatError, InputError
from .fedcore import ClientProfile

MAJORITY = 1
MINORITY = 0
UNGROUPED = -1
GROUP_NAMES = {MAJORITY: "majority", MINORITY: "minority", UNGROUPED: "none"}

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

Deformation = Literal["rotation", "brightness", "synthetic-mean-shift"]

# stream tags keep per-purpose RNG universes apart
_PARTITION, _CLIENT, _TEST, _PROFILE, _SYNTH = 11, 12, 13, 14, 15


@dataclass(frozen=True)
class DataPoint:
    features: np.ndarray
    label: int
    group: int
    index: int


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    index: np.ndarray

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.groups) == len(self.index) == n):
            raise InputError("dataset columns have different lengths")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[DataPoint]:
        for i in range(len(self)):
            yield DataPoint(self.features[i], int(self.labels[i]), int(self.groups[i]), int(self.index[i]))

    def take(self, rows: np.ndarray | slice) -> Dataset:
        return Dataset(self.features[rows], self.labels[rows], self.groups[rows], self.index[rows])

    @staticmethod
    def concat(parts: Sequence[Dataset]) -> Dataset:
        if not parts:
            raise InputError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.groups for p in parts]),
            np.concatenate([p.index for p in parts]),
        )


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    data: Dataset
    group: int
    deformation_param: float

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class ShadowPool:
    data: Dataset
    seed: int

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class PopulationSpec:
    num_clients: int
    num_clusters: int
    minority_fraction: float
    samples_per_client: int
    deformation: Deformation
    majority_range: tuple[float, float]
    minority_range: tuple[float, float]
    shadow_pool_size: int
    seed: int
    test_size_per_group: int = 500
    # synthetic-mean-shift only
    synthetic_dim: int = 20
    synthetic_classes: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "majority_range", tuple(float(v) for v in self.majority_range))
        object.__setattr__(self, "minority_range", tuple(float(v) for v in self.minority_range))
        if self.num_clients < 1 or self.num_clusters < 1 or self.samples_per_client < 1:
            raise InputError("num_clients, num_clusters and samples_per_client must be >= 1")
        if self.num_clusters > self.num_clients:
            raise InputError("num_clusters cannot exceed num_clients")
        if not 0.0 < self.minority_fraction < 1.0:
            raise InputError("minority_fraction must lie in (0, 1)")
        if self.shadow_pool_size < 2 or self.test_size_per_group < 1:
            raise InputError("shadow_pool_size must be >= 2 and test_size_per_group >= 1")
        if self.deformation not in ("rotation", "brightness", "synthetic-mean-shift"):
            raise InputError(f"unknown deformation {self.deformation!r}")
        for name in ("majority_range", "minority_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InputError(f"{name} must satisfy low <= high")
            if self.deformation == "brightness" and lo <= 0:
                raise InputError("brightness factors must be positive")

    @property
    def num_minority(self) -> int:
        return math.floor(self.minority_fraction * self.num_clients)

    def group_range(self, group: int) -> tuple[float, float]:
        return self.minority_range if group == MINORITY else self.majority_range

    def required_source_size(self) -> int:
        return (
            self.num_clients * self.samples_per_client
            + self.shadow_pool_size
            + 2 * self.test_size_per_group
        )


@dataclass(frozen=True)
class Population:
    spec: PopulationSpec
    clients: list[ClientDataset]
    test_sets: dict[int, Dataset]
    shadow_pool: ShadowPool
    input_dim: int
    num_classes: int
    unused: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def groups(self) -> list[int]:
        return [c.group for c in self.clients]


# -- IDX ingestion -----------------------------------------------------------


def _open(path: Path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, magic: int, header_ints: int) -> tuple[tuple[int, ...], bytes]:
    try:
        with _open(path) as f:
            blob = f.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    head = 4 * (1 + header_ints)
    if len(blob) < head:
        raise FormatError(f"{path}: truncated header")
    found, *dims = struct.unpack(f">I{header_ints}I", blob[:head])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    body = blob[head:]
    if len(body) != math.prod(dims):
        raise FormatError(f"{path}: expected {math.prod(dims)} payload bytes, found {len(body)}")
    return tuple(dims), body


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    (n, rows, cols), pixels = _read_idx(Path(images_path), IMAGE_MAGIC, 3)
    (m,), labels = _read_idx(Path(labels_path), LABEL_MAGIC, 1)
    if n != m:
        raise InputError(f"{n} images but {m} labels")
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols) / 255.0
    return Dataset(
        features,
        np.frombuffer(labels, dtype=np.uint8).astype(np.int64),
        np.full(n, UNGROUPED, dtype=np.int64),
        np.arange(n, dtype=np.int64),
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Path, labels_path: Path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels as an uncompressed IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


# -- deformations ------------------------------------------------------------


def _side(length: int) -> int:
    side = math.isqrt(length)
    if side * side != length:
        raise InputError(f"vector of length {length} is not a square image")
    return side


def _rotation_map(side: int, angle_degrees: float) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel (flat index) for each output pixel, and an in-frame mask."""
    theta = math.radians(angle_degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    centre = (side - 1) / 2.0
    r, c = np.mgrid[0:side, 0:side]
    dy, dx = r - centre, c - centre
    # inverse map: each output pixel reads the source pixel at -theta, so positive
    # angles turn the picture counter-clockwise as displayed (row 0 on top)
    src_r = np.rint(centre + cos * dy + sin * dx).astype(np.int64)
    src_c = np.rint(centre - sin * dy + cos * dx).astype(np.int64)
    inside = (src_r >= 0) & (src_r < side) & (src_c >= 0) & (src_c < side)
    flat = np.where(inside, src_r * side + src_c, 0)
    return flat.ravel(), inside.ravel()


def rotate_images(images: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Nearest-neighbour rotation of every row of ``images`` by the same angle."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    flat, inside = _rotation_map(_side(images.shape[1]), angle_degrees)
    return np.where(inside, images[:, flat], 0.0)


def rotate_image(image: np.ndarray, angle_degrees: float) -> np.ndarray:
    return rotate_images(np.asarray(image).reshape(1, -1), angle_degrees)[0]


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    if not factor > 0:
        raise InputError("brightness factor must be positive")
    return np.minimum(1.0, np.asarray(image, dtype=np.float64) * factor)


# -- synthetic source --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticWorld:
    """Gaussian features with a shared shift direction and one linear teacher per group.

    The shadow pool is labelled by the base teacher; group teachers are
    perturbations of it, so every group's task is learnable but distinct.
    """

    direction: np.ndarray
    teachers: dict[int, np.ndarray]

    @classmethod
    def create(cls, dim: int, classes: int, seed: int) -> SyntheticWorld:
        rng = np.random.default_rng([seed, _SYNTH])
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        base = rng.normal(size=(classes, dim))
        teachers = {
            UNGROUPED: base,
            MAJORITY: base + 0.6 * rng.normal(size=(classes, dim)),
            MINORITY: base + 0.6 * rng.normal(size=(classes, dim)),
        }
        return cls(direction, teachers)

    def sample(self, rng: np.random.Generator, count: int, group: int, shift: float | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = rng.normal(size=(count, self.direction.size))
        x += np.reshape(shift, (-1, 1)) * self.direction
        return x, (x @ self.teachers[group].T).argmax(axis=1)


def _deform(images: np.ndarray, kind: Deformation, param: float) -> np.ndarray:
    if kind == "rotation":
        return rotate_images(images, param)
    if kind == "brightness":
        return adjust_brightness(images, param)
    raise InputError(f"{kind} is not an image deformation")


# -- population --------------------------------------------------------------


def client_stream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *keys])


def synthesize_population(spec: PopulationSpec, source: Dataset | None = None) -> Population:
    """Partition ``source`` (or synthetic draws when ``source`` is None) into clients,
    one test set per group and a shadow pool.

    Client ids ``0 .. num_minority-1`` form the minority group.
    """
    synthetic = spec.deformation == "synthetic-mean-shift"
    if synthetic != (source is None):
        raise InputError("synthetic-mean-shift needs source=None; image deformations need a source")
    if synthetic:
        return _synthetic_population(spec)

    needed = spec.required_source_size()
    if len(source) < needed:
        raise InputError(f"source has {len(source)} samples, population needs {needed}")
    order = client_stream(spec.seed, _PARTITION).permutation(len(source))
    spc = spec.samples_per_client

    clients = []
    for cid in range(spec.num_clients):
        group = MINORITY if cid < spec.num_minority else MAJORITY
        lo, hi = spec.group_range(group)
        param = float(client_stream(spec.seed, _CLIENT, cid).uniform(lo, hi))
        rows = order[cid * spc : (cid + 1) * spc]
        data = source.take(rows)
        clients.append(
            ClientDataset(
                cid,
                Dataset(_deform(data.features, spec.deformation, param), data.labels,
                        np.full(spc, group, dtype=np.int64), data.index),
                group,
                param,
            )
        )

    cursor = spec.num_clients * spc
    pool_rows = order[cursor : cursor + spec.shadow_pool_size]
    cursor += spec.shadow_pool_size
    pool = ShadowPool(source.take(pool_rows), spec.seed)

    test_sets = {}
    for group in (MINORITY, MAJORITY):
        rows = order[cursor : cursor + spec.test_size_per_group]
        cursor += spec.test_size_per_group
        data = source.take(rows)
        lo, hi = spec.group_range(group)
        params = client_stream(spec.seed, _TEST, group).uniform(lo, hi, size=len(rows))
        feats = np.vstack([_deform(data.features[i : i + 1], spec.deformation, p) for i, p in enumerate(params)])
        test_sets[group] = Dataset(feats, data.labels, np.full(len(rows), group, dtype=np.int64), data.index)

    num_classes = int(source.labels.max()) + 1
    return Population(spec, clients, test_sets, pool, source.features.shape[1], num_classes, order[cursor:])


def _synthetic_population(spec: PopulationSpec) -> Population:
    world = SyntheticWorld.create(spec.synthetic_dim, spec.synthetic_classes, spec.seed)
    spc = spec.samples_per_client
    next_index = 0

    def indices(count: int) -> np.ndarray:
        nonlocal next_index
        out = np.arange(next_index, next_index + count, dtype=np.int64)
        next_index += count
        return out

    clients = []
    for cid in range(spec.num_clients):
        group = MINORITY if cid < spec.num_minority else MAJORITY
        rng = client_stream(spec.seed, _CLIENT, cid)
        lo, hi = spec.group_range(group)
        param = float(rng.uniform(lo, hi))
        x, y = world.sample(rng, spc, group, param)
        clients.append(ClientDataset(cid, Dataset(x, y, np.full(spc, group, dtype=np.int64), indices(spc)), group, param))

    x, y = world.sample(client_stream(spec.seed, _PARTITION), spec.shadow_pool_size, UNGROUPED, 0.0)
    pool = ShadowPool(Dataset(x, y, np.full(len(y), UNGROUPED, dtype=np.int64), indices(len(y))), spec.seed)

    test_sets = {}
    for group in (MINORITY, MAJORITY):
        rng = client_stream(spec.seed, _TEST, group)
        lo, hi = spec.group_range(group)
        shifts = rng.uniform(lo, hi, size=spec.test_size_per_group)
        x, y = world.sample(rng, spec.test_size_per_group, group, shifts)
        test_sets[group] = Dataset(x, y, np.full(len(y), group, dtype=np.int64), indices(len(y)))

    return Population(spec, clients, test_sets, pool, spec.synthetic_dim, spec.synthetic_classes)


# -- client profiles ---------------------------------------------------------


@dataclass(frozen=True)
class AlphaPolicy:
    """How clients pick their loss weight alpha (beta = 1 - alpha).

    ``threshold`` ties alpha to the client's MIA threshold: the lowest tolerated
    MIA accuracy in the range maps to ``low``, the highest to ``high``.
    """

    kind: Literal["fixed", "uniform", "threshold"]
    low: float
    high: float

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "threshold"):
            raise InputError(f"unknown alpha policy {self.kind!r}")
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise InputError("alpha bounds must satisfy 0 <= low <= high <= 1")
        if self.kind == "fixed" and self.low != self.high:
            raise InputError("fixed alpha policy needs low == high")

    @classmethod
    def fixed(cls, alpha: float) -> AlphaPolicy:
        return cls("fixed", alpha, alpha)

    @classmethod
    def uniform(cls, low: float, high: float) -> AlphaPolicy:
        return cls("uniform", low, high)

    @classmethod
    def threshold(cls, low: float = 0.0, high: float = 1.0) -> AlphaPolicy:
        return cls("threshold", low, high)

    @classmethod
    def parse(cls, text: str) -> AlphaPolicy:
        """``"fixed:0.5"``, ``"uniform:0:1"`` or ``"threshold:0:1"``."""
        kind, *values = text.split(":")
        try:
            nums = [float(v) for v in values]
        except ValueError:
            raise InputError(f"bad alpha policy {text!r}") from None
        if kind == "fixed" and len(nums) == 1:
            return cls.fixed(nums[0])
        if kind == "uniform" and len(nums) == 2:
            return cls.uniform(*nums)
        if kind == "threshold" and len(nums) == 2:
            return cls.threshold(*nums)
        raise InputError(f"bad alpha policy {text!r}")

    def __str__(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.low:g}"
        return f"{self.kind}:{self.low:g}:{self.high:g}"


def assign_client_profiles(
    n: int,
    alpha_policy: AlphaPolicy,
    threshold_range: tuple[float, float],
    seed: int,
    groups: Sequence[int] | None = None,
) -> list[ClientProfile]:
    lo, hi = threshold_range
    if not 0.5 <= lo <= hi <= 1.0:
        raise InputError(f"threshold range {threshold_range} must lie within [0.5, 1.0]")
    if groups is not None and len(groups) != n:
        raise InputError("groups must have one entry per client")
    profiles = []
    for cid in range(n):
        rng = client_stream(seed, _PROFILE, cid)
        tau = float(rng.uniform(lo, hi))
        if alpha_policy.kind == "fixed":
            alpha = alpha_policy.low
        elif alpha_policy.kind == "uniform":
            alpha = float(rng.uniform(alpha_policy.low, alpha_policy.high))
        else:
            share = (tau - lo) / (hi - lo) if hi > lo else 1.0
            alpha = alpha_policy.low + share * (alpha_policy.high - alpha_policy.low)
        group = UNGROUPED if groups is None else int(groups[cid])
        profiles.append(ClientProfile(cid, alpha, 1.0 - alpha, tau, group))
    return profiles
