"""Synthetic multi-domain data, IDX ingestion and episodic sampling.

Synthetic domains are equal-weight Gaussian mixtures with a shared
isotropic covariance. Class means live in a subspace of the feature
coordinates and each domain is offset along its own reserved axis by a
controllable shift, so the divergence between two domains has a closed
form (see flatness.tv_divergence) and grows monotonically with the shift.
Two layouts are supported: ``shared`` (all domains reuse one class-mean
arrangement, keeping the closed form valid) and ``independent`` (each
domain draws its own arrangement; divergence only via Monte Carlo).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from .model import Batch

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Ground-truth generator of a synthetic domain: equal-weight isotropic
    Gaussians at ``means`` [C, d] with standard deviation ``sigma``."""

    means: np.ndarray
    sigma: float

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2:
            raise ConfigError("means must be a [C, d] matrix")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        object.__setattr__(self, "means", means)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureSpec":
        return cls(means=np.asarray(d["means"], dtype=np.float64), sigma=float(d["sigma"]))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log mixture density at rows of x [n, d]."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.means.shape[1]
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        log_comp = -0.5 * sq / self.sigma**2 - 0.5 * d * np.log(2 * np.pi * self.sigma**2)
        m = log_comp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(log_comp - m).sum(axis=1, keepdims=True))).ravel() - np.log(
            self.means.shape[0]
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.integers(0, self.means.shape[0], size=n)
        return self.means[comp] + self.sigma * rng.normal(size=(n, self.means.shape[1]))


@dataclass(frozen=True)
class Domain:
    """A labelled sample collection with identity and class bookkeeping."""

    name: str
    samples: np.ndarray
    labels: np.ndarray
    class_ids: tuple[int, ...] = ()
    generator_spec: GaussianMixtureSpec | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise DataError(f"samples must be a non-empty [N, d] matrix, got {samples.shape}")
        if labels.shape != (samples.shape[0],):
            raise DataError("labels must align with samples")
        ids = tuple(int(c) for c in (self.class_ids or np.unique(labels)))
        if sorted(set(ids)) != list(ids):
            raise DataError("class_ids must be sorted and unique")
        if not set(np.unique(labels)).issubset(ids):
            raise DataError("every label must belong to class_ids")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_ids", ids)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def local_labels(self) -> np.ndarray:
        """Labels remapped to 0..C-1 following sorted class_ids order."""
        return np.searchsorted(np.asarray(self.class_ids), self.labels)

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


def check_disjoint_classes(domains) -> None:
    """Raise unless class IDs are globally disjoint across the domains."""
    seen: dict[int, str] = {}
    for dom in domains:
        for c in dom.class_ids:
            if c in seen:
                raise DataError(
                    f"class id {c} appears in both {seen[c]!r} and {dom.name!r}"
                )
            seen[c] = dom.name


def pool_domains(domains, name: str = "pooled") -> Domain:
    """Concatenate domains with disjoint classes into one."""
    domains = list(domains)
    check_disjoint_classes(domains)
    if len({d.dim for d in domains}) != 1:
        raise DataError("pooled domains must share the feature dimension")
    samples = np.concatenate([d.samples for d in domains])
    labels = np.concatenate([d.labels for d in domains])
    ids = tuple(sorted(c for d in domains for c in d.class_ids))
    return Domain(name=name, samples=samples, labels=labels, class_ids=ids)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a family of synthetic domains (JSON-serialisable)."""

    n_domains: int
    classes_per_domain: int
    samples_per_class: int
    dim: int
    delta: float = 0.0
    sigma: float = 0.5
    mean_scale: float = 2.0
    layout: str = "shared"

    def __post_init__(self):
        if self.n_domains < 1:
            raise ConfigError("n_domains must be >= 1")
        if self.classes_per_domain < 2:
            raise ConfigError("classes_per_domain must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.dim <= self.n_domains:
            raise ConfigError("dim must exceed n_domains (shift axes are reserved)")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.layout not in ("shared", "independent"):
            raise ConfigError(f"unknown layout {self.layout!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_domains": self.n_domains,
                "classes_per_domain": self.classes_per_domain,
                "samples_per_class": self.samples_per_class,
                "dim": self.dim,
                "delta": self.delta,
                "sigma": self.sigma,
                "mean_scale": self.mean_scale,
                "layout": self.layout,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        return cls(**json.loads(text))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_synthetic_domains(spec: SyntheticSpec, seed: int) -> list[Domain]:
    """Generate the synthetic domain family described by ``spec``.

    Class means occupy the first dim - n_domains coordinates; domain j is
    shifted by delta along reserved axis dim - n_domains + j. Class IDs
    are globally disjoint: domain j owns [j*C, (j+1)*C).
    """
    rng = np.random.default_rng(seed)
    sub = spec.dim - spec.n_domains
    c = spec.classes_per_domain
    shared_means = None
    if spec.layout == "shared":
        shared_means = spec.mean_scale * _unit_rows(rng, c, sub)
    domains = []
    for j in range(spec.n_domains):
        if spec.layout == "shared":
            base = shared_means
        else:
            base = spec.mean_scale * _unit_rows(rng, c, sub)
        means = np.zeros((c, spec.dim))
        means[:, :sub] = base
        means[:, sub + j] = spec.delta
        noise = rng.normal(size=(c * spec.samples_per_class, spec.dim))
        labels = np.repeat(np.arange(j * c, (j + 1) * c), spec.samples_per_class)
        samples = means[labels - j * c] + spec.sigma * noise
        domains.append(
            Domain(
                name=f"domain{j}",
                samples=samples,
                labels=labels,
                class_ids=tuple(range(j * c, (j + 1) * c)),
                generator_spec=GaussianMixtureSpec(means=means, sigma=spec.sigma),
            )
        )
    return domains


def with_label_noise(domain: Domain, frac: float, seed: int) -> Domain:
    """Flip a fraction of labels to a different class of the same domain."""
    if not 0.0 <= frac < 1.0:
        raise ConfigError("noise fraction must be in [0, 1)")
    if frac == 0.0:
        return domain
    if domain.n_classes < 2:
        raise DataError("label noise needs at least two classes")
    rng = np.random.default_rng(seed)
    n_flip = int(round(frac * domain.n))
    idx = rng.choice(domain.n, size=n_flip, replace=False)
    labels = domain.labels.copy()
    ids = np.asarray(domain.class_ids)
    for i in idx:
        others = ids[ids != labels[i]]
        labels[i] = rng.choice(others)
    return replace(domain, labels=labels)


# -- IDX file format ---------------------------------------------------------


def _read_header(data: bytes, n_fields: int, path) -> tuple[int, ...]:
    need = 4 * n_fields
    if len(data) < need:
        raise IdxTruncatedError(f"{path}: header truncated ({len(data)} bytes)")
    return struct.unpack(f">{n_fields}I", data[:need])


def load_idx(images_path, labels_path, name: str | None = None) -> Domain:
    """Load an IDX image/label pair into a Domain with pixels in [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_data = images_path.read_bytes()
    magic, count, rows, cols = _read_header(img_data, 4, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{images_path}: bad image magic 0x{magic:08x}")
    payload = img_data[16:]
    if len(payload) != count * rows * cols:
        raise IdxTruncatedError(
            f"{images_path}: payload {len(payload)} bytes, expected {count * rows * cols}"
        )
    lbl_data = labels_path.read_bytes()
    lmagic, lcount = _read_header(lbl_data, 2, labels_path)
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    lpayload = lbl_data[8:]
    if len(lpayload) != lcount:
        raise IdxTruncatedError(
            f"{labels_path}: payload {len(lpayload)} bytes, expected {lcount}"
        )
    if count != lcount:
        raise IdxCountMismatchError(
            f"{images_path} has {count} items but {labels_path} has {lcount}"
        )
    if count < 1:
        raise DataError(f"{images_path}: empty IDX file")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    return Domain(
        name=name or images_path.stem,
        samples=pixels.astype(np.float64) / 255.0,
        labels=labels,
    )


def write_idx(domain: Domain, images_path, labels_path, rows: int, cols: int) -> None:
    """Write a Domain back to an IDX image/label pair (inverse of load_idx)."""
    if rows * cols != domain.dim:
        raise DataError(f"rows*cols = {rows * cols} != feature dim {domain.dim}")
    if domain.labels.min() < 0 or domain.labels.max() > 255:
        raise DataError("IDX labels must fit in a byte")
    pixels = np.clip(np.rint(domain.samples * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGE_MAGIC, domain.n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABEL_MAGIC, domain.n))
        f.write(domain.labels.astype(np.uint8).tobytes())


# -- Episodic sampling -------------------------------------------------------


@dataclass(frozen=True)
class EpisodeProtocol:
    """Varying-way varying-shot sampling parameters."""

    min_way: int = 2
    max_way: int = 5
    min_shot: int = 1
    max_shot: int = 5
    query_per_class: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.min_way <= self.max_way:
            raise ConfigError("need 2 <= min_way <= max_way")
        if not 1 <= self.min_shot <= self.max_shot:
            raise ConfigError("need 1 <= min_shot <= max_shot")
        if self.query_per_class < 1:
            raise ConfigError("query_per_class must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    def to_json(self) -> str:
        return json.dumps(
            {
                "min_way": self.min_way,
                "max_way": self.max_way,
                "min_shot": self.min_shot,
                "max_shot": self.max_shot,
                "query_per_class": self.query_per_class,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EpisodeProtocol":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class Episode:
    """One few-shot task: disjoint support and query sets from one domain."""

    support: Batch
    query: Batch
    way: int
    shots: tuple[int, ...]
    domain_name: str
    support_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    query_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.way < 2:
            raise DataError("an episode needs at least two ways")
        sup = set(np.asarray(self.support_indices).tolist())
        qry = set(np.asarray(self.query_indices).tolist())
        if sup and qry and sup & qry:
            raise DataError("support and query sets overlap")
        if not set(np.unique(self.query.labels)) <= set(np.unique(self.support.labels)):
            raise DataError("every query class must appear in the support set")


def sample_episode(domain: Domain, protocol: EpisodeProtocol, task_index: int) -> Episode:
    """Draw the episode determined by (protocol.seed, task_index).

    The generator is derived from those two values alone, so episodes are
    reproducible and independent of call order.
    """
    if task_index < 0:
        raise DataError("task_index must be non-negative")
    rng = np.random.default_rng([protocol.seed, task_index])
    need = protocol.min_shot + protocol.query_per_class
    eligible = [c for c in domain.class_ids if domain.class_indices(c).size >= need]
    if len(eligible) < protocol.min_way:
        raise DataError(
            f"domain {domain.name!r} has {len(eligible)} usable classes, "
            f"needs {protocol.min_way}"
        )
    way_max = min(protocol.max_way, len(eligible))
    way = int(rng.integers(protocol.min_way, way_max + 1))
    chosen = rng.choice(np.asarray(eligible), size=way, replace=False)

    sup_idx, qry_idx, shots = [], [], []
    for c in chosen:
        idx = domain.class_indices(int(c))
        shot = int(rng.integers(protocol.min_shot, protocol.max_shot + 1))
        shot = min(shot, idx.size - protocol.query_per_class)
        perm = rng.permutation(idx)
        sup_idx.append(perm[:shot])
        qry_idx.append(perm[shot : shot + protocol.query_per_class])
        shots.append(shot)
    sup_idx = np.concatenate(sup_idx)
    qry_idx = np.concatenate(qry_idx)
    return Episode(
        support=Batch(domain.samples[sup_idx], domain.labels[sup_idx]),
        query=Batch(domain.samples[qry_idx], domain.labels[qry_idx]),
        way=way,
        shots=tuple(shots),
        domain_name=domain.name,
        support_indices=sup_idx,
        query_indices=qry_idx,
    )


def stratified_split(domain: Domain, train_frac: float, seed: int) -> tuple[Domain, Domain]:
    """Split per class proportionally; the two halves partition the domain."""
    if not 0.0 < train_frac < 1.0:
        raise ConfigError("train_frac must be in (0, 1)")
    rng = np.random.default_rng(seed)
    left, right = [], []
    for c in domain.class_ids:
        idx = domain.class_indices(c)
        if idx.size < 2:
            raise DataError(f"class {c} has fewer than 2 samples")
        n_train = int(np.clip(int(np.floor(train_frac * idx.size)), 1, idx.size - 1))
        perm = rng.permutation(idx)
        left.append(perm[:n_train])
        right.append(perm[n_train:])
    li = np.concatenate(left)
    ri = np.concatenate(right)
    mk = lambda idx, tag: Domain(
        name=f"{domain.name}/{tag}",
        samples=domain.samples[idx],
        labels=domain.labels[idx],
        class_ids=domain.class_ids,
        generator_spec=domain.generator_spec,
    )
    return mk(li, "train"), mk(ri, "test")


# -- Domain persistence (npz container) --------------------------------------


def save_domain(domain: Domain, path) -> None:
    extra = {}
    if domain.generator_spec is not None:
        extra["generator_spec"] = json.dumps(domain.generator_spec.to_dict(), sort_keys=True)
    np.savez(
        path,
        samples=domain.samples,
        labels=domain.labels,
        class_ids=np.asarray(domain.class_ids, dtype=np.int64),
        name=np.asarray(domain.name),
        **extra,
    )


def load_domain(path) -> Domain:
    with np.load(path, allow_pickle=False) as z:
        spec = None
        if "generator_spec" in z:
            spec = GaussianMixtureSpec.from_dict(json.loads(str(z["generator_spec"])))
        return Domain(
            name=str(z["name"]),
            samples=z["samples"],
            labels=z["labels"],
            class_ids=tuple(int(c) for c in z["class_ids"]),
            generator_spec=spec,
        )
