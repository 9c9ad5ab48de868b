"""Fine-tuning fusion and the persistent backbone bank.

A bank is a directory of named checkpoints plus provenance sidecars.
Checkpoint container layout (little-endian):

    bytes 0-3   magic "FFSC"
    u32         version (= 1)
    u64         metadata length in bytes
    ...         UTF-8 JSON metadata: {"architecture": ..., "provenance": ...}
    u64         parameter count
    ...         float32 parameter payload in param_vector order

Writes go through a temp file and an atomic rename, so a crash mid-write
never damages existing entries. Parameters round-trip at float32
precision by design; training always happens in float64.
"""

from __future__ import annotations

import datetime
import json
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Domain
from .errors import (
    AdapterSpecError,
    ConfigError,
    CorruptCheckpointError,
    DuplicateEntryError,
    GateStateError,
    MissingEntryError,
)
from .model import (
    AdapterSpec,
    Model,
    attach_adapters,
    param_count,
    param_vector,
    replace_head,
    set_gates,
    strip_adapters,
    trainable_mask,
    unflatten,
)
from .training import TrainConfig, TrainHistory, train

MAGIC = b"FFSC"
VERSION = 1
FINETUNE_MODES = ("none", "vanilla", "lora")


@dataclass(frozen=True)
class Provenance:
    """Where a bank entry came from."""

    objective: str
    rho: float
    source_dataset: str
    parent: str | None = None
    finetune_mode: str = "none"
    rank: int | None = None
    train_config_hash: str = ""
    created: str = ""

    def __post_init__(self):
        if self.objective not in ("erm", "sam"):
            raise ConfigError(f"objective must be erm or sam, got {self.objective!r}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ConfigError(f"finetune_mode must be one of {FINETUNE_MODES}")
        if self.finetune_mode == "lora" and (self.rank is None or self.rank < 1):
            raise ConfigError("lora finetune requires rank >= 1")
        if not self.created:
            object.__setattr__(
                self, "created", datetime.datetime.now(datetime.timezone.utc).isoformat()
            )

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "rho": self.rho,
            "source_dataset": self.source_dataset,
            "parent": self.parent,
            "finetune_mode": self.finetune_mode,
            "rank": self.rank,
            "train_config_hash": self.train_config_hash,
            "created": self.created,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(**d)


def _architecture_dict(model: Model) -> dict:
    adapters = None
    if model.adapters is not None:
        adapters = [
            None if a is None else {"kind": a.kind, "rank": a.rank} for a in model.adapters
        ]
    return {
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "gates_on": model.gates_on,
        "adapters": adapters,
    }


def _model_skeleton(arch: dict) -> Model:
    dims = [int(d) for d in arch["layer_dims"]]
    weights = tuple(np.zeros((dims[l + 1], dims[l])) for l in range(len(dims) - 1))
    biases = tuple(np.zeros(dims[l + 1]) for l in range(len(dims) - 1))
    adapters = None
    if arch.get("adapters") is not None:
        slots = []
        for l, a in enumerate(arch["adapters"]):
            if a is None:
                slots.append(None)
            elif a["kind"] == "low_rank":
                r = int(a["rank"])
                slots.append(
                    AdapterSpec(
                        kind="low_rank",
                        rank=r,
                        b=np.zeros((dims[l + 1], r)),
                        a=np.zeros((r, dims[l])),
                    )
                )
            else:
                slots.append(
                    AdapterSpec(kind="full_residual", delta=np.zeros((dims[l + 1], dims[l])))
                )
        adapters = tuple(slots)
    return Model(
        tuple(dims),
        weights,
        biases,
        arch["activation"],
        adapters=adapters,
        gates_on=bool(arch.get("gates_on", False)),
    )


def write_checkpoint(path, model: Model, provenance: Provenance) -> None:
    """Serialise model + provenance to the container format, atomically."""
    path = Path(path)
    meta = json.dumps(
        {"architecture": _architecture_dict(model), "provenance": provenance.to_dict()},
        sort_keys=True,
    ).encode("utf-8")
    params = param_vector(model).astype(np.float32)
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<I", VERSION),
            struct.pack("<Q", len(meta)),
            meta,
            struct.pack("<Q", params.size),
            params.tobytes(),
        ]
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[Model, Provenance]:
    """Parse and validate a checkpoint container."""
    path = Path(path)
    if not path.exists():
        raise MissingEntryError(f"no checkpoint at {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack("<Q", data[8:16])
    if 16 + meta_len + 8 > len(data):
        raise CorruptCheckpointError(f"{path}: metadata length overruns file")
    try:
        meta = json.loads(data[16 : 16 + meta_len].decode("utf-8"))
        arch = meta["architecture"]
        provenance = Provenance.from_dict(meta["provenance"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptCheckpointError(f"{path}: invalid metadata ({e})") from e
    off = 16 + meta_len
    (n_params,) = struct.unpack("<Q", data[off : off + 8])
    payload = data[off + 8 :]
    if len(payload) != 4 * n_params:
        raise CorruptCheckpointError(
            f"{path}: payload {len(payload)} bytes, expected {4 * n_params}"
        )
    skeleton = _model_skeleton(arch)
    if param_count(skeleton) != n_params:
        raise CorruptCheckpointError(
            f"{path}: parameter count {n_params} does not match architecture"
        )
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return unflatten(skeleton, params), provenance


class BackboneBank:
    """Directory-backed collection of named backbones with provenance.

    Readers may run concurrently; writers serialise through atomic
    renames. Loaded entries are cached in memory keyed by file stat, so
    repeated per-task selection does not re-read the payload.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, tuple[tuple, Model, Provenance]] = {}
        self._lock = threading.Lock()

    def _ckpt_path(self, name: str) -> Path:
        if not name or any(ch in name for ch in "/\\\0") or name.startswith("."):
            raise ConfigError(f"invalid entry name {name!r}")
        return self.directory / f"{name}.ckpt"

    def _sidecar_path(self, name: str) -> Path:
        return self.directory / f"{name}.json"

    def put(self, name: str, model: Model, provenance: Provenance) -> None:
        path = self._ckpt_path(name)
        if path.exists():
            raise DuplicateEntryError(f"bank already has an entry named {name!r}")
        write_checkpoint(path, model, provenance)
        sidecar = self._sidecar_path(name)
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(provenance.to_dict(), f, sort_keys=True, indent=2)
            os.replace(tmp, sidecar)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        with self._lock:
            self._cache.pop(name, None)

    def get(self, name: str) -> tuple[Model, Provenance]:
        path = self._ckpt_path(name)
        if not path.exists():
            raise MissingEntryError(f"bank has no entry named {name!r}")
        st = path.stat()
        key = (st.st_mtime_ns, st.st_size)
        with self._lock:
            hit = self._cache.get(name)
            if hit is not None and hit[0] == key:
                return hit[1], hit[2]
        model, provenance = read_checkpoint(path)
        with self._lock:
            self._cache[name] = (key, model, provenance)
        return model, provenance

    def list(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.ckpt"))

    def provenance(self, name: str) -> Provenance:
        return self.get(name)[1]

    def __len__(self) -> int:
        return len(self.list())

    def __contains__(self, name: str) -> bool:
        try:
            return self._ckpt_path(name).exists()
        except ConfigError:
            return False


def finetune(
    base: Model,
    dataset: Domain,
    cfg: TrainConfig,
    mode: str = "vanilla",
    rank: int | None = None,
) -> tuple[Model, TrainHistory]:
    """Fine-tune a copy of ``base`` on ``dataset`` with a fresh output head.

    vanilla updates every backbone parameter; lora freezes the backbone,
    attaches rank-``rank`` adapters to all non-head layers and trains only
    those plus the head. The returned model keeps the adapters factored
    (fold them with merge_lora for plain feature extraction).
    """
    if mode not in ("vanilla", "lora"):
        raise ConfigError(f"finetune mode must be vanilla or lora, got {mode!r}")
    if dataset.n_classes < 2:
        raise ConfigError("fine-tuning dataset needs at least two classes")
    model = replace_head(base, dataset.n_classes, seed=np.random.default_rng([cfg.seed, 1]))
    if mode == "vanilla":
        return train(model, dataset, cfg)
    if rank is None or rank < 1:
        raise ConfigError("lora finetune requires rank >= 1")
    model = attach_adapters(
        model,
        AdapterSpec(kind="low_rank", rank=rank),
        layers=range(model.n_layers - 1),
        seed=np.random.default_rng([cfg.seed, 2]),
    )
    model = set_gates(model, True)
    mask = trainable_mask(model, freeze_base=True)
    return train(model, dataset, cfg, trainable=mask)


def merge_lora(model: Model) -> Model:
    """Fold low-rank adapter deltas into the base weights: W' = W + B A.

    Requires gates to be on (the fold reproduces the gated forward pass);
    the result carries no adapters and behaves identically on any input
    up to rounding.
    """
    if not model.has_adapters:
        raise AdapterSpecError("model has no adapters to merge")
    if any(a is not None and a.kind != "low_rank" for a in model.adapters):
        raise AdapterSpecError("merge_lora only folds low_rank adapters")
    if not model.gates_on:
        raise GateStateError("merge_lora expects gates on (the delta must be active)")
    weights = []
    for l in range(model.n_layers):
        spec = model.adapters[l]
        if spec is None:
            weights.append(model.weights[l].copy())
        else:
            weights.append(model.weights[l] + spec.b @ spec.a)
    stripped = Model(
        model.layer_dims,
        tuple(weights),
        tuple(b.copy() for b in model.biases),
        model.activation,
    )
    return stripped


def as_plain_backbone(model: Model) -> Model:
    """Normalise to an adapter-free backbone for task-agnostic use.

    Active low-rank or full-residual deltas are folded into the weights;
    inactive adapters are dropped.
    """
    if not model.has_adapters:
        return model
    if not model.gates_on:
        return strip_adapters(model)
    if all(a is None or a.kind == "low_rank" for a in model.adapters):
        return merge_lora(model)
    weights = []
    for l in range(model.n_layers):
        spec = model.adapters[l]
        if spec is None:
            weights.append(model.weights[l].copy())
        else:
            weights.append(model.weights[l] + spec.effective_delta())
    return Model(
        model.layer_dims,
        tuple(weights),
        tuple(b.copy() for b in model.biases),
        model.activation,
    )
