"""Low-rank adapter data model: init, merge, counting, similarity, files.

Canonical flatten order everywhere: layers ascending, then the base config's
target-module order, then A before B, row-major. Similarities, z-scoring and
serialization all share it, so values reproduce across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import serial
from .base_lm import BaseLMConfig
from .errors import (
    ConfigError,
    DuplicateKeyError,
    FingerprintMismatchError,
    FormatError,
    ShapeError,
    UndefinedSimilarityError,
)
from .tensor import Tensor

ADAPTER_MAGIC = b"T2LA"


@dataclass(frozen=True)
class LoraConfig:
    base: BaseLMConfig
    rank: int = 4
    alpha: float | None = None  # defaults to 2*rank (rsLoRA keeps s = 2*sqrt(r))
    dropout: float = 0.0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        for m in self.base.target_modules:
            d_in, d_out = self.base.module_dims[m]
            if self.rank >= min(d_in, d_out):
                raise ConfigError(
                    f"rank {self.rank} not below min dim of {m} ({d_in}x{d_out})"
                )
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(2 * self.rank))

    @property
    def scaling(self) -> float:
        return self.alpha / math.sqrt(self.rank)


@dataclass
class LoraPair:
    A: Tensor  # (rank, d_in)
    B: Tensor  # (rank, d_out)
    rank: int
    scaling: float


class AdapterSet:
    """Per-(module, layer) low-rank pairs covering all injection points."""

    def __init__(
        self,
        entries: dict,
        rank: int,
        scaling: float,
        fingerprint: int,
        modules: tuple,
        n_layers: int,
        task_id: str = "",
        description: str = "",
    ):
        expected = {(m, l) for l in range(n_layers) for m in modules}
        if set(entries) != expected:
            raise ConfigError(
                f"adapter entries do not cover target_modules x layers: "
                f"missing {sorted(expected - set(entries))}, "
                f"extra {sorted(set(entries) - expected)}"
            )
        self.entries = entries
        self.rank = rank
        self.scaling = scaling
        self.fingerprint = fingerprint
        self.modules = tuple(modules)
        self.n_layers = n_layers
        self.task_id = task_id
        self.description = description

    def canonical_keys(self) -> list:
        return [(m, l) for l in range(self.n_layers) for m in self.modules]

    def flatten_ab(self) -> np.ndarray:
        parts = []
        for key in self.canonical_keys():
            pair = self.entries[key]
            parts.append(pair.A.data.reshape(-1))
            parts.append(pair.B.data.reshape(-1))
        return np.concatenate(parts)

    def flatten_dw(self) -> np.ndarray:
        parts = []
        for key in self.canonical_keys():
            pair = self.entries[key]
            dw = pair.scaling * (pair.B.data.T @ pair.A.data)
            parts.append(dw.reshape(-1))
        return np.concatenate(parts)

    def param_count(self) -> int:
        return sum(p.A.size + p.B.size for p in self.entries.values())

    def parameters(self) -> list:
        out = []
        for key in self.canonical_keys():
            out.append(self.entries[key].A)
            out.append(self.entries[key].B)
        return out

    def detached_copy(self) -> "AdapterSet":
        entries = {
            k: LoraPair(Tensor(p.A.data.copy()), Tensor(p.B.data.copy()), p.rank, p.scaling)
            for k, p in self.entries.items()
        }
        return AdapterSet(
            entries, self.rank, self.scaling, self.fingerprint,
            self.modules, self.n_layers, self.task_id, self.description,
        )

    def map_arrays(self, fn, task_id: str = "", description: str = "") -> "AdapterSet":
        """New set with fn applied to every (key, 'A'|'B', array)."""
        entries = {}
        for key, p in self.entries.items():
            entries[key] = LoraPair(
                Tensor(fn(key, "A", p.A.data)),
                Tensor(fn(key, "B", p.B.data)),
                p.rank,
                p.scaling,
            )
        return AdapterSet(
            entries, self.rank, self.scaling, self.fingerprint,
            self.modules, self.n_layers, task_id, description,
        )


@dataclass
class AdapterLibrary:
    adapters: list = field(default_factory=list)  # [AdapterSet]

    def __post_init__(self):
        if self.adapters:
            first = self.adapters[0]
            for a in self.adapters[1:]:
                if a.fingerprint != first.fingerprint:
                    raise FingerprintMismatchError(
                        "library members were built against different base configs"
                    )
                if a.rank != first.rank:
                    raise ConfigError("library members must share rank")

    def __len__(self):
        return len(self.adapters)

    def matrix(self) -> np.ndarray:
        return np.stack([a.flatten_ab() for a in self.adapters])


def param_count(config: LoraConfig) -> int:
    """Exact adapter parameter count: sum over modules of r*(d_in+d_out)*L."""
    base = config.base
    per_layer = sum(
        config.rank * (base.module_dims[m][0] + base.module_dims[m][1])
        for m in base.target_modules
    )
    return per_layer * base.n_layers


def init_lora(
    config: LoraConfig, seed: int, task_id: str = "", description: str = ""
) -> AdapterSet:
    """A ~ U(-1/d_in, 1/d_in), B = 0; trainable leaves, deterministic in seed."""
    rng = np.random.default_rng(seed)
    base = config.base
    entries = {}
    for l in range(base.n_layers):
        for m in base.target_modules:
            d_in, d_out = base.module_dims[m]
            a = rng.uniform(-1.0 / d_in, 1.0 / d_in, size=(config.rank, d_in))
            entries[(m, l)] = LoraPair(
                Tensor(a, requires_grad=True),
                Tensor(np.zeros((config.rank, d_out)), requires_grad=True),
                config.rank,
                config.scaling,
            )
    return AdapterSet(
        entries, config.rank, config.scaling, base.fingerprint(),
        base.target_modules, base.n_layers, task_id, description,
    )


def merge(w0: Tensor, pair: LoraPair) -> Tensor:
    """W0 + s * B^T A, shape (d_out, d_in)."""
    d_out, d_in = w0.shape
    if pair.A.shape != (pair.rank, d_in) or pair.B.shape != (pair.rank, d_out):
        raise ShapeError(
            f"merge: W0 {w0.shape} incompatible with A {pair.A.shape} / B {pair.B.shape}"
        )
    return Tensor(w0.data + pair.scaling * (pair.B.data.T @ pair.A.data))


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine undefined for a zero adapter vector")
    return float(np.dot(u, v) / (nu * nv))


def _check_same_config(a: AdapterSet, b: AdapterSet):
    if a.fingerprint != b.fingerprint:
        raise FingerprintMismatchError("adapters come from different base configs")


def similarity_ab(a: AdapterSet, b: AdapterSet) -> float:
    """Cosine of the concatenated flattened A/B matrices (canonical order)."""
    _check_same_config(a, b)
    return _cosine(a.flatten_ab(), b.flatten_ab())


def similarity_dw(a: AdapterSet, b: AdapterSet) -> float:
    """Cosine of the concatenated flattened s*B^T A update matrices."""
    _check_same_config(a, b)
    return _cosine(a.flatten_dw(), b.flatten_dw())


def rotate_rank_space(adapter: AdapterSet, seed: int, task_id: str = "") -> AdapterSet:
    """Apply one random orthogonal map Q to the rank space of every pair.

    Leaves every s*B^T A untouched while decorrelating the raw A/B entries —
    the mechanism behind near-zero A/B-space correlations.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(adapter.rank, adapter.rank)))
    return adapter.map_arrays(lambda key, part, arr: q @ arr, task_id=task_id)


# ---------------------------------------------------------------------------
# T2LA adapter files


def save_adapter(adapter: AdapterSet, path):
    with open(path, "wb") as fh:
        serial.write_header(fh, ADAPTER_MAGIC)
        serial.write_u64(fh, adapter.fingerprint)
        serial.write_u32(fh, adapter.rank)
        serial.write_f64(fh, adapter.scaling)
        serial.write_str(fh, adapter.task_id)
        serial.write_str(fh, adapter.description)
        serial.write_u32(fh, adapter.n_layers)
        serial.write_u32(fh, len(adapter.modules))
        for m in adapter.modules:
            serial.write_str(fh, m)
        keys = adapter.canonical_keys()
        serial.write_u32(fh, len(keys))
        for key in keys:
            pair = adapter.entries[key]
            serial.write_u32(fh, pair.A.shape[1])
            serial.write_u32(fh, pair.B.shape[1])
        for key in keys:
            pair = adapter.entries[key]
            serial.write_array(fh, pair.A.data)
            serial.write_array(fh, pair.B.data)


def load_adapter(path, expected_config: BaseLMConfig | None = None) -> AdapterSet:
    with open(path, "rb") as fh:
        serial.read_header(fh, ADAPTER_MAGIC)
        fingerprint = serial.read_u64(fh)
        if expected_config is not None and fingerprint != expected_config.fingerprint():
            raise FingerprintMismatchError(
                f"adapter fingerprint {fingerprint:#018x} does not match the given "
                f"base config ({expected_config.fingerprint():#018x})"
            )
        rank = serial.read_u32(fh)
        scaling = serial.read_f64(fh)
        task_id = serial.read_str(fh)
        description = serial.read_str(fh)
        n_layers = serial.read_u32(fh)
        modules = tuple(serial.read_str(fh) for _ in range(serial.read_u32(fh)))
        n_entries = serial.read_u32(fh)
        keys = [(m, l) for l in range(n_layers) for m in modules]
        if n_entries != len(keys):
            raise FormatError(f"entry table size {n_entries} != layers x modules {len(keys)}")
        dims = [(serial.read_u32(fh), serial.read_u32(fh)) for _ in range(n_entries)]
        entries = {}
        for key, (d_in, d_out) in zip(keys, dims):
            a = serial.read_array(fh)
            b = serial.read_array(fh)
            if a.shape != (rank, d_in) or b.shape != (rank, d_out):
                raise FormatError(
                    f"payload shape {a.shape}/{b.shape} disagrees with entry table "
                    f"({rank}x{d_in}, {rank}x{d_out})"
                )
            entries[key] = LoraPair(Tensor(a), Tensor(b), rank, scaling)
    return AdapterSet(
        entries, rank, scaling, fingerprint, modules, n_layers, task_id, description
    )


# ---------------------------------------------------------------------------
# library manifest: one adapter per line


def save_library_manifest(path, rows):
    """rows: (adapter_path, task_id, description) triples."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t2l-library v1\n")
        for adapter_path, task_id, description in rows:
            fh.write(f"{adapter_path}\t{task_id}\t{description}\n")


def load_library_manifest(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "t2l-library v1":
        raise FormatError("not a library manifest")
    rows = []
    seen = set()
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"manifest line needs 3 tab-separated fields: {line!r}")
        if parts[1] in seen:
            raise DuplicateKeyError(f"task id {parts[1]!r} listed twice")
        seen.add(parts[1])
        rows.append(tuple(parts))
    return rows


def load_library(manifest_path, expected_config: BaseLMConfig | None = None) -> AdapterLibrary:
    import os

    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    adapters = []
    for rel_path, task_id, description in load_library_manifest(manifest_path):
        full = rel_path if os.path.isabs(rel_path) else os.path.join(base_dir, rel_path)
        a = load_adapter(full, expected_config)
        a.task_id = a.task_id or task_id
        a.description = a.description or description
        adapters.append(a)
    return AdapterLibrary(adapters)
