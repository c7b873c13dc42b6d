"""CRF structure and learnable scores.

Parameter names and layouts (``K`` distance banks, ``h`` channels):

=========  ===============================  =========================
name       shape                            present when
=========  ===============================  =========================
S          (vocab, d)                       always
T          (K, h, d, d)                     decomposition == "full"
U, V       (K, d, h, r)                     decomposition == "uv"
U, V       (K, d, r)                        decomposition == "uvw"
W          (h, r)                           decomposition == "uvw"
T_root     (d, d_root, h)                   use_root
B          (h, m, d)                        all_dep / dep_split
B          (m, d)                           single_split
=========  ===============================  =========================
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad

RNG_ALGORITHM = "numpy.PCG64"

DECOMPOSITIONS = ("full", "uv", "uvw")
GLOBAL_VARIANTS = ("none", "all_dep", "dep_split", "single_split")
PATHS = ("scalar", "general", "transformer_form")


class ConfigError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """The one generator family used everywhere (recorded in checkpoints)."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class ModelConfig:
    d: int = 64
    h: int = 4
    T_iters: int = 3
    gamma: int = 3
    distance: bool = True
    lambda_Z: float = 1.0
    lambda_H: float | None = None  # None means 1/d
    decomposition: str = "uv"
    rank: int = 16
    use_root: bool = False
    d_root: int = 1
    global_variant: str = "none"
    m: int = 1
    alpha_Z: float = 1.0
    alpha_H: float = 1.0
    beta_Z: float = 0.0
    beta_H: float = 0.0
    dropout: float = 0.0
    use_async: bool = True
    use_tensorized: str = "general"

    def __post_init__(self):
        self.validate()

    @property
    def lam_H(self) -> float:
        return 1.0 / self.d if self.lambda_H is None else float(self.lambda_H)

    @property
    def n_banks(self) -> int:
        return 2 * self.gamma + 2 if self.distance else 1

    def validate(self) -> None:
        problems = []
        for name in ("d", "h", "T_iters"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        if self.gamma < 0:
            problems.append("gamma must be >= 0")
        if self.lambda_Z <= 0 or (self.lambda_H is not None and self.lambda_H <= 0):
            problems.append("message weights must be positive")
        if self.decomposition not in DECOMPOSITIONS:
            problems.append(f"decomposition must be one of {DECOMPOSITIONS}")
        if self.decomposition != "full" and self.rank < 1:
            problems.append("rank must be >= 1 when decomposed")
        if self.use_root and self.d_root < 1:
            problems.append("d_root must be >= 1")
        if self.global_variant not in GLOBAL_VARIANTS:
            problems.append(f"global_variant must be one of {GLOBAL_VARIANTS}")
        if self.global_variant != "none" and self.m < 1:
            problems.append("m must be >= 1 with global variables")
        for name in ("alpha_Z", "alpha_H"):
            if not 0.0 < getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in (0, 1]")
        for name in ("beta_Z", "beta_H"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.use_tensorized not in PATHS:
            problems.append(f"use_tensorized must be one of {PATHS}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(data))


def clip_distance(i: int, j: int, gamma: int) -> int:
    """Bank index for a dependent at ``i`` whose head is ``j``."""
    x = i - j
    if x == 0:
        raise ValueError("clip distance is undefined for a word and itself")
    if x < -gamma:
        return 0
    if x < 0:
        return x + gamma + 1
    if x <= gamma:
        return x + gamma
    return 2 * gamma + 1


def bank_of(i: int, j: int, config: ModelConfig) -> int:
    return clip_distance(i, j, config.gamma) if config.distance else 0


def bank_masks(n: int, config: ModelConfig, dtype=np.float64) -> np.ndarray:
    """One-hot (K, n, n) indicator of the bank used by each ordered word pair."""
    out = np.zeros((config.n_banks, n, n), dtype=dtype)
    for i in range(n):
        for j in range(n):
            if i != j:
                out[bank_of(i, j, config), i, j] = 1.0
    return out


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def vocab_size(self) -> int:
        return self.tensors["S"].shape[0]


def ternary_names(config: ModelConfig) -> tuple[str, ...]:
    return {"full": ("T",), "uv": ("U", "V"), "uvw": ("U", "V", "W")}[config.decomposition]


def parameter_shapes(config: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    K, h, d, r = config.n_banks, config.h, config.d, config.rank
    shapes: dict[str, tuple[int, ...]] = {"S": (vocab_size, d)}
    if config.decomposition == "full":
        shapes["T"] = (K, h, d, d)
    elif config.decomposition == "uv":
        shapes["U"] = (K, d, h, r)
        shapes["V"] = (K, d, h, r)
    else:
        shapes["U"] = (K, d, r)
        shapes["V"] = (K, d, r)
        shapes["W"] = (h, r)
    if config.use_root:
        shapes["T_root"] = (d, config.d_root, h)
    if config.global_variant in ("all_dep", "dep_split"):
        shapes["B"] = (h, config.m, d)
    elif config.global_variant == "single_split":
        shapes["B"] = (config.m, d)
    return shapes


def init_parameters(config: ModelConfig, vocab_size: int, seed: int = 0,
                    std: float = 0.02, dtype=np.float32) -> Parameters:
    """I.i.d. Normal(0, std^2) draws; ``W`` uses std / sqrt(rank)."""
    rng = make_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config, vocab_size).items():
        s = std / np.sqrt(config.rank) if name == "W" else std
        tensors[name] = rng.normal(0.0, s, size=shape).astype(dtype)
    return Parameters(config, tensors)


def check_shapes(params: Parameters) -> None:
    expected = parameter_shapes(params.config, params.vocab_size)
    missing = set(expected) - set(params.tensors)
    if missing:
        raise ConfigError(f"missing parameter tensors: {sorted(missing)}")
    for name, shape in expected.items():
        if tuple(params.tensors[name].shape) != shape:
            raise ConfigError(f"{name}: expected shape {shape}, got {params.tensors[name].shape}")


# --------------------------------------------------------------------------- ternary scores


def factor_pair(tensors: Mapping, config: ModelConfig) -> tuple[ad.Tensor, ad.Tensor]:
    """Left/right factors ``(L, R)``, each (K, h, d, r'), with T[k, c] = L[k, c] @ R[k, c].T.

    For the full decomposition ``L`` is T itself and ``R`` a constant identity.
    """
    K, h, d = config.n_banks, config.h, config.d
    if config.decomposition == "full":
        T = tensors["T"]
        eye = np.broadcast_to(np.eye(d, dtype=_dtype_of(T)), (K, h, d, d)).copy()
        return ad.einsum("khab->khab", T), ad.Tensor(eye)
    if config.decomposition == "uv":
        L = ad.einsum("kdhr->khdr", tensors["U"])
        R = ad.einsum("kdhr->khdr", tensors["V"])
        return L, R
    ones = np.ones(h, dtype=_dtype_of(tensors["V"]))
    L = ad.einsum("kdr,hr->khdr", tensors["U"], tensors["W"])
    R = ad.einsum("kdr,h->khdr", tensors["V"], ones)
    return L, R


def materialize_all(tensors: Mapping, config: ModelConfig) -> ad.Tensor:
    """All ternary score matrices as a (K, h, d, d) tensor."""
    if config.decomposition == "full":
        return ad.einsum("khab->khab", tensors["T"])
    if config.decomposition == "uv":
        return ad.einsum("kahl,kbhl->khab", tensors["U"], tensors["V"])
    return ad.einsum("kal,kbl,hl->khab", tensors["U"], tensors["V"], tensors["W"])


def materialize_ternary(tensors: Mapping, config: ModelConfig, c: int, k: int) -> ad.Tensor:
    """The d x d score matrix of channel ``c`` in distance bank ``k``."""
    if not 0 <= c < config.h:
        raise IndexError(f"channel {c} out of range [0, {config.h})")
    if not 0 <= k < config.n_banks:
        raise IndexError(f"bank {k} out of range [0, {config.n_banks})")
    if config.decomposition == "full":
        return ad.index(ad._as_tensor(tensors["T"]), (k, c))
    if config.decomposition == "uv":
        U = ad.index(ad._as_tensor(tensors["U"]), (k, slice(None), c))
        V = ad.index(ad._as_tensor(tensors["V"]), (k, slice(None), c))
        return ad.einsum("al,bl->ab", U, V)
    U = ad.index(ad._as_tensor(tensors["U"]), (k,))
    V = ad.index(ad._as_tensor(tensors["V"]), (k,))
    W = ad.index(ad._as_tensor(tensors["W"]), (c,))
    return ad.einsum("al,bl,l->ab", U, V, W)


def unary_scores(tensors: Mapping, token_ids) -> ad.Tensor:
    return ad.gather_rows(tensors["S"], token_ids)


def _dtype_of(x):
    return x.dtype if hasattr(x, "dtype") else np.asarray(x).dtype
