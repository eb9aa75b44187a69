"""Elastic search space: config loading, genome encoding and random operators.

A genome is a tuple of choice indices laid out as::

    [resolution, stem, (width, depth, kernel, expand) * n_stages, head]
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

Genes = tuple[int, ...]

CONFIG_DIR = Path(__file__).parent / "configs"
STAGE_DIMS = ("widths", "depths", "kernels", "expands")


class SpaceError(ValueError):
    """Raised for malformed or invalid space configurations and genomes."""


@dataclass(frozen=True)
class StageSpec:
    widths: tuple[int, ...]
    depths: tuple[int, ...]
    kernels: tuple[int, ...]
    expands: tuple[int, ...]
    use_se: bool
    stride: int


@dataclass(frozen=True)
class SpaceSpec:
    stages: tuple[StageSpec, ...]
    stem_widths: tuple[int, ...]
    head_widths: tuple[int, ...]
    resolutions: tuple[int, ...]
    n_classes: int

    @property
    def n_genes(self) -> int:
        return 3 + 4 * len(self.stages)

    def choices(self) -> list[tuple[int, ...]]:
        """Choice list for every gene position, in genome order."""
        out = [self.resolutions, self.stem_widths]
        for st in self.stages:
            out.extend([st.widths, st.depths, st.kernels, st.expands])
        out.append(self.head_widths)
        return out

    def arity(self) -> np.ndarray:
        return np.array([len(c) for c in self.choices()], dtype=np.int64)

    @property
    def max_resolution(self) -> int:
        return self.resolutions[-1]

    def to_dict(self) -> dict:
        return {
            "stem_widths": list(self.stem_widths),
            "head_widths": list(self.head_widths),
            "resolutions": list(self.resolutions),
            "n_classes": self.n_classes,
            "stages": [
                {
                    "widths": list(s.widths),
                    "depths": list(s.depths),
                    "kernels": list(s.kernels),
                    "expands": list(s.expands),
                    "use_se": s.use_se,
                    "stride": s.stride,
                }
                for s in self.stages
            ],
        }


@dataclass(frozen=True)
class StageArch:
    width: int
    depth: int
    kernel: int
    expand: int


@dataclass(frozen=True)
class Arch:
    """A decoded architecture: concrete values rather than choice indices."""

    resolution: int
    stem: int
    stages: tuple[StageArch, ...]
    head: int


def _choice_list(raw, key: str) -> tuple[int, ...]:
    if not isinstance(raw, list):
        raise SpaceError(f"{key}: expected a list of integers, got {type(raw).__name__}")
    if not raw:
        raise SpaceError(f"{key}: choice list is empty")
    vals = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, int):
            raise SpaceError(f"{key}: non-integer choice {v!r}")
        if v <= 0:
            raise SpaceError(f"{key}: choices must be positive, got {v}")
        vals.append(v)
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise SpaceError(f"{key}: choices must be strictly increasing and unique, got {vals}")
    return tuple(vals)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise SpaceError(f"{where}{key}: missing required key")
    return d[key]


def space_from_dict(cfg: dict) -> SpaceSpec:
    if not isinstance(cfg, dict):
        raise SpaceError("space config must be a JSON object")
    known = {"stem_widths", "head_widths", "resolutions", "n_classes", "stages"}
    extra = set(cfg) - known
    if extra:
        raise SpaceError(f"{sorted(extra)[0]}: unknown key")
    stem = _choice_list(_require(cfg, "stem_widths", ""), "stem_widths")
    head = _choice_list(_require(cfg, "head_widths", ""), "head_widths")
    res = _choice_list(_require(cfg, "resolutions", ""), "resolutions")
    n_classes = _require(cfg, "n_classes", "")
    if isinstance(n_classes, bool) or not isinstance(n_classes, int) or n_classes < 2:
        raise SpaceError(f"n_classes: must be an integer >= 2, got {n_classes!r}")
    raw_stages = _require(cfg, "stages", "")
    if not isinstance(raw_stages, list) or not raw_stages:
        raise SpaceError("stages: expected a non-empty list")
    stages = []
    for i, st in enumerate(raw_stages):
        where = f"stages[{i}]."
        if not isinstance(st, dict):
            raise SpaceError(f"stages[{i}]: expected an object")
        extra = set(st) - set(STAGE_DIMS) - {"use_se", "stride"}
        if extra:
            raise SpaceError(f"{where}{sorted(extra)[0]}: unknown key")
        dims = {k: _choice_list(_require(st, k, where), where + k) for k in STAGE_DIMS}
        if any(k % 2 == 0 for k in dims["kernels"]):
            raise SpaceError(f"{where}kernels: kernel sizes must be odd, got {list(dims['kernels'])}")
        use_se = _require(st, "use_se", where)
        if not isinstance(use_se, bool):
            raise SpaceError(f"{where}use_se: expected a boolean")
        stride = _require(st, "stride", where)
        if stride not in (1, 2) or isinstance(stride, bool):
            raise SpaceError(f"{where}stride: must be 1 or 2, got {stride!r}")
        stages.append(StageSpec(use_se=use_se, stride=stride, **dims))
    return SpaceSpec(tuple(stages), stem, head, res, n_classes)


def load_space(config_text: str) -> SpaceSpec:
    """Parse and validate a JSON space config."""
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as e:
        raise SpaceError(f"config is not valid JSON: {e}") from e
    return space_from_dict(cfg)


def load_space_file(path: str | Path) -> SpaceSpec:
    return load_space(Path(path).read_text(encoding="utf-8"))


def default_space() -> SpaceSpec:
    return load_space_file(CONFIG_DIR / "desk.json")


def space_hash(spec: SpaceSpec) -> str:
    canon = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def validate_genes(spec: SpaceSpec, genes: Sequence[int]) -> Genes:
    genes = tuple(int(g) for g in genes)
    if len(genes) != spec.n_genes:
        raise SpaceError(f"genome length {len(genes)} != {spec.n_genes}")
    for i, (g, n) in enumerate(zip(genes, spec.arity())):
        if not 0 <= g < n:
            raise SpaceError(f"gene {i} = {g} out of range [0, {n})")
    return genes


def decode(spec: SpaceSpec, genes: Sequence[int]) -> Arch:
    genes = validate_genes(spec, genes)
    stages = []
    for s, st in enumerate(spec.stages):
        w, d, k, e = genes[2 + 4 * s: 6 + 4 * s]
        stages.append(StageArch(st.widths[w], st.depths[d], st.kernels[k], st.expands[e]))
    return Arch(spec.resolutions[genes[0]], spec.stem_widths[genes[1]], tuple(stages),
                spec.head_widths[genes[-1]])


def encode(spec: SpaceSpec, arch: Arch) -> Genes:
    try:
        genes = [spec.resolutions.index(arch.resolution), spec.stem_widths.index(arch.stem)]
        for sa, st in zip(arch.stages, spec.stages, strict=True):
            genes += [st.widths.index(sa.width), st.depths.index(sa.depth),
                      st.kernels.index(sa.kernel), st.expands.index(sa.expand)]
        genes.append(spec.head_widths.index(arch.head))
    except ValueError as e:
        raise SpaceError(f"architecture not in space: {e}") from e
    return tuple(genes)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_min(spec: SpaceSpec) -> Genes:
    return (0,) * spec.n_genes


def sample_max(spec: SpaceSpec) -> Genes:
    return tuple(int(n) - 1 for n in spec.arity())


def sample_random(spec: SpaceSpec, rng_seed=None) -> Genes:
    rng = _rng(rng_seed)
    return tuple(int(rng.integers(n)) for n in spec.arity())


def mutate(spec: SpaceSpec, genes: Sequence[int], p_m: float = 0.2, rng_seed=None) -> Genes:
    """Resample each gene with probability ``p_m`` among its *other* choices."""
    if not 0.0 <= p_m <= 1.0:
        raise SpaceError(f"mutation probability must lie in [0, 1], got {p_m}")
    genes = validate_genes(spec, genes)
    rng = _rng(rng_seed)
    out = list(genes)
    for i, n in enumerate(spec.arity()):
        if rng.random() < p_m and n > 1:
            new = int(rng.integers(n - 1))
            out[i] = new + (new >= out[i])
    return tuple(out)


def crossover(spec: SpaceSpec, a: Sequence[int], b: Sequence[int], rng_seed=None) -> Genes:
    if len(a) != len(b):
        raise SpaceError(f"cannot cross genomes of length {len(a)} and {len(b)}")
    a = validate_genes(spec, a)
    b = validate_genes(spec, b)
    take_a = _rng(rng_seed).random(len(a)) < 0.5
    return tuple(x if t else y for x, y, t in zip(a, b, take_a))
