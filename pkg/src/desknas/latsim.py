"""Per-layer cost accounting and a roofline-style simulated device.

Latency of one inference (batch size 1) is

    per_model_overhead + sum_l [max(flops_l / compute_rate, bytes_l / mem_bandwidth)
                                 + per_layer_overhead]

so thin-and-deep networks pay for their layer count and memory traffic while
their FLOP count stays small.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .space import SpaceSpec, decode, sample_random, validate_genes, SpaceError
from .supernet import se_width

BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # pointwise | depthwise | se | classifier
    flops: int
    params: int
    act_in: int
    act_out: int

    @property
    def bytes(self) -> int:
        return BYTES_PER_VALUE * (self.params + self.act_in + self.act_out)


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    compute_rate: float  # FLOPs per ms
    mem_bandwidth: float  # bytes per ms
    per_layer_overhead: float  # ms
    per_model_overhead: float  # ms
    noise_sigma: float = 0.0  # ms

    def __post_init__(self):
        if self.compute_rate <= 0 or self.mem_bandwidth <= 0:
            raise ValueError(f"{self.name}: rates must be positive")
        if min(self.per_layer_overhead, self.per_model_overhead, self.noise_sigma) < 0:
            raise ValueError(f"{self.name}: overheads and noise must be non-negative")


# Rates are ordered orin > xavier > nx on every axis.
PROFILES = {
    "orin": DeviceProfile("orin", 5e6, 2e5, 0.01, 0.05),
    "xavier": DeviceProfile("xavier", 2.5e6, 1e5, 0.02, 0.1),
    "nx": DeviceProfile("nx", 1.2e6, 5e4, 0.04, 0.2),
}


def get_profile(name: str) -> DeviceProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown device {name!r}; known: {sorted(PROFILES)}") from None


def arch_layers(spec: SpaceSpec, genes: Sequence[int]) -> list[Layer]:
    arch = decode(spec, genes)
    L = arch.resolution
    c = arch.stem
    layers = [Layer("stem", "pointwise", 2 * L * c, c + c, L, L * c)]
    for s, (st, sa) in enumerate(zip(spec.stages, arch.stages)):
        H = sa.expand * sa.width
        for d in range(sa.depth):
            p = f"s{s}.b{d}"
            stride = st.stride if d == 0 else 1
            l_out = (L - 1) // stride + 1
            layers.append(Layer(p + ".exp", "pointwise", 2 * L * c * H, H * c + H, L * c, L * H))
            layers.append(Layer(p + ".dw", "depthwise", 2 * l_out * H * sa.kernel, sa.kernel * H,
                                L * H, l_out * H))
            if st.use_se:
                r = se_width(H)
                layers.append(Layer(p + ".se", "se", 2 * H * r * 2 + H, 2 * r * H + r + H,
                                    l_out * H, l_out * H))
            layers.append(Layer(p + ".proj", "pointwise", 2 * l_out * H * sa.width,
                                sa.width * H + sa.width, l_out * H, l_out * sa.width))
            L, c = l_out, sa.width
    hd, n = arch.head, spec.n_classes
    layers.append(Layer("head", "pointwise", 2 * L * c * hd, hd * c + hd, L * c, L * hd))
    layers.append(Layer("classifier", "classifier", 2 * hd * n, n * hd + n, hd, n))
    return layers


def count_flops(spec: SpaceSpec, genes: Sequence[int]) -> int:
    return sum(l.flops for l in arch_layers(spec, genes))


def count_bytes(spec: SpaceSpec, genes: Sequence[int]) -> int:
    return sum(l.bytes for l in arch_layers(spec, genes))


def simulate_latency(spec: SpaceSpec, genes: Sequence[int], device: DeviceProfile | str,
                     seed=None) -> float:
    """Simulated single-inference latency in ms; deterministic when noise_sigma == 0."""
    dev = get_profile(device) if isinstance(device, str) else device
    total = dev.per_model_overhead
    for layer in arch_layers(spec, genes):
        total += max(layer.flops / dev.compute_rate, layer.bytes / dev.mem_bandwidth)
        total += dev.per_layer_overhead
    if dev.noise_sigma > 0:
        noisy = total + np.random.default_rng(seed).normal(0.0, dev.noise_sigma)
        total = max(noisy, 0.01 * total)
    return float(total)


@dataclass(frozen=True)
class LatencySample:
    genes: tuple[int, ...]
    device: str
    latency_ms: float

    def __post_init__(self):
        if not self.latency_ms > 0:
            raise ValueError(f"latency must be positive, got {self.latency_ms}")


def sample_unique_archs(spec: SpaceSpec, n: int, seed=0) -> list[tuple[int, ...]]:
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < n:
        g = sample_random(spec, rng)
        if g not in seen:
            seen.add(g)
            out.append(g)
    return out


def build_latency_dataset(spec: SpaceSpec, n_samples: int = 3000,
                          devices: Iterable[DeviceProfile | str] = ("orin", "xavier", "nx"),
                          seed: int = 0) -> list[LatencySample]:
    """``n_samples`` distinct random architectures measured on every device."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    devs = [get_profile(d) if isinstance(d, str) else d for d in devices]
    archs = sample_unique_archs(spec, n_samples, seed)
    noise_seeds = np.random.SeedSequence(seed).spawn(len(devs))
    samples = []
    for dev, ss in zip(devs, noise_seeds):
        rng = np.random.default_rng(ss)
        for g in archs:
            s = int(rng.integers(2**63)) if dev.noise_sigma > 0 else None
            samples.append(LatencySample(g, dev.name, simulate_latency(spec, g, dev, s)))
    return samples


class LatencyCSVError(ValueError):
    pass


def csv_header(n_genes: int) -> list[str]:
    return [f"gene_{i}" for i in range(n_genes)] + ["device", "latency_ms"]


def export_csv(samples: Sequence[LatencySample], path: str | Path | None = None,
               comment: str = "") -> str:
    """CSV text (optionally written to ``path``); ``comment`` becomes a leading ``#`` line."""
    if not samples:
        raise ValueError("nothing to export")
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(len(samples[0].genes)))
    for s in samples:
        w.writerow([*s.genes, s.device, repr(float(s.latency_ms))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def import_csv(source: str | Path, spec: SpaceSpec | None = None) -> list[LatencySample]:
    """Read a latency CSV (simulated or measured on real hardware).

    ``source`` is a path or the CSV text itself.  Lines starting with ``#`` are
    skipped.  Errors name the offending line.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source
    numbered = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1)
                if ln.strip() and not ln.lstrip().startswith("#")]
    if not numbered:
        raise LatencyCSVError("line 1: empty file")
    linenos = [i for i, _ in numbered]
    rows = zip(linenos, csv.reader(ln for _, ln in numbered))
    hline, header = next(rows)
    n_genes = len(header) - 2
    if n_genes < 1 or header != csv_header(n_genes):
        raise LatencyCSVError(f"line {hline}: header must be gene_0..gene_{{G-1}},device,latency_ms; "
                              f"got {header}")
    if spec is not None and n_genes != spec.n_genes:
        raise LatencyCSVError(f"line {hline}: {n_genes} gene columns but the space has {spec.n_genes}")
    out = []
    for lineno, row in rows:
        if len(row) != n_genes + 2:
            raise LatencyCSVError(f"line {lineno}: expected {n_genes + 2} fields, got {len(row)}")
        try:
            genes = tuple(int(v) for v in row[:n_genes])
            lat = float(row[-1])
        except ValueError as e:
            raise LatencyCSVError(f"line {lineno}: {e}") from None
        if not np.isfinite(lat) or lat <= 0:
            raise LatencyCSVError(f"line {lineno}: latency must be positive, got {row[-1]}")
        if spec is not None:
            try:
                validate_genes(spec, genes)
            except SpaceError as e:
                raise LatencyCSVError(f"line {lineno}: {e}") from None
        out.append(LatencySample(genes, row[n_genes], lat))
    return out
