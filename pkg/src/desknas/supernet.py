"""Weight-sharing elastic 1-D inverted-residual network.

Activations use a (batch, length, channels) layout.  Every subnet reads a
nested slice of the maximal tensors: leading channels for width/expansion,
the central taps of the maximal depthwise kernel, and the first ``d``
blocks of every stage.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import _kernels
from .space import Arch, SpaceSpec, decode, space_hash, validate_genes

Grads = dict[str, np.ndarray]


class StaleCacheError(RuntimeError):
    pass


def se_width(hidden: int) -> int:
    return max(1, hidden // 4)


def subsample_index(length: int, resolution: int) -> np.ndarray:
    """Uniform striding from ``length`` samples down to ``resolution``."""
    if resolution > length:
        raise ValueError(f"cannot subsample length {length} to {resolution}")
    return (np.arange(resolution) * length) // resolution


# --------------------------------------------------------------------------
# parameter store
# --------------------------------------------------------------------------

def block_in_width_max(spec: SpaceSpec, s: int, d: int) -> int:
    if d > 0:
        return spec.stages[s].widths[-1]
    return spec.stem_widths[-1] if s == 0 else spec.stages[s - 1].widths[-1]


def param_shapes(spec: SpaceSpec) -> dict[str, tuple[int, ...]]:
    """Maximal tensor shapes in canonical (serialisation) order."""
    shapes = {"stem.w": (spec.stem_widths[-1], 1), "stem.b": (spec.stem_widths[-1],)}
    for s, st in enumerate(spec.stages):
        w_max = st.widths[-1]
        h_max = st.expands[-1] * w_max
        for d in range(st.depths[-1]):
            p = f"s{s}.b{d}."
            shapes[p + "exp.w"] = (h_max, block_in_width_max(spec, s, d))
            shapes[p + "exp.b"] = (h_max,)
            shapes[p + "dw.w"] = (st.kernels[-1], h_max)
            if st.use_se:
                r = se_width(h_max)
                shapes[p + "se.rw"] = (r, h_max)
                shapes[p + "se.rb"] = (r,)
                shapes[p + "se.ew"] = (h_max, r)
                shapes[p + "se.eb"] = (h_max,)
            shapes[p + "proj.w"] = (w_max, h_max)
            shapes[p + "proj.b"] = (w_max,)
    last = spec.stages[-1].widths[-1]
    shapes["head.w"] = (spec.head_widths[-1], last)
    shapes["head.b"] = (spec.head_widths[-1],)
    shapes["cls.w"] = (spec.n_classes, spec.head_widths[-1])
    shapes["cls.b"] = (spec.n_classes,)
    return shapes


# weights that feed a rectifier get variance 2/fan_in, the rest 1/fan_in
_RELU_FED = ("stem.w", "exp.w", "dw.w", "se.rw", "head.w")


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    return shape[0] if name.endswith("dw.w") else shape[1]


@dataclass
class SupernetParams:
    spec: SpaceSpec
    tensors: dict[str, np.ndarray]
    version: int = 0

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if list(expected) != list(self.tensors):
            raise ValueError("tensor names do not match the space")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "SupernetParams":
        return SupernetParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "SupernetParams":
        return SupernetParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())

    def zeros_like(self) -> Grads:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        """Write ``<path>.json`` manifest and ``<path>.bin`` little-endian f32 blob."""
        path = Path(path)
        entries, offset, blobs = [], 0, []
        for name, t in self.tensors.items():
            raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(t.shape), "dtype": "f32",
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        blob = b"".join(blobs)
        manifest = {"space_hash": space_hash(self.spec), "space": self.spec.to_dict(),
                    "blob": path.with_suffix(".bin").name,
                    "blob_sha256": hashlib.sha256(blob).hexdigest(),
                    "tensors": entries, "meta": meta or {}}
        path.with_suffix(".bin").write_bytes(blob)
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, spec: SpaceSpec, dtype=np.float64) -> "SupernetParams":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest["space_hash"] != space_hash(spec):
            raise ValueError(f"weights were trained for space {manifest['space_hash']}, "
                             f"not {space_hash(spec)}")
        blob = (path.parent / manifest["blob"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
            raise ValueError(f"{manifest['blob']}: checksum mismatch (corrupt or mismatched blob)")
        tensors = {}
        for e in manifest["tensors"]:
            if e["dtype"] != "f32":
                raise ValueError(f"{e['name']}: unsupported dtype {e['dtype']}")
            arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])),
                                offset=e["offset"])
            tensors[e["name"]] = arr.reshape(e["shape"]).astype(dtype)
        return cls(spec, tensors)


def init_supernet(spec: SpaceSpec, seed: int = 0, dtype=np.float64) -> SupernetParams:
    """Zero-mean Gaussian weights (2/fan_in before rectifiers, 1/fan_in elsewhere), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        gain = 2.0 if name.endswith(_RELU_FED) else 1.0
        std = np.sqrt(gain / _fan_in(name, shape))
        tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return SupernetParams(spec, tensors)


# --------------------------------------------------------------------------
# subnet views
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockPlan:
    prefix: str
    c_in: int
    hidden: int
    kernel: int
    tap_offset: int
    se: int  # squeeze width, 0 when the stage has no SE
    c_out: int
    stride: int
    residual: bool


@dataclass(frozen=True)
class SubnetView:
    genes: tuple[int, ...]
    arch: Arch
    stem: int
    blocks: tuple[BlockPlan, ...]
    head_in: int
    head: int
    n_classes: int

    @property
    def resolution(self) -> int:
        return self.arch.resolution

    def subsample(self, x: np.ndarray) -> np.ndarray:
        return x[:, subsample_index(x.shape[1], self.resolution)]

    def slices(self) -> dict[str, tuple[slice, ...]]:
        """Coordinates of every maximal tensor this subnet reads."""
        sl: dict[str, tuple[slice, ...]] = {
            "stem.w": (slice(0, self.stem), slice(0, 1)),
            "stem.b": (slice(0, self.stem),),
        }
        for bp in self.blocks:
            p, h = bp.prefix, bp.hidden
            sl[p + "exp.w"] = (slice(0, h), slice(0, bp.c_in))
            sl[p + "exp.b"] = (slice(0, h),)
            sl[p + "dw.w"] = (slice(bp.tap_offset, bp.tap_offset + bp.kernel), slice(0, h))
            if bp.se:
                sl[p + "se.rw"] = (slice(0, bp.se), slice(0, h))
                sl[p + "se.rb"] = (slice(0, bp.se),)
                sl[p + "se.ew"] = (slice(0, h), slice(0, bp.se))
                sl[p + "se.eb"] = (slice(0, h),)
            sl[p + "proj.w"] = (slice(0, bp.c_out), slice(0, h))
            sl[p + "proj.b"] = (slice(0, bp.c_out),)
        sl["head.w"] = (slice(0, self.head), slice(0, self.head_in))
        sl["head.b"] = (slice(0, self.head),)
        sl["cls.w"] = (slice(0, self.n_classes), slice(0, self.head))
        sl["cls.b"] = (slice(0, self.n_classes),)
        return sl

    def n_params(self) -> int:
        return sum(int(np.prod([s.stop - s.start for s in sls])) for sls in self.slices().values())

    def mask(self, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
        """Boolean coverage mask per maximal tensor."""
        masks = {k: np.zeros(v, dtype=bool) for k, v in shapes.items()}
        for name, sls in self.slices().items():
            masks[name][sls] = True
        return masks


def make_view(spec: SpaceSpec, genes: Sequence[int]) -> SubnetView:
    genes = validate_genes(spec, genes)
    arch = decode(spec, genes)
    blocks = []
    c_prev = arch.stem
    for s, (st, sa) in enumerate(zip(spec.stages, arch.stages)):
        hidden = sa.expand * sa.width
        offset = (st.kernels[-1] - sa.kernel) // 2
        for d in range(sa.depth):
            stride = st.stride if d == 0 else 1
            blocks.append(BlockPlan(
                prefix=f"s{s}.b{d}.", c_in=c_prev, hidden=hidden, kernel=sa.kernel,
                tap_offset=offset, se=se_width(hidden) if st.use_se else 0, c_out=sa.width,
                stride=stride, residual=(stride == 1 and c_prev == sa.width)))
            c_prev = sa.width
    return SubnetView(genes, arch, arch.stem, tuple(blocks), c_prev, arch.head, spec.n_classes)


def subnet_param_count(spec: SpaceSpec, genes: Sequence[int]) -> int:
    return make_view(spec, genes).n_params()


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def effective_weights(params: SupernetParams, view: SubnetView) -> dict[str, tuple[np.ndarray, float]]:
    """Sliced weight matrices scaled by sqrt(max fan-in / used fan-in).

    The rescaling keeps every subnet's per-layer signal variance equal to the
    maximal network's, which a normalisation-free elastic net needs for small
    subnets to train at all.  Biases are used unscaled.
    """
    P = params.tensors
    out = {}
    for name, sl in view.slices().items():
        w = P[name]
        if w.ndim == 1:
            continue
        if name.endswith("dw.w"):
            used, full = sl[0].stop - sl[0].start, w.shape[0]
        else:
            used, full = sl[1].stop, w.shape[1]
        scale = math.sqrt(full / used)
        out[name] = (w[sl] * w.dtype.type(scale), scale)
    return out


def _pw(x, w, b):
    y = x.reshape(-1, x.shape[-1]) @ w.T
    y += b
    return y.reshape(x.shape[:-1] + (w.shape[0],))


def _pw_back(x, w, scale, dy, grads, wname, bname, w_sl, b_sl):
    """Pointwise layer backward: accumulate dW, db into the sliced coordinates; return dx."""
    dy2 = dy.reshape(-1, dy.shape[-1])
    gw = dy2.T @ x.reshape(-1, x.shape[-1])
    if scale != 1.0:
        gw *= scale
    grads[wname][w_sl] += gw
    grads[bname][b_sl] += dy2.sum(axis=0)
    return (dy2 @ w).reshape(dy.shape[:-1] + (w.shape[1],))


@dataclass
class ForwardCache:
    view: SubnetView
    params: SupernetParams
    version: int
    weights: dict
    x: np.ndarray
    stem_pre: np.ndarray
    blocks: list = field(default_factory=list)
    head_in: np.ndarray | None = None
    head_pre: np.ndarray | None = None
    pooled: np.ndarray | None = None


def forward(params: SupernetParams, view: SubnetView, batch: np.ndarray,
            keep_cache: bool = True) -> tuple[np.ndarray, ForwardCache | None]:
    """Logits for a batch already subsampled to ``view.resolution``."""
    if batch.ndim != 2 or batch.shape[1] != view.resolution:
        raise ValueError(f"batch shape {batch.shape} does not match resolution {view.resolution}")
    P = params.tensors
    W = effective_weights(params, view)
    x = batch.astype(params.dtype, copy=False)[:, :, None]
    c0 = view.stem
    stem_pre = _pw(x, W["stem.w"][0], P["stem.b"][:c0])
    h = np.maximum(stem_pre, 0.0)
    cache = ForwardCache(view, params, params.version, W, x, stem_pre) if keep_cache else None
    for bp in view.blocks:
        p, H = bp.prefix, bp.hidden
        h_in = h
        e_pre = _pw(h_in, W[p + "exp.w"][0], P[p + "exp.b"][:H])
        e = np.maximum(e_pre, 0.0)
        pad = bp.kernel // 2
        ep = np.pad(e, ((0, 0), (pad, pad), (0, 0)))
        l_out = (e.shape[1] - 1) // bp.stride + 1
        d_pre = _kernels.dwconv_fwd(ep, W[p + "dw.w"][0], bp.stride, l_out)
        a = np.maximum(d_pre, 0.0)
        se = None
        if bp.se:
            R = bp.se
            m = a.mean(axis=1)
            r_pre = _pw(m, W[p + "se.rw"][0], P[p + "se.rb"][:R])
            r = np.maximum(r_pre, 0.0)
            gate = expit(_pw(r, W[p + "se.ew"][0], P[p + "se.eb"][:H]))
            s_out = a * gate[:, None, :]
            se = (m, r_pre, r, gate)
        else:
            s_out = a
        out = _pw(s_out, W[p + "proj.w"][0], P[p + "proj.b"][:bp.c_out])
        if bp.residual:
            out = out + h_in
        if keep_cache:
            cache.blocks.append((h_in, e_pre, ep, d_pre, a, se, s_out))
        h = out
    hd = view.head
    head_pre = _pw(h, W["head.w"][0], P["head.b"][:hd])
    pooled = np.maximum(head_pre, 0.0).mean(axis=1)
    logits = _pw(pooled, W["cls.w"][0], P["cls.b"])
    if keep_cache:
        cache.head_in, cache.head_pre, cache.pooled = h, head_pre, pooled
    return logits, cache


def backward(view: SubnetView, cache: ForwardCache, dlogits: np.ndarray,
             grads: Grads | None = None) -> Grads:
    """Accumulate parameter gradients into full-shape arrays (zero outside the view)."""
    if cache is None or cache.view.genes != view.genes:
        raise StaleCacheError("cache does not belong to this view")
    params = cache.params
    if cache.version != params.version:
        raise StaleCacheError("parameters changed since the forward pass")
    W = cache.weights
    sl = view.slices()
    if grads is None:
        grads = params.zeros_like()
    dlogits = dlogits.astype(params.dtype, copy=False)

    def pw_back(x, dy, wname, bname):
        w, scale = W[wname]
        return _pw_back(x, w, scale, dy, grads, wname, bname, sl[wname], sl[bname])

    dpooled = pw_back(cache.pooled, dlogits, "cls.w", "cls.b")
    head_pre = cache.head_pre
    L = head_pre.shape[1]
    dhead = np.broadcast_to(dpooled[:, None, :] / L, head_pre.shape) * (head_pre > 0)
    dh = pw_back(cache.head_in, dhead, "head.w", "head.b")
    for bp, (h_in, e_pre, ep, d_pre, a, se, s_out) in zip(reversed(view.blocks),
                                                          reversed(cache.blocks)):
        p = bp.prefix
        dout = dh
        ds = pw_back(s_out, dout, p + "proj.w", p + "proj.b")
        if bp.se:
            m, r_pre, r, gate = se
            da = ds * gate[:, None, :]
            dgate = np.einsum("blc,blc->bc", ds, a)
            dg_pre = dgate * gate * (1.0 - gate)
            dr = pw_back(r, dg_pre, p + "se.ew", p + "se.eb")
            dm = pw_back(m, dr * (r_pre > 0), p + "se.rw", p + "se.rb")
            da = da + dm[:, None, :] / a.shape[1]
        else:
            da = ds
        dd = np.ascontiguousarray(da * (d_pre > 0))
        kw, kscale = W[p + "dw.w"]
        dep, dkw = _kernels.dwconv_bwd(ep, kw, dd, bp.stride)
        grads[p + "dw.w"][sl[p + "dw.w"]] += dkw * kscale
        pad = bp.kernel // 2
        de = dep[:, pad:dep.shape[1] - pad, :] * (e_pre > 0)
        dh_in = pw_back(h_in, de, p + "exp.w", p + "exp.b")
        if bp.residual:
            dh_in = dh_in + dout
        dh = dh_in
    pw_back(cache.x, dh * (cache.stem_pre > 0), "stem.w", "stem.b")
    return grads


def predict(params: SupernetParams, view: SubnetView, inputs: np.ndarray,
            chunk: int = 1024) -> np.ndarray:
    """Logits for full-length inputs (subsampled here), in fixed-size chunks."""
    x = view.subsample(inputs)
    out = [forward(params, view, x[i:i + chunk], keep_cache=False)[0]
           for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)
