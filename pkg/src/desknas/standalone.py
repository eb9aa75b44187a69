"""Dense copies of single subnets.

``StandaloneNet.forward`` is written independently of the supernet engine
(channels-first layout, einsum, explicit sliding windows) so that it can
serve as an equivalence oracle for weight slicing.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .space import SpaceSpec, StageSpec
from .supernet import SubnetView, SupernetParams, effective_weights, make_view


def collapse_space(spec: SpaceSpec, view: SubnetView) -> SpaceSpec:
    """A space containing only the architecture of ``view``."""
    arch = view.arch
    stages = tuple(
        StageSpec((sa.width,), (sa.depth,), (sa.kernel,), (sa.expand,), st.use_se, st.stride)
        for st, sa in zip(spec.stages, arch.stages))
    return SpaceSpec(stages, (arch.stem,), (arch.head,), (arch.resolution,), spec.n_classes)


def slice_params(params: SupernetParams, view: SubnetView) -> SupernetParams:
    """Copy the subnet's coordinates into dense tensors for the collapsed space.

    Fan-in rescaling is baked into the copied weights; in the collapsed space
    every layer is used at full width, so its own rescaling factor is 1.
    """
    small = collapse_space(params.spec, view)
    eff = effective_weights(params, view)
    tensors = {name: eff[name][0] if name in eff else params.tensors[name][sl].copy()
               for name, sl in view.slices().items()}
    return SupernetParams(small, tensors)


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class StandaloneNet:
    def __init__(self, params: SupernetParams, view: SubnetView):
        self.view = view
        self.params = slice_params(params, view)
        self.spec = self.params.spec

    @property
    def t(self):
        return self.params.tensors

    def n_params(self) -> int:
        return self.params.n_params()

    def forward(self, x: np.ndarray) -> np.ndarray:
        t = self.t
        h = np.einsum("oc,bcl->bol", t["stem.w"], x[:, None, :]) + t["stem.b"][None, :, None]
        h = _relu(h)
        for st, sa, s in zip(self.spec.stages, self.view.arch.stages, range(len(self.spec.stages))):
            for d in range(sa.depth):
                p = f"s{s}.b{d}."
                stride = st.stride if d == 0 else 1
                e = _relu(np.einsum("hc,bcl->bhl", t[p + "exp.w"], h) + t[p + "exp.b"][None, :, None])
                pad = sa.kernel // 2
                win = sliding_window_view(np.pad(e, ((0, 0), (0, 0), (pad, pad))), sa.kernel, axis=2)
                a = _relu(np.einsum("bhlk,kh->bhl", win[:, :, ::stride, :], t[p + "dw.w"]))
                if st.use_se:
                    z = _relu(a.mean(axis=2) @ t[p + "se.rw"].T + t[p + "se.rb"])
                    a = a * _sigmoid(z @ t[p + "se.ew"].T + t[p + "se.eb"])[:, :, None]
                out = np.einsum("oh,bhl->bol", t[p + "proj.w"], a) + t[p + "proj.b"][None, :, None]
                if stride == 1 and out.shape[1] == h.shape[1]:
                    out = out + h
                h = out
        feat = _relu(np.einsum("oc,bcl->bol", t["head.w"], h) + t["head.b"][None, :, None])
        return feat.mean(axis=2) @ t["cls.w"].T + t["cls.b"]


def slice_standalone(params: SupernetParams, view_or_genes: SubnetView | Sequence[int]) -> StandaloneNet:
    view = view_or_genes
    if not isinstance(view, SubnetView):
        view = make_view(params.spec, view_or_genes)
    return StandaloneNet(params, view)
