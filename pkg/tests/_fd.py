"""Finite-difference harness for the supernet engine (shared by unit and acceptance tests)."""

import numpy as np

from desknas.distill import DistillConfig, pair_loss, smd_losses, softmax_xent
from desknas.space import sample_max, sample_min, sample_random
from desknas.supernet import backward, forward, init_supernet, make_view

H = 1e-4


def relu_pattern(cache):
    parts = [cache.stem_pre > 0, cache.head_pre > 0]
    for (_, e_pre, _, d_pre, _, se, _) in cache.blocks:
        parts += [e_pre > 0, d_pre > 0]
        if se is not None:
            parts.append(se[1] > 0)
    return np.concatenate([p.ravel() for p in parts])


def random_params(spec, seed):
    """Initialised weights with non-zero biases so no activation sits exactly on a kink."""
    rng = np.random.default_rng(seed)
    params = init_supernet(spec, seed)
    for t in params.tensors.values():
        if t.ndim == 1:
            t[:] = rng.normal(0, 0.3, size=t.shape)
    return params


def check_param_grads(params, loss_and_patterns, grads, h=H, per_tensor=None, seed=0):
    """Compare analytic ``grads`` with central differences of ``loss_and_patterns``.

    ``loss_and_patterns()`` returns (loss, rectifier pattern).  Coordinates whose
    +-h perturbation flips any rectifier are skipped (the loss is not smooth there).
    ``per_tensor`` limits the check to that many random coordinates of each tensor,
    preferring coordinates with a non-zero analytic gradient.
    Returns (worst relative error, checked, skipped).
    """
    _, base = loss_and_patterns()
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for name, t in params.tensors.items():
        coords = list(np.ndindex(t.shape))
        if per_tensor is not None:
            live = [c for c in coords if grads[name][c] != 0] or coords
            pick = rng.choice(len(live), size=min(per_tensor, len(live)), replace=False)
            coords = [live[i] for i in pick]
        for idx in coords:
            o = t[idx]
            t[idx] = o + h
            lp, pp = loss_and_patterns()
            t[idx] = o - h
            lm, pm = loss_and_patterns()
            t[idx] = o
            if not (np.array_equal(pp, base) and np.array_equal(pm, base)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            a = grads[name][idx]
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-6))
            checked += 1
    return worst, checked, skipped


def ce_case(spec, seed, batch=2):
    """Cross-entropy through one random subnet."""
    rng = np.random.default_rng(seed)
    params = random_params(spec, seed)
    view = make_view(spec, sample_random(spec, rng))
    x = view.subsample(rng.normal(size=(batch, spec.max_resolution)))
    y = rng.integers(spec.n_classes, size=batch)
    lg, cache = forward(params, view, x)
    grads = backward(view, cache, softmax_xent(lg, y)[1])

    def f():
        lg, c = forward(params, view, x)
        return softmax_xent(lg, y)[0], relu_pattern(c)

    return params, f, grads, view


def smd_case(spec, seed, cfg: DistillConfig, batch=2):
    """Sandwich loss over (min, random, max) with detached teacher logits."""
    rng = np.random.default_rng(seed)
    params = random_params(spec, seed)
    genes = sorted([sample_min(spec), sample_random(spec, rng), sample_max(spec)],
                   key=lambda g: make_view(spec, g).n_params())
    views = [make_view(spec, g) for g in genes]
    x_full = rng.normal(size=(batch, spec.max_resolution))
    y = rng.integers(spec.n_classes, size=batch)
    outs = [forward(params, v, v.subsample(x_full)) for v in views]
    teachers = [o[0].copy() for o in outs]
    _, dls = smd_losses(teachers, y, cfg)
    grads = params.zeros_like()
    for v, (_, c), dl in zip(views, outs, dls):
        backward(v, c, dl, grads)
    k = len(views)

    def f():
        pats, total = [], 0.0
        for i, v in enumerate(views):
            lg, c = forward(params, v, v.subsample(x_full))
            pats.append(relu_pattern(c))
            if i == k - 1:
                total += softmax_xent(lg, y)[0]
            else:
                tj = range(i + 1, k) if cfg.mode == "smd" else (k - 1,)
                total += sum(pair_loss(teachers[j], lg, y, cfg)[0] for j in tj) / len(tj)
        return total, np.concatenate(pats)

    return params, f, grads
