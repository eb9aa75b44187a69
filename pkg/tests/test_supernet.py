import json

import numpy as np
import pytest

from _fd import ce_case, check_param_grads, smd_case
from desknas.distill import DistillConfig, smd_losses, softmax_xent
from desknas.space import sample_max, sample_min, sample_random
from desknas.standalone import slice_standalone
from desknas.supernet import (StaleCacheError, SupernetParams, backward, forward, init_supernet,
                              make_view, param_shapes, predict, subsample_index)
from desknas.train import sample_sandwich


def test_init_deterministic(desk_spec):
    a, b = init_supernet(desk_spec, 3), init_supernet(desk_spec, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    assert not np.array_equal(a["head.w"], init_supernet(desk_spec, 4)["head.w"])


def test_shapes(desk_spec):
    shapes = param_shapes(desk_spec)
    assert shapes["s2.b2.proj.w"] == (48, 6 * 48)
    assert shapes["s2.b0.exp.w"] == (6 * 48, 32)
    assert shapes["s0.b0.dw.w"] == (5, 6 * 16)
    assert "s0.b0.se.rw" not in shapes and "s1.b0.se.rw" in shapes


def test_init_variance(desk_spec):
    """Per-tensor sample variance within 20% of the gain / fan_in law, pooled to >= 1e4 entries."""
    relu_fed = ("stem.w", "exp.w", "dw.w", "se.rw", "head.w")
    shapes = param_shapes(desk_spec)
    most = max(int(np.ceil(1e4 / np.prod(v))) for v in shapes.values() if len(v) == 2)
    params = [init_supernet(desk_spec, s) for s in range(most)]
    for name, shape in shapes.items():
        if len(shape) == 1:
            assert all(not p[name].any() for p in params[:2])
            continue
        fan_in = shape[0] if name.endswith("dw.w") else shape[1]
        target = (2.0 if name.endswith(relu_fed) else 1.0) / fan_in
        need = int(np.ceil(1e4 / np.prod(shape)))
        pooled = np.concatenate([p[name].ravel() for p in params[:need]])
        assert pooled.size >= 1e4
        assert abs(pooled.var() / target - 1) < 0.2, name


def test_max_view_covers_everything(desk_spec):
    shapes = param_shapes(desk_spec)
    masks = make_view(desk_spec, sample_max(desk_spec)).mask(shapes)
    assert all(m.all() for m in masks.values())


def test_kernel_center_crop(desk_spec):
    genes = list(sample_max(desk_spec))
    genes[2 + 2] = 0  # stage 0 kernel -> 3 (max 5)
    view = make_view(desk_spec, genes)
    taps = view.slices()["s0.b0.dw.w"][0]
    assert list(range(taps.start, taps.stop)) == [1, 2, 3]


def test_min_view_nested(desk_spec, rng):
    shapes = param_shapes(desk_spec)
    mn = make_view(desk_spec, sample_min(desk_spec)).mask(shapes)
    for _ in range(50):
        other = make_view(desk_spec, sample_random(desk_spec, rng))
        om = other.mask(shapes)
        used = other.slices()
        for name in make_view(desk_spec, sample_min(desk_spec)).slices():
            if name in used:
                assert not (mn[name] & ~om[name]).any(), name


def test_subsample_index():
    np.testing.assert_array_equal(subsample_index(32, 16), np.arange(16) * 2)
    np.testing.assert_array_equal(subsample_index(32, 24), (np.arange(24) * 32) // 24)
    np.testing.assert_array_equal(subsample_index(32, 32), np.arange(32))


def test_zero_input_zero_logits(desk_spec, rng):
    params = init_supernet(desk_spec, 0)
    view = make_view(desk_spec, sample_random(desk_spec, rng))
    lg, _ = forward(params, view, np.zeros((3, view.resolution)))
    assert not lg.any()


def test_forward_shape_errors(desk_spec):
    params = init_supernet(desk_spec, 0)
    view = make_view(desk_spec, sample_min(desk_spec))
    with pytest.raises(ValueError):
        forward(params, view, np.zeros((2, 32)))


def test_forward_golden_and_deterministic(desk_spec):
    params = init_supernet(desk_spec, 0)
    view = make_view(desk_spec, sample_max(desk_spec))
    x = np.random.default_rng(0).normal(size=(2, 32))
    a = forward(params, view, x)[0]
    b = forward(params, view, x)[0]
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a[0], GOLDEN_MAX_LOGITS, rtol=1e-9, atol=1e-12)


def test_backward_zero_dlogits(tiny_spec, rng):
    params = init_supernet(tiny_spec, 0)
    view = make_view(tiny_spec, sample_random(tiny_spec, rng))
    lg, c = forward(params, view, rng.normal(size=(2, view.resolution)))
    g = backward(view, c, np.zeros_like(lg))
    assert all(not v.any() for v in g.values())


def test_stale_cache(tiny_spec, rng):
    params = init_supernet(tiny_spec, 0)
    v1 = make_view(tiny_spec, sample_min(tiny_spec))
    v2 = make_view(tiny_spec, sample_max(tiny_spec))
    lg, c = forward(params, v1, rng.normal(size=(2, v1.resolution)))
    with pytest.raises(StaleCacheError):
        backward(v2, c, lg)
    params.version += 1
    with pytest.raises(StaleCacheError):
        backward(v1, c, lg)


@pytest.mark.parametrize("seed", range(20))
def test_fd_cross_entropy(tiny_spec, seed):
    params, f, grads, view = ce_case(tiny_spec, seed)
    assert params.n_params() <= 500
    worst, checked, _ = check_param_grads(params, f, grads)
    assert checked > 50
    assert worst <= 1e-4


def test_fd_configs_cover_every_layer(tiny_spec):
    views = [ce_case(tiny_spec, s)[3] for s in range(20)]
    blocks = [b for v in views for b in v.blocks]
    assert any(b.residual for b in blocks)
    assert any(b.se for b in blocks)
    assert any(b.stride == 2 for b in blocks)
    assert any(b.kernel == 1 for b in blocks) and any(b.kernel == 5 for b in blocks)


@pytest.mark.parametrize("mode", ["smd", "inplace"])
@pytest.mark.parametrize("loss", ["kd", "dkd"])
def test_fd_sandwich_aggregate(tiny_spec, mode, loss):
    cfg = DistillConfig(mode=mode, loss=loss, tau=1.5)
    params, f, grads = smd_case(tiny_spec, 7, cfg)
    worst, checked, _ = check_param_grads(params, f, grads)
    assert checked > 50 and worst <= 1e-4


def test_gradient_support_within_view(desk_spec, rng):
    params = init_supernet(desk_spec, 1)
    shapes = param_shapes(desk_spec)
    for _ in range(10):
        view = make_view(desk_spec, sample_random(desk_spec, rng))
        lg, c = forward(params, view, rng.normal(size=(4, view.resolution)))
        g = backward(view, c, rng.normal(size=lg.shape))
        mask = view.mask(shapes)
        for name in g:
            assert not g[name][~mask[name]].any(), name


def test_locality_over_sandwich_samples(desk_spec):
    """Each L_sub_i only reaches subnet i's coordinates; 50 sandwich draws."""
    rng = np.random.default_rng(5)
    params = init_supernet(desk_spec, 2)
    shapes = param_shapes(desk_spec)
    cfg = DistillConfig()
    x = rng.normal(size=(8, 32))
    y = rng.integers(8, size=8)
    for _ in range(50):
        genes = sample_sandwich(desk_spec, rng, 2)
        views = [make_view(desk_spec, g) for g in genes]
        outs = [forward(params, v, v.subsample(x)) for v in views]
        _, dls = smd_losses([o[0] for o in outs], y, cfg)
        for v, (_, c), dl in zip(views[:-1], outs[:-1], dls[:-1]):
            g = backward(v, c, dl)
            mask = v.mask(shapes)
            assert all(not g[n][~mask[n]].any() for n in g)


def test_standalone_equivalence(desk_spec):
    rng = np.random.default_rng(9)
    params = init_supernet(desk_spec, 4)
    for t in params.tensors.values():
        if t.ndim == 1:
            t[:] = rng.normal(0, 0.1, size=t.shape)
    worst = 0.0
    for _ in range(100):
        view = make_view(desk_spec, sample_random(desk_spec, rng))
        net = slice_standalone(params, view)
        for _ in range(10):
            x = view.subsample(rng.normal(size=(4, 32)))
            worst = max(worst, np.abs(net.forward(x) - forward(params, view, x)[0]).max())
    assert worst <= 1e-6


def test_standalone_param_counts(desk_spec):
    params = init_supernet(desk_spec, 0)
    big = slice_standalone(params, sample_max(desk_spec))
    small = slice_standalone(params, sample_min(desk_spec))
    assert big.n_params() == params.n_params()
    assert small.n_params() < big.n_params()


def test_predict_matches_forward(desk_spec, rng):
    params = init_supernet(desk_spec, 0)
    view = make_view(desk_spec, sample_random(desk_spec, rng))
    x = rng.normal(size=(10, 32))
    np.testing.assert_allclose(predict(params, view, x, chunk=3),
                               forward(params, view, view.subsample(x))[0], atol=1e-12)


def test_save_load_round_trip(desk_spec, tmp_path):
    params = init_supernet(desk_spec, 0, dtype=np.float32)
    params.save(tmp_path / "w.json", meta={"seed": 0})
    back = SupernetParams.load(tmp_path / "w.json", desk_spec, dtype=np.float32)
    assert all(np.array_equal(params[k], back[k]) for k in params.tensors)
    params.save(tmp_path / "w2.json", meta={"seed": 0})
    assert (tmp_path / "w.bin").read_bytes() == (tmp_path / "w2.bin").read_bytes()
    man = json.loads((tmp_path / "w.json").read_text())
    assert man["tensors"][0]["dtype"] == "f32" and len(man["space_hash"]) == 16


def test_load_rejects_other_space(desk_spec, tiny_spec, tmp_path):
    init_supernet(tiny_spec, 0).save(tmp_path / "w.json")
    with pytest.raises(ValueError, match="space"):
        SupernetParams.load(tmp_path / "w.json", desk_spec)


def test_load_rejects_corrupt_blob(tiny_spec, tmp_path):
    init_supernet(tiny_spec, 0).save(tmp_path / "w.json")
    raw = bytearray((tmp_path / "w.bin").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "w.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        SupernetParams.load(tmp_path / "w.json", tiny_spec)


def test_shape_check(tiny_spec):
    p = init_supernet(tiny_spec, 0)
    p.tensors["head.w"] = p.tensors["head.w"][:, :1]
    with pytest.raises(ValueError):
        SupernetParams(tiny_spec, p.tensors)


GOLDEN_MAX_LOGITS = [  # recorded once (seed 0 init, rng(0) batch)
    -0.04701017902967655, 0.038473631846816195, -0.1075902904619814, 0.08621861902182157,
    -0.16333389988201397, 0.09225690421468294, 0.014504083591629996, 0.04283236691888884]
