#!/usr/bin/env python3
"""Test the cross-modal spatial transformer and its bilinear sampler"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import af_gradcheck
import autodiff as ad
import cga
import cst


def loop_sample(f_x, grid):
    """
    Per output pixel: sum over every source pixel of
    U * max(0, 1 - |x - m|) * max(0, 1 - |y - n|), coordinates in pixels
    """
    n_batch, c, h, w = f_x.shape
    _, ho, wo, _ = grid.shape
    out = np.zeros((n_batch, c, ho, wo))
    for b in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                x = (grid[b, i, j, 0] + 1.0) * (w - 1) / 2.0
                y = (grid[b, i, j, 1] + 1.0) * (h - 1) / 2.0
                for ch in range(c):
                    acc = 0.0
                    for n in range(h):
                        for m in range(w):
                            acc += f_x[b, ch, n, m] * max(0.0, 1 - abs(x - m)) * max(0.0, 1 - abs(y - n))
                    out[b, ch, i, j] = acc
    return out


def cross_modal(rng, c=4, l=3, n=1, size=3):
    params = cga.init_cga(rng, c, l)
    params["cga.lang.b"] = rng.normal(size=c)
    f_x = rng.normal(size=(n, c, size, size))
    proj = cga.project(f_x, rng.normal(size=(n, l)), params)
    return proj, f_x


def test_split_cross_modal():
    rng = np.random.default_rng(0)
    proj, _ = cross_modal(rng, c=64, l=8)
    m1, m2 = cst.split_cross_modal(proj)
    assert m1.shape == (1, 32, 3, 3)
    assert m2.shape == (1, 32, 3, 3)

    proj, _ = cross_modal(rng, c=2, l=2)
    summed = cga.normalized_sum(proj).data
    m1, m2 = cst.split_cross_modal(proj)
    assert np.array_equal(m1.data[:, 0], summed[:, 0])
    assert np.array_equal(m2.data[:, 0], summed[:, 1])

    proj, _ = cross_modal(rng, c=3, l=2)
    with pytest.raises(cst.CSTError):
        cst.split_cross_modal(proj)


def test_localize_identity_init_and_saturation():
    params = cst.init_localizers(2)
    m = ad.Tensor(np.random.default_rng(1).normal(size=(3, 2, 2, 2)))

    t = cst.localize(m, params, "cst.loc1")
    assert np.allclose(t.s1, 1.0, atol=1e-15)
    assert np.allclose(t.s2, 1.0, atol=1e-15)
    assert np.all(t.tx == 0.0)
    assert np.all(t.ty == 0.0)

    params["cst.loc1.b"] = np.array([1000.0, 1000.0, 0.0, 0.0])
    t = cst.localize(m, params, "cst.loc1")
    assert np.all(t.s1 == cst.S_MAX)
    assert np.all(t.tx == 0.0)

    with pytest.raises(cst.CSTError):
        cst.scale_bias(1.0)


def test_affine_grid_examples():
    identity = cst.affine_grid(cst.AffineParams.identity(1), 3, 5).data
    assert np.array_equal(identity[0, :, :, 0], np.tile(cst.base_coords(5), (3, 1)))
    assert np.array_equal(identity[0, :, :, 1], np.tile(cst.base_coords(3)[:, None], (1, 5)))

    zoom = cst.affine_grid(cst.AffineParams.constant([0.5, 0.5, 0.0, 0.0]), 4, 4).data[0]
    for i, j in [(0, 0), (0, 3), (3, 0), (3, 3)]:
        assert np.allclose(np.abs(zoom[i, j]), 0.5, atol=1e-15)

    shifted = cst.affine_grid(cst.AffineParams.constant([1.0, 1.0, 0.5, 0.0]), 4, 4).data
    base = cst.affine_grid(cst.AffineParams.identity(1), 4, 4).data
    assert np.allclose(shifted[..., 0] - base[..., 0], 0.5, atol=1e-15)
    assert np.array_equal(shifted[..., 1], base[..., 1])

    assert cst.base_coords(1).tolist() == [0.0]


def test_identity_sampling_is_bit_exact():
    f_x = np.random.default_rng(2).normal(size=(2, 3, 5, 4))
    grid = cst.affine_grid(cst.AffineParams.identity(2), 5, 4)
    assert np.array_equal(cst.bilinear_sample(f_x, grid).data, f_x)


def test_midpoint_and_exterior_samples():
    f_x = np.array([[[[2.0, 4.0]]]])
    out = cst.bilinear_sample(f_x, np.array([[[[0.0, 0.0]]]])).data
    assert out.reshape(-1)[0] == pytest.approx(3.0, abs=1e-15)

    f_x = np.random.default_rng(3).normal(size=(1, 2, 4, 4))
    grid = np.zeros((1, 4, 4, 2))
    grid[..., 0] = 5.0
    assert np.all(cst.bilinear_sample(f_x, grid).data == 0.0)


def test_sampling_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        c, h, w = rng.integers(1, 5), rng.integers(2, 7), rng.integers(2, 7)
        f_x = rng.normal(size=(1, c, h, w))
        theta = np.concatenate([rng.uniform(0.2, 1.5, size=2), rng.uniform(-1.0, 1.0, size=2)])
        grid = cst.affine_grid(cst.AffineParams.constant(theta), h, w).data
        out = cst.bilinear_sample(f_x, grid).data
        assert np.max(np.abs(out - loop_sample(f_x, grid))) < 1e-12


def test_sampling_matches_loop_oracle_many_points():
    rng = np.random.default_rng(5)
    f_x = rng.normal(size=(1, 2, 3, 5))
    grid = rng.uniform(-1.3, 1.3, size=(1, 20, 50, 2))
    out = cst.bilinear_sample(f_x, grid).data
    assert np.max(np.abs(out - loop_sample(f_x, grid))) < 1e-12


def test_feature_gradient_is_the_adjoint_of_sampling():
    rng = np.random.default_rng(15)
    for _ in range(20):
        f_x = ad.Tensor(rng.normal(size=(2, 3, 5, 4)), trainable=True)
        grid = rng.uniform(-1.2, 1.2, size=(2, 6, 7, 2))
        g = rng.normal(size=(2, 3, 6, 7))

        with ad.GradientTape() as tape:
            out = cst.bilinear_sample(f_x, grid)
            loss = ad.weighted_mean(ad.reshape(out, (-1,)), g.reshape(-1) * g.size)
        grad = ad.backward(tape, loss)[f_x.node_id].data

        # <g, S f> == <S^T g, f> for the linear sampling map S
        assert np.sum(grad * f_x.data) == pytest.approx(np.sum(g * out.data), abs=1e-10)

        reference = np.zeros((2, 5, 4, 3))
        k = cst._corners(grid, 5, 4)
        batch = np.arange(2)[:, None, None]
        g_last = g.transpose(0, 2, 3, 1)
        for dy in (0, 1):
            for dx in (0, 1):
                yi, xi = k["y0"] + dy, k["x0"] + dx
                valid = (xi >= 0) & (xi < 4) & (yi >= 0) & (yi < 5)
                weight = k["wy"][dy] * k["wx"][dx] * valid
                np.add.at(reference, (np.broadcast_to(batch, yi.shape), np.clip(yi, 0, 4), np.clip(xi, 0, 3)),
                          g_last * weight[..., None])
        assert np.allclose(grad, reference.transpose(0, 3, 1, 2), atol=1e-12)


def test_constant_map_and_value_bounds():
    rng = np.random.default_rng(6)
    f_x = np.full((1, 2, 4, 4), 3.25)
    grid = rng.uniform(-1.0, 1.0, size=(1, 4, 4, 2))
    assert np.allclose(cst.bilinear_sample(f_x, grid).data, 3.25, atol=1e-14)

    f_x = rng.normal(size=(1, 3, 4, 4))
    out = cst.bilinear_sample(f_x, grid).data
    lo = f_x.min(axis=(2, 3), keepdims=True)
    hi = f_x.max(axis=(2, 3), keepdims=True)
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)


def test_sampler_errors():
    with pytest.raises(cst.CSTError):
        cst.bilinear_sample(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(cst.CSTError):
        cst.bilinear_sample(np.zeros((2, 2, 3, 3)), np.zeros((1, 3, 3, 2)))


def test_sampler_gradients_wrt_features_and_grid():
    rng = np.random.default_rng(7)
    f_x = ad.Tensor(rng.normal(size=(2, 2, 4, 4)), trainable=True)
    grid = ad.Tensor(rng.uniform(-0.9, 0.9, size=(2, 3, 3, 2)), trainable=True)
    proj_w = rng.normal(size=36)

    def loss_fn():
        out = cst.bilinear_sample(f_x, grid)
        return ad.weighted_mean(ad.reshape(out, (36,)), proj_w)

    report = ad.finite_diff_check(loss_fn, {"F_x": f_x, "grid": grid})
    assert report.passed, report.max_errors
    assert report.checked["grid"] > 0


def test_identity_init_reproduces_input():
    rng = np.random.default_rng(8)
    proj, f_x = cross_modal(rng, c=4, l=3, n=2, size=4)
    params = cst.init_localizers(2)

    e1, e2, transforms = cst.cst_forward(proj, f_x, params, return_transforms=True)
    assert np.array_equal(e1.data, f_x)
    assert np.array_equal(e2.data, f_x)
    assert len(transforms) == 2

    e1, e2 = cst.cst_forward(proj, f_x, params, mode="identity")
    assert np.array_equal(e1.data, f_x)

    with pytest.raises(cst.CSTError):
        cst.cst_forward(proj, f_x, params, mode="rotate")


def test_default_shapes():
    rng = np.random.default_rng(9)
    proj, f_x = cross_modal(rng, c=64, l=128, size=8)
    e1, e2 = cst.cst_forward(proj, f_x, cst.init_localizers(32))
    assert e1.shape == (1, 64, 8, 8)
    assert e2.shape == (1, 64, 8, 8)


def test_composition_of_sub_operations():
    rng = np.random.default_rng(10)
    proj, f_x = cross_modal(rng, c=4, l=3, n=2, size=4)
    params = {k: rng.normal(size=v.shape) for k, v in cst.init_localizers(2).items()}

    e1, e2 = cst.cst_forward(proj, f_x, params)

    m1, m2 = cst.split_cross_modal(proj)
    for m, prefix, e in [(m1, "cst.loc1", e1), (m2, "cst.loc2", e2)]:
        t = cst.localize(m, params, prefix)
        assert np.all(t.s1 > 0) and np.all(t.s1 <= cst.S_MAX)
        assert np.all(np.abs(t.tx) <= 1.0)
        manual = cst.bilinear_sample(f_x, cst.affine_grid(t, 4, 4)).data
        assert np.array_equal(e.data, manual)


def test_transform_depends_on_language():
    rng = np.random.default_rng(11)
    c, l = 4, 3
    # positive projections keep the pooled ReLU active
    cga_params = {k: np.abs(v) for k, v in cga.init_cga(rng, c, l).items()}
    cst_params = {k: rng.normal(size=v.shape) for k, v in cst.init_localizers(c // 2).items()}
    f_x = rng.uniform(0.1, 1.0, size=(1, c, 3, 3))
    v_q = ad.Tensor(rng.uniform(0.1, 1.0, size=(1, l)), trainable=True)

    with ad.GradientTape() as tape:
        proj = cga.project(f_x, v_q, cga_params)
        m1, _ = cst.split_cross_modal(proj)
        y = ad.mean(cst.localize(m1, cst_params, "cst.loc1").theta)

    grads = ad.backward(tape, y)
    assert np.any(grads[v_q.node_id].data != 0.0)


def test_flipped_grid_gradient_fails_gradcheck(monkeypatch, capsys):
    original = cst._bilinear_backward

    def flipped(*args, **kwargs):
        g_src, g_grid = original(*args, **kwargs)
        return g_src, -g_grid

    args = af_gradcheck.parser.parse_args(["--module", "cst"])
    assert af_gradcheck.run(args) == 0
    assert "PASS cst" in capsys.readouterr().out

    monkeypatch.setattr(cst, "_bilinear_backward", flipped)
    assert af_gradcheck.run(args) == 1
    assert "FAIL cst" in capsys.readouterr().out


def test_transform_export_and_overlay(tmp_path):
    transforms = (cst.AffineParams.identity(2), cst.AffineParams.constant([[0.5, 0.5, 0.1, -0.2], [1.0, 1.0, 0.0, 0.0]]))
    path = tmp_path / "transforms.csv"
    cst.export_transforms_csv(str(path), ["a", "b"], transforms)

    lines = path.read_text().splitlines()
    assert lines[0] == "id,branch,s1,s2,tx,ty"
    assert lines[1] == "a,1,1.000000,1.000000,0.000000,0.000000"
    assert lines[3] == "a,2,0.500000,0.500000,0.100000,-0.200000"

    assert cst.transform_box((1.0, 1.0, 0.0, 0.0), 16) == (0.0, 0.0, 15.0, 15.0)

    image = np.zeros((16, 16, 3), dtype=np.uint8)
    overlay = cst.draw_transform_overlay(image, [(1.0, 1.0, 0.0, 0.0), (0.5, 0.5, 0.0, 0.0)], scale=4)
    assert overlay.size == (64, 64)
    assert overlay.getpixel((0, 0)) == (255, 0, 0)


if __name__ == "__main__":
    test_identity_sampling_is_bit_exact()
    test_midpoint_and_exterior_samples()
    test_sampling_matches_loop_oracle()
    print("cst ok")
