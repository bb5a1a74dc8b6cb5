#!/usr/bin/env python3
"""Test cross-modal global attention against explicit loop computations"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import autodiff as ad
import cga


def random_params(rng, c, l):
    params = cga.init_cga(rng, c, l)
    for key in params:
        if key.endswith(".b"):
            params[key] = rng.normal(size=params[key].shape)
    return params


def loop_project(f_x, v_q, params):
    n, c, h, w = f_x.shape
    f_attn = np.zeros((n, c, h, w))
    for b in range(n):
        for o in range(c):
            for i in range(h):
                for j in range(w):
                    acc = params["cga.proj.b"][o]
                    for k in range(c):
                        acc += params["cga.proj.w"][o, k] * f_x[b, k, i, j]
                    f_attn[b, o, i, j] = acc

    v_attn = np.zeros((n, c))
    for b in range(n):
        for o in range(c):
            acc = params["cga.lang.b"][o]
            for k in range(v_q.shape[1]):
                acc += v_q[b, k] * params["cga.lang.w"][k, o]
            v_attn[b, o] = acc
    return f_attn, v_attn


def loop_conv1x1(x, w, b):
    n, c, h, wd = x.shape
    out = np.zeros((n, w.shape[0], h, wd))
    for s in range(n):
        for o in range(w.shape[0]):
            for i in range(h):
                for j in range(wd):
                    out[s, o, i, j] = b[o] + sum(w[o, k] * x[s, k, i, j] for k in range(c))
    return out


def loop_query(f_attn, v_attn, params):
    n, c, h, w = f_attn.shape
    summed = np.zeros_like(f_attn)
    for s in range(n):
        v_norm = math.sqrt(sum(x * x for x in v_attn[s]))
        for i in range(h):
            for j in range(w):
                f_norm = math.sqrt(sum(f_attn[s, k, i, j] ** 2 for k in range(c)))
                for k in range(c):
                    x = f_attn[s, k, i, j] / f_norm + v_attn[s, k] / v_norm
                    summed[s, k, i, j] = max(x, 0.0)
    return loop_conv1x1(summed, params["cga.query.w"], params["cga.query.b"])


def loop_attend(q, f_attn, f_x, params):
    n, c, h, w = f_x.shape
    value = loop_conv1x1(f_x, params["cga.value.w"], params["cga.value.b"])
    locations = [(i, j) for i in range(h) for j in range(w)]
    out = np.zeros_like(f_x)

    for s in range(n):
        for (pi, pj) in locations:
            scores = []
            for (ki, kj) in locations:
                scores.append(sum(q[s, k, pi, pj] * f_attn[s, k, ki, kj] for k in range(c)) / math.sqrt(c))
            top = max(scores)
            e = [math.exp(x - top) for x in scores]
            total = sum(e)
            for k in range(c):
                acc = 0.0
                for weight, (ki, kj) in zip(e, locations):
                    acc += weight / total * value[s, k, ki, kj]
                out[s, k, pi, pj] = acc + f_x[s, k, pi, pj]
    return out


def test_project_shapes_and_zero_input():
    rng = np.random.default_rng(0)
    params = cga.init_cga(rng, 64, 128)
    proj = cga.project(np.zeros((1, 64, 8, 8)), rng.normal(size=(1, 128)), params)

    assert proj.f_attn.shape == (1, 64, 8, 8)
    assert proj.v_attn.shape == (1, 64)
    assert proj.spatial == (8, 8)
    assert np.all(proj.f_attn.data == 0.0)


def test_project_channel_mismatch():
    params = cga.init_cga(np.random.default_rng(0), 4, 6)
    with pytest.raises(cga.CGAError):
        cga.project(np.zeros((1, 5, 2, 2)), np.zeros((1, 6)), params)
    with pytest.raises(cga.CGAError):
        cga.project(np.zeros((1, 4, 2, 2)), np.zeros((1, 7)), params)


def test_project_query_attend_match_loops():
    rng = np.random.default_rng(1)
    c, l = 4, 5
    params = random_params(rng, c, l)
    f_x = rng.normal(size=(2, c, 2, 3))
    v_q = rng.normal(size=(2, l))

    proj = cga.project(f_x, v_q, params)
    f_attn, v_attn = loop_project(f_x, v_q, params)
    assert np.max(np.abs(proj.f_attn.data - f_attn)) < 1e-12
    assert np.max(np.abs(proj.v_attn.data - v_attn)) < 1e-12

    q = cga.query(proj, params)
    q_loop = loop_query(f_attn, v_attn, params)
    assert np.max(np.abs(q.data - q_loop)) < 1e-12

    attended, weights = cga.attend(q, proj, f_x, params)
    assert np.max(np.abs(attended.data - loop_attend(q_loop, f_attn, f_x, params))) < 1e-12
    assert weights.shape == (2, 6, 6)


def test_attend_small_case_matches_loops():
    rng = np.random.default_rng(2)
    params = random_params(rng, 2, 3)
    f_x = rng.normal(size=(1, 2, 2, 2))

    attended, proj, _ = cga.cga_forward(f_x, rng.normal(size=(1, 3)), params)
    q = cga.query(proj, params).data
    expected = loop_attend(q, proj.f_attn.data, f_x, params)
    assert np.max(np.abs(attended.data - expected)) < 1e-12


def test_zero_projection_gives_zero_query():
    params = cga.init_cga(np.random.default_rng(3), 3, 3)
    proj = cga.CrossModalProjection(f_attn=ad.Tensor(np.zeros((1, 3, 2, 2))), v_attn=ad.Tensor(np.zeros((1, 3))))
    assert np.all(cga.query(proj, params).data == 0.0)


def test_cancelling_projection_leaves_only_the_bias():
    rng = np.random.default_rng(4)
    params = random_params(rng, 3, 3)
    v = rng.normal(size=(1, 3))
    f = -np.broadcast_to(v[:, :, None, None], (1, 3, 2, 2)).copy()
    proj = cga.CrossModalProjection(f_attn=ad.Tensor(f), v_attn=ad.Tensor(v))

    assert np.max(np.abs(cga.normalized_sum(proj).data)) < 1e-15

    q = cga.query(proj, params).data
    expected = np.broadcast_to(params["cga.query.b"][None, :, None, None], q.shape)
    assert np.allclose(q, expected, atol=1e-15)


def test_constant_keys_give_uniform_attention():
    rng = np.random.default_rng(5)
    params = random_params(rng, 3, 3)
    f_x = rng.normal(size=(1, 3, 2, 2))
    const = np.broadcast_to(rng.normal(size=(1, 3, 1, 1)), (1, 3, 2, 2)).copy()
    proj = cga.CrossModalProjection(f_attn=ad.Tensor(const), v_attn=ad.Tensor(np.ones((1, 3))))

    attended, weights = cga.attend(ad.Tensor(const), proj, f_x, params)
    assert np.allclose(weights, 0.25, atol=1e-15)

    value = loop_conv1x1(f_x, params["cga.value.w"], params["cga.value.b"])
    expected = value.mean(axis=(2, 3), keepdims=True) + f_x
    assert np.allclose(attended.data, expected, atol=1e-12)


def test_single_location_adds_value_to_input():
    rng = np.random.default_rng(6)
    params = random_params(rng, 4, 2)
    f_x = rng.normal(size=(3, 4, 1, 1))

    attended, _, weights = cga.cga_forward(f_x, rng.normal(size=(3, 2)), params)
    value = loop_conv1x1(f_x, params["cga.value.w"], params["cga.value.b"])
    assert np.all(weights == 1.0)
    assert np.allclose(attended.data, value + f_x, atol=1e-14)


def test_weights_are_distributions_and_output_is_convex():
    rng = np.random.default_rng(7)
    params = random_params(rng, 4, 3)
    f_x = rng.normal(size=(2, 4, 3, 3)) * 5
    attended, _, weights = cga.cga_forward(f_x, rng.normal(size=(2, 3)), params)

    assert np.all(weights >= 0.0)
    assert np.max(np.abs(weights.sum(axis=-1) - 1.0)) < 1e-12

    value = loop_conv1x1(f_x, params["cga.value.w"], params["cga.value.b"])
    mixed = attended.data - f_x
    lo = value.min(axis=(2, 3), keepdims=True)
    hi = value.max(axis=(2, 3), keepdims=True)
    assert np.all(mixed >= lo - 1e-12)
    assert np.all(mixed <= hi + 1e-12)


def test_location_permutation_equivariance():
    rng = np.random.default_rng(8)
    params = random_params(rng, 3, 2)
    f_x = rng.normal(size=(1, 3, 1, 6))
    v_q = rng.normal(size=(1, 2))
    perm = rng.permutation(6)

    out, _, _ = cga.cga_forward(f_x, v_q, params)
    out_perm, _, _ = cga.cga_forward(f_x[..., perm], v_q, params)
    assert np.allclose(out.data[..., perm], out_perm.data, atol=1e-12)


def test_uniform_mode():
    rng = np.random.default_rng(9)
    params = random_params(rng, 2, 2)
    f_x = rng.normal(size=(1, 2, 2, 2))

    attended, _, weights = cga.cga_forward(f_x, rng.normal(size=(1, 2)), params, mode="uniform")
    assert np.all(weights == 0.25)
    value = loop_conv1x1(f_x, params["cga.value.w"], params["cga.value.b"])
    assert np.allclose(attended.data, value.mean(axis=(2, 3), keepdims=True) + f_x, atol=1e-12)

    with pytest.raises(cga.CGAError):
        cga.cga_forward(f_x, rng.normal(size=(1, 2)), params, mode="local")


def test_cga_gradients():
    rng = np.random.default_rng(10)
    params = {k: ad.Tensor(v, trainable=True) for k, v in random_params(rng, 3, 2).items()}
    f_x = ad.Tensor(rng.normal(size=(2, 3, 2, 2)), trainable=True)
    v_q = ad.Tensor(rng.normal(size=(2, 2)), trainable=True)
    proj_w = rng.normal(size=24)

    def loss_fn():
        attended, _, _ = cga.cga_forward(f_x, v_q, params)
        return ad.weighted_mean(ad.reshape(attended, (24,)), proj_w)

    report = ad.finite_diff_check(loss_fn, {"F_x": f_x, "v_q": v_q, **params})
    assert report.passed, report.max_errors


def test_export_attention_csv(tmp_path):
    weights = np.full((1, 4, 4), 0.25)
    path = tmp_path / "attention.csv"
    cga.export_attention_csv(str(path), ["s00000_q0"], weights, (2, 2))

    lines = path.read_text().splitlines()
    assert lines[0] == "id,query_row,query_col,k0_0,k0_1,k1_0,k1_1"
    assert len(lines) == 5
    assert lines[4].startswith("s00000_q0,1,1,0.25")


if __name__ == "__main__":
    test_project_query_attend_match_loops()
    test_single_location_adds_value_to_input()
    print("cga ok")
