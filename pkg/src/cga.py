"""
Cross-modal global attention: a language-guided query attends over
every spatial location of the visual feature map.
"""
import math
from dataclasses import dataclass

import numpy as np

import autodiff as ad


NORM_EPS = 1e-12
MODES = ("full", "uniform")


class CGAError(ValueError):
    pass


@dataclass
class CrossModalProjection:
    f_attn: ad.Tensor   # N×C×H×W
    v_attn: ad.Tensor   # N×C

    @property
    def channels(self):
        return self.f_attn.shape[1]

    @property
    def spatial(self):
        return self.f_attn.shape[2], self.f_attn.shape[3]

    def v_attn_map(self):
        h, w = self.spatial
        return ad.expand_spatial(self.v_attn, h, w)


def init_cga(rng, channels, lang_dim):
    def w(fan_in, *shape):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    return {
        "cga.proj.w": w(channels, channels, channels),
        "cga.proj.b": np.zeros(channels),
        "cga.lang.w": w(lang_dim, lang_dim, channels),
        "cga.lang.b": np.zeros(channels),
        "cga.query.w": w(channels, channels, channels),
        "cga.query.b": np.zeros(channels),
        "cga.value.w": w(channels, channels, channels),
        "cga.value.b": np.zeros(channels),
    }


def project(f_x, v_q, params):
    """
    F_attn = Conv1x1(F_x), V_attn = FC(v_q)
    """
    f_x, v_q = ad.as_tensor(f_x), ad.as_tensor(v_q)
    c = f_x.shape[1]
    proj_w, lang_w = params["cga.proj.w"], params["cga.lang.w"]

    if proj_w.shape != (c, c):
        raise CGAError(f"channel mismatch: cga.proj.w is {list(proj_w.shape)}, feature map has {c} channels")
    if lang_w.shape != (v_q.shape[1], c):
        raise CGAError(f"channel mismatch: cga.lang.w is {list(lang_w.shape)}, expected {[v_q.shape[1], c]}")

    f_attn = ad.conv1x1(f_x, proj_w, params["cga.proj.b"])
    v_attn = ad.linear(v_q, lang_w, params["cga.lang.b"])
    return CrossModalProjection(f_attn=f_attn, v_attn=v_attn)


def normalized_sum(proj):
    """
    l2_normalize(F_attn) + l2_normalize(V_attn broadcast), both along the
    channel axis (per location for F_attn)
    """
    h, w = proj.spatial
    f_unit = ad.l2_normalize(proj.f_attn, axis=1, eps=NORM_EPS)
    v_unit = ad.l2_normalize(proj.v_attn, axis=1, eps=NORM_EPS)
    return ad.add(f_unit, ad.expand_spatial(v_unit, h, w))


def query(proj, params):
    return ad.conv1x1(ad.relu(normalized_sum(proj)), params["cga.query.w"], params["cga.query.b"])


def attend(q_attn, proj, f_x, params, uniform=False):
    """
    softmax(Q F_attn^T / sqrt(C)) V + F_x over P = H*W locations.
    Softmax runs over key locations (rows sum to 1).

    @return (attended N×C×H×W Tensor, weights N×P×P ndarray)
    """
    f_x = ad.as_tensor(f_x)
    n, c, h, w = f_x.shape
    p = h * w

    value = ad.conv1x1(f_x, params["cga.value.w"], params["cga.value.b"])

    if uniform:
        weights = ad.Tensor(np.full((n, p, p), 1.0 / p))
    else:
        q = ad.transpose(ad.reshape(q_attn, (n, c, p)), (0, 2, 1))
        k = ad.reshape(proj.f_attn, (n, c, p))
        scores = ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(c))
        weights = ad.softmax(scores, axis=-1)

    v = ad.transpose(ad.reshape(value, (n, c, p)), (0, 2, 1))
    out = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1)), (n, c, h, w))

    return ad.add(out, f_x), weights.data


def cga_forward(f_x, v_q, params, mode="full"):
    """
    project -> query -> attend

    @return (attended, proj, weights)
    """
    if mode not in MODES:
        raise CGAError(f"unknown CGA mode: {mode}")

    proj = project(f_x, v_q, params)
    if mode == "uniform":
        attended, weights = attend(None, proj, f_x, params, uniform=True)
    else:
        attended, weights = attend(query(proj, params), proj, f_x, params)

    return attended, proj, weights


def export_attention_csv(path, ids, weights, spatial):
    """
    One row per sample and query location: id, query_row, query_col,
    then the H×W attention map flattened row-major.
    """
    h, w = spatial
    with open(path, "w", encoding="utf-8") as f:
        header = ["id", "query_row", "query_col"] + [f"k{r}_{c}" for r in range(h) for c in range(w)]
        f.write(",".join(header) + "\n")

        for sample_id, sample_weights in zip(ids, weights):
            for qi, row in enumerate(sample_weights):
                values = ",".join(f"{x:.6g}" for x in row)
                f.write(f"{sample_id},{qi // w},{qi % w},{values}\n")
