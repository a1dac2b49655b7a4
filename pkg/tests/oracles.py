"""Independent loop/brute-force references, written against plain numpy."""

import math

import numpy as np
import torch


def randn(rng, *shape, requires_grad=False):
    return torch.from_numpy(rng.standard_normal(shape)).requires_grad_(requires_grad)


def np_(t):
    return t.detach().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)


def matmul_loop(a, b):
    a, b = np_(a), np_(b)
    m, p = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(p):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_vec(v):
    v = np.asarray(v, dtype=float)
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def softmax_rows(x):
    return np.array([softmax_vec(r) for r in np_(x)])


def mean_loop(x, axis):
    x = np_(x)
    h, w, c = x.shape
    if axis == "height":
        out = np.zeros((1, w, c))
        for j in range(w):
            for k in range(c):
                out[0, j, k] = sum(x[i, j, k] for i in range(h)) / h
    elif axis == "width":
        out = np.zeros((h, 1, c))
        for i in range(h):
            for k in range(c):
                out[i, 0, k] = sum(x[i, j, k] for j in range(w)) / w
    else:
        out = np.zeros((h, w, 1))
        for i in range(h):
            for j in range(w):
                out[i, j, 0] = sum(x[i, j, k] for k in range(c)) / c
    return out


def strip_conv_loop(x, weight, bias, orientation):
    x, weight = np_(x), np_(weight)
    bias = np.zeros(weight.shape[0]) if bias is None else np_(bias)
    h, w, c = x.shape
    co = weight.shape[0]
    out = np.zeros((h, w, co))
    if orientation == "1x1":
        weight = weight[:, :, None]
    k = weight.shape[2]
    r = k // 2
    for i in range(h):
        for j in range(w):
            for o in range(co):
                s = bias[o]
                for ci in range(c):
                    for t in range(k):
                        ii, jj = (i, j + t - r) if orientation == "1xk" else (i + t - r, j)
                        if orientation == "1x1":
                            ii, jj = i, j
                        if 0 <= ii < h and 0 <= jj < w:
                            s += x[ii, jj, ci] * weight[o, ci, t]
                out[i, j, o] = s
    return out


def cosine(a, b):
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return -1.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def topk_sort_oracle(queries, pool, k):
    q, p = np_(queries), np_(pool)
    rows = []
    for qi in q:
        scored = sorted(((cosine(qi, pj), j) for j, pj in enumerate(p)), key=lambda t: (-t[0], t[1]))
        rows.append([j for _, j in scored[:k]])
    return np.array(rows)


def cross_attention_loop(queries, keys, values):
    """For each query row: softmax over keys of q.k/sqrt(d), then weighted sum of value rows."""
    q, k, v = np_(queries), np_(keys), np_(values)
    scale = 1.0 / math.sqrt(q.shape[1])
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [scale * sum(q[i, t] * k[j, t] for t in range(q.shape[1])) for j in range(k.shape[0])]
        w = softmax_vec(logits)
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out


def linear_np(x, lin):
    out = np_(x) @ np_(lin.weight).T
    return out if lin.bias is None else out + np_(lin.bias)


def gelu_np(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def layer_norm_np(x, norm):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + norm.eps) * np_(norm.weight) + np_(norm.bias)


def sigmoid_np(x):
    return 1 / (1 + np.exp(-x))
