"""Dense reference implementation of the memory equations.

Written with explicit per-row loops and no diffmath, so it can check
:mod:`flmn.memnet` independently. Unbatched only.
"""
from __future__ import annotations

import math

import numpy as np


def cosine(k, row, eps):
    nk = math.sqrt(sum(x * x for x in k))
    nr = math.sqrt(sum(x * x for x in row))
    return float(np.dot(k, row)) / ((nk + eps) * (nr + eps))


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def argmin_first(v):
    best = 0
    for i in range(1, len(v)):
        if v[i] < v[best]:
            best = i
    out = np.zeros(len(v))
    out[best] = 1.0
    return out


def usage(w_u_prev, w_wf, w_r, gamma):
    return np.array([gamma * w_u_prev[i] + w_wf[i] + w_r[i] for i in range(len(w_u_prev))])


class DenseMemory:
    """Plain-array memory following the written equations step by step.

    ``split=True`` gives the feature/label memory pair, ``split=False`` the
    single LRUA matrix.
    """

    def __init__(self, rows, width, label_width=None, gamma=0.95, alpha=0.0,
                 init_value=1e-6, eps=1e-8, split=True, usage_fn=usage):
        self.rows, self.gamma, self.eps, self.split = rows, gamma, eps, split
        self.gate = 1.0 / (1.0 + math.exp(-alpha))
        self.usage_fn = usage_fn
        self.Mf = np.full((rows, width), init_value)
        self.Ml = np.full((rows, label_width or width), init_value) if split else None
        self.w_r = np.full(rows, 1.0 / rows)
        self.w_u = np.full(rows, 1.0 / rows)
        self.w_lu = np.zeros(rows)
        self.w_lu[0] = 1.0
        self.w_wf = np.zeros(rows)
        self.w_wl = np.zeros(rows)

    def step(self, key, add_f, add_l=None):
        n = self.rows
        if self.split:
            # label write uses last step's feature write weights
            self.w_wl = self.w_wf.copy()
            Ml = self.Ml.copy()
            for i in range(n):
                Ml[i] = self.Ml[i] + self.w_wl[i] * np.asarray(add_l)
            self.Ml = Ml
        sims = [cosine(key, self.Mf[i], self.eps) for i in range(n)]
        w_r = softmax(sims)
        source = self.Ml if self.split else self.Mf
        r = np.zeros(source.shape[1])
        for i in range(n):
            r += w_r[i] * source[i]
        w_wf = np.array([self.gate * self.w_r[i] + (1 - self.gate) * self.w_lu[i] for i in range(n)])
        Mf = self.Mf.copy()
        for i in range(n):
            Mf[i] = self.Mf[i] * (1 - self.w_lu[i])
            Mf[i] = Mf[i] + w_wf[i] * np.asarray(add_f)
        w_u = self.usage_fn(self.w_u, w_wf, w_r, self.gamma)
        self.Mf, self.w_r, self.w_wf, self.w_u = Mf, w_r, w_wf, w_u
        self.w_lu = argmin_first(w_u)
        return r

    def snapshot(self):
        snap = {"M_f": self.Mf.copy(), "w_r": self.w_r.copy(), "w_u": self.w_u.copy(),
                "w_lu": self.w_lu.copy(), "w_wf": self.w_wf.copy()}
        if self.split:
            snap["M_l"] = self.Ml.copy()
            snap["w_wl"] = self.w_wl.copy()
        return snap


def dense_lstm_step(x, h, c, W, b):
    """One LSTM step with per-gate weight dicts over ``[x, h]``.

    Gates are computed one unit at a time.
    """
    z = np.concatenate([x, h])
    H = len(h)
    h_new = np.zeros(H)
    c_new = np.zeros(H)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    for j in range(H):
        i_g = sig(float(z @ W["i"][:, j]) + b["i"][j])
        f_g = sig(float(z @ W["f"][:, j]) + b["f"][j])
        o_g = sig(float(z @ W["o"][:, j]) + b["o"][j])
        g_g = math.tanh(float(z @ W["g"][:, j]) + b["g"][j])
        c_new[j] = f_g * c[j] + i_g * g_g
        h_new[j] = o_g * math.tanh(c_new[j])
    return h_new, c_new
