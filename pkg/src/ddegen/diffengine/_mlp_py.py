"""Vectorized numpy kernels for residual / plain softplus MLPs.

This is the pure-Python backend. Values and input tangents travel as one
stacked array of shape ``((1 + n) * B, C)``: rows ``[0, B)`` hold values,
rows ``[B + j*B, B + (j+1)*B)`` hold d(hidden)/d(x_j). Every weight then
needs a single matmul per layer for both.
"""

from __future__ import annotations

import numpy as np

from .layout import MlpConfig, layout_for

BACKEND = "python"


def softplus_sigmoid(u):
    e = np.exp(-np.abs(u))
    sp = np.maximum(u, 0.0) + np.log1p(e)
    r = 1.0 / (1.0 + e)
    sig = np.where(u >= 0.0, r, e * r)
    return sp, sig


def _input_stream(W, b, x, ntan):
    B = x.shape[0]
    Z = np.empty(((1 + ntan) * B, W.shape[0]))
    Z[:B] = x @ W.T + b
    for j in range(ntan):
        Z[B * (1 + j):B * (2 + j)] = W[:, j]
    return Z


def _act(Z, B):
    sp, sig = softplus_sigmoid(Z[:B])
    V = np.empty_like(Z)
    V[:B] = sp
    if Z.shape[0] > B:
        C = Z.shape[1]
        V[B:] = (Z[B:].reshape(-1, B, C) * sig).reshape(-1, C)
    return V, sig


def _act_back(Vbar, Z, sig, B):
    C = Z.shape[1]
    Zbar = np.empty_like(Z)
    vbar = Vbar[:B]
    if Z.shape[0] > B:
        Tvbar = Vbar[B:].reshape(-1, B, C)
        sigbar = np.einsum("jbc,jbc->bc", Tvbar, Z[B:].reshape(-1, B, C))
        Zbar[:B] = vbar * sig + sigbar * (sig * (1.0 - sig))
        Zbar[B:] = (Tvbar * sig).reshape(-1, C)
    else:
        Zbar[:B] = vbar * sig
    return Zbar


def _forward(cfg: MlpConfig, P: dict, x, ntan):
    """Run the stacked forward pass; returns the last hidden stream and a tape."""
    B = x.shape[0]
    tape = []
    if cfg.residual:
        H = _input_stream(P["in.W"], P["in.b"], x, ntan)
        for i in range(cfg.layers):
            W1, b1 = P[f"block{i}.W1"], P[f"block{i}.b1"]
            W2, b2 = P[f"block{i}.W2"], P[f"block{i}.b2"]
            Z = H @ W1.T
            Z[:B] += b1
            V, sig = _act(Z, B)
            Hn = H + V @ W2.T
            Hn[:B] += b2
            tape.append((H, Z, V, sig))
            H = Hn
        return H, tape, "out.W", "out.b"
    L = cfg.layers
    if L == 1:
        return None, tape, "layer0.W", "layer0.b"
    Z = _input_stream(P["layer0.W"], P["layer0.b"], x, ntan)
    H, sig = _act(Z, B)
    tape.append((None, Z, H, sig))
    for i in range(1, L - 1):
        Z = H @ P[f"layer{i}.W"].T
        Z[:B] += P[f"layer{i}.b"]
        Hn, sig = _act(Z, B)
        tape.append((H, Z, Hn, sig))
        H = Hn
    return H, tape, f"layer{L - 1}.W", f"layer{L - 1}.b"


def _backward(cfg: MlpConfig, P: dict, G: dict, x, tape, Hbar, ntan):
    """Reverse pass through the hidden layers; accumulates into ``G`` views."""
    B = x.shape[0]
    if cfg.residual:
        for i in reversed(range(cfg.layers)):
            H, Z, V, sig = tape[i]
            W1, W2 = P[f"block{i}.W1"], P[f"block{i}.W2"]
            G[f"block{i}.W2"] += Hbar.T @ V
            G[f"block{i}.b2"] += Hbar[:B].sum(axis=0)
            Zbar = _act_back(Hbar @ W2, Z, sig, B)
            G[f"block{i}.W1"] += Zbar.T @ H
            G[f"block{i}.b1"] += Zbar[:B].sum(axis=0)
            Hbar = Hbar + Zbar @ W1
        _input_back(G["in.W"], G["in.b"], Hbar, x, ntan)
        return
    for i in reversed(range(1, cfg.layers - 1)):
        H, Z, _, sig = tape[i]
        Zbar = _act_back(Hbar, Z, sig, B)
        G[f"layer{i}.W"] += Zbar.T @ H
        G[f"layer{i}.b"] += Zbar[:B].sum(axis=0)
        Hbar = Zbar @ P[f"layer{i}.W"]
    _, Z, _, sig = tape[0]
    Zbar = _act_back(Hbar, Z, sig, B)
    _input_back(G["layer0.W"], G["layer0.b"], Zbar, x, ntan)


def _input_back(GW, Gb, Zbar, x, ntan):
    B = x.shape[0]
    GW += Zbar[:B].T @ x
    Gb += Zbar[:B].sum(axis=0)
    for j in range(ntan):
        GW[:, j] += Zbar[B * (1 + j):B * (2 + j)].sum(axis=0)


def forward(cfg: MlpConfig, theta, x):
    """Network output for a batch, shape ``(B, out_dim)``."""
    P = layout_for(cfg).unpack(theta)
    H, _, Wn, bn = _forward(cfg, P, x, 0)
    if H is None:
        return x @ P[Wn].T + P[bn]
    return H @ P[Wn].T + P[bn]


def value_and_input_grad(cfg: MlpConfig, theta, x):
    """Scalar output ``s`` (B,) and its input gradient (B, n)."""
    P = layout_for(cfg).unpack(theta)
    B, n = x.shape
    H, _, Wn, bn = _forward(cfg, P, x, n)
    w, c = P[Wn][0], P[bn][0]
    if H is None:
        return x @ w + c, np.broadcast_to(w, (B, n)).copy()
    s = H[:B] @ w + c
    g = (H[B:] @ w).reshape(n, B).T.copy()
    return s, g


def dde_loss_and_grad(cfg: MlpConfig, theta, x, target):
    """Mean over the batch of ||grad_x s(x) - target||^2 and its parameter gradient."""
    lay = layout_for(cfg)
    P = lay.unpack(theta)
    B, n = x.shape
    grad = np.zeros(lay.size)
    G = lay.unpack(grad)
    H, tape, Wn, bn = _forward(cfg, P, x, n)
    w = P[Wn][0]
    if H is None:
        r = w - target
        loss = float(np.einsum("bj,bj->", r, r) / B)
        G[Wn][0] += 2.0 * r.sum(axis=0) / B
        return loss, grad
    Ht = H[B:]
    g = (Ht @ w).reshape(n, B).T
    r = g - target
    loss = float(np.einsum("bj,bj->", r, r) / B)
    gbar = (2.0 / B) * r.T.reshape(-1)
    G[Wn][0] += gbar @ Ht
    Hbar = np.zeros_like(H)
    Hbar[B:] = np.outer(gbar, w)
    _backward(cfg, P, G, x, tape, Hbar, n)
    return loss, grad


def vjp(cfg: MlpConfig, theta, x, ybar):
    """Output ``y`` and the parameter cotangent ``ybar . dy/dtheta``."""
    lay = layout_for(cfg)
    P = lay.unpack(theta)
    grad = np.zeros(lay.size)
    G = lay.unpack(grad)
    H, tape, Wn, bn = _forward(cfg, P, x, 0)
    src = x if H is None else H
    y = src @ P[Wn].T + P[bn]
    G[Wn] += ybar.T @ src
    G[bn] += ybar.sum(axis=0)
    if H is not None:
        _backward(cfg, P, G, x, tape, ybar @ P[Wn], 0)
    return y, grad
