"""Naive reference for the drift field, for tests only.

Written directly from the per-candidate definitions with explicit Python
loops over ``numpy.longdouble`` scalars. It shares no code with the
vectorized path.
"""

from __future__ import annotations

import numpy as np

MAX_SIZE = 64
_LD = np.longdouble


def _normalize(rows, eps):
    out = []
    for row in rows:
        norm = _LD(0)
        for v in row:
            norm += v * v
        norm = np.sqrt(norm)
        out.append([v / (norm + eps) for v in row])
    return out


def _sqdist(a, b):
    s = _LD(0)
    for x, y in zip(a, b):
        s += (x - y) * (x - y)
    return s


def drift_oracle(F, G, temps, eps_norm=1e-8, eps_agg=1e-8) -> dict:
    """Return ``{"W": {tau: KxK}, "V_tau": {tau: KxC}, "V": KxC, "loss": float}``.

    ``F`` and ``G`` are raw (un-normalized) ``K x C`` feature matrices for a
    single layer of a single image.
    """
    F = np.asarray(F, dtype=_LD)
    G = np.asarray(G, dtype=_LD)
    if F.shape != G.shape or F.ndim != 2:
        raise ValueError("F and G must be K x C matrices of equal shape")
    K, C = F.shape
    if K > MAX_SIZE or C > MAX_SIZE:
        raise ValueError(f"oracle limited to K, C <= {MAX_SIZE}; got K={K}, C={C}")
    eps_norm, eps_agg = _LD(eps_norm), _LD(eps_agg)
    f = _normalize(F, eps_norm)
    g = _normalize(G, eps_norm)
    out = {"W": {}, "V_tau": {}}
    V = [[_LD(0)] * C for _ in range(K)]
    for tau in temps:
        tau_ld = _LD(tau)
        # d[k][j] = -||f_k - g_j||^2 / tau
        d = [[-_sqdist(f[k], g[j]) / tau_ld for j in range(K)] for k in range(K)]
        a = [[_LD(0)] * K for _ in range(K)]
        for k in range(K):
            m = max(d[k])
            den = _LD(0)
            for j in range(K):
                den += np.exp(d[k][j] - m)
            for j in range(K):
                a[k][j] = np.exp(d[k][j] - m) / den
        b = [[_LD(0)] * K for _ in range(K)]
        for j in range(K):
            m = max(d[kk][j] for kk in range(K))
            den = _LD(0)
            for kk in range(K):
                den += np.exp(d[kk][j] - m)
            for k in range(K):
                b[k][j] = np.exp(d[k][j] - m) / den
        W = [[_LD(0)] * K for _ in range(K)]
        for k in range(K):
            wt = [np.sqrt(a[k][j] * b[k][j]) for j in range(K)]
            s = _LD(0)
            for v in wt:
                s += v
            if s == 0:
                raise ValueError("degenerate weights")
            W[k] = [v / s for v in wt]
        Vt = [[_LD(0)] * C for _ in range(K)]
        for k in range(K):
            for c in range(C):
                acc = _LD(0)
                for j in range(K):
                    acc += W[k][j] * g[j][c]
                Vt[k][c] = acc - f[k][c]
        ms = _LD(0)
        for k in range(K):
            for c in range(C):
                ms += Vt[k][c] * Vt[k][c]
        ms /= K
        denom = np.sqrt(ms + eps_agg)
        for k in range(K):
            for c in range(C):
                V[k][c] += Vt[k][c] / denom
        out["W"][tau] = np.array(W, dtype=_LD)
        out["V_tau"][tau] = np.array(Vt, dtype=_LD)
    loss = _LD(0)
    for k in range(K):
        for c in range(C):
            loss += V[k][c] * V[k][c]
    out["V"] = np.array(V, dtype=_LD)
    out["loss"] = loss / K
    out["f"] = np.array(f, dtype=_LD)
    out["g"] = np.array(g, dtype=_LD)
    return out
