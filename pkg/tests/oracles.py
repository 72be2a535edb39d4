"""Independent reference implementations: explicit loops, no shared code with the package."""

import math

import mpmath
import numpy as np


def jacobi_svd(A, sweeps=60, tol=1e-15):
    """One-sided Jacobi SVD. Returns (U, s, Vt) with s descending."""
    A = np.array(A, dtype=np.float64)
    m, n = A.shape
    transposed = m < n
    if transposed:
        A = A.T
        m, n = n, m
    U = A.copy()
    V = np.eye(n)
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = sum(U[k, i] * U[k, i] for k in range(m))
                beta = sum(U[k, j] * U[k, j] for k in range(m))
                gamma = sum(U[k, i] * U[k, j] for k in range(m))
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    ui, uj = U[k, i], U[k, j]
                    U[k, i] = c * ui - s * uj
                    U[k, j] = s * ui + c * uj
                for k in range(n):
                    vi, vj = V[k, i], V[k, j]
                    V[k, i] = c * vi - s * vj
                    V[k, j] = s * vi + c * vj
        if off < tol:
            break
    sv = np.array([math.sqrt(sum(U[k, j] ** 2 for k in range(m))) for j in range(n)])
    order = np.argsort(-sv)
    sv = sv[order]
    U = U[:, order]
    V = V[:, order]
    for j in range(n):
        if sv[j] > 0:
            U[:, j] /= sv[j]
    if transposed:
        return V, sv, U.T
    return U, sv, V.T


def sinkhorn_mp(M, u, v, mu, iters=100_000, dps=40):
    """Plain alternating scalings in extended precision."""
    mpmath.mp.dps = dps
    S = len(u)
    K = [[mpmath.exp(-(1 - mpmath.mpf(M[i][j])) / mpmath.mpf(mu)) for j in range(S)] for i in range(S)]
    u = [mpmath.mpf(x) for x in u]
    v = [mpmath.mpf(x) for x in v]
    a = [mpmath.mpf(1)] * S
    b = [mpmath.mpf(1)] * S
    for _ in range(iters):
        a = [u[i] / sum(K[i][j] * b[j] for j in range(S)) for i in range(S)]
        b = [v[j] / sum(K[i][j] * a[i] for i in range(S)) for j in range(S)]
    return np.array([[float(a[i] * K[i][j] * b[j]) for j in range(S)] for i in range(S)])


def slic_loop(X, seeds, iters):
    """Affinity exp(-||x_p - s_f||^2), centroid = affinity-weighted mean, written per element."""
    X = np.asarray(X, dtype=np.float64)
    D, N = X.shape
    S = np.array([[X[d, i] for i in seeds] for d in range(D)], dtype=np.float64)
    for _ in range(iters):
        Z = np.zeros((N, S.shape[1]))
        for p in range(N):
            for f in range(S.shape[1]):
                dist = 0.0
                for d in range(D):
                    dist += (X[d, p] - S[d, f]) ** 2
                Z[p, f] = math.exp(-dist)
        new = np.zeros_like(S)
        for f in range(S.shape[1]):
            G = sum(Z[p, f] for p in range(N))
            for d in range(D):
                new[d, f] = sum(Z[p, f] * X[d, p] for p in range(N)) / G
        S = new
    return S


def conv_loop(x, k, pad):
    """Zero-padded cross-correlation. x: Cin x H x W, k: Cout x Cin x n x n, stride 1."""
    cin, H, W = x.shape
    cout, _, n, _ = k.shape
    out = np.zeros((cout, H + 2 * pad - n + 1, W + 2 * pad - n + 1))
    for o in range(cout):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                acc = 0.0
                for c in range(cin):
                    for a in range(n):
                        for b in range(n):
                            y, xx = i + a - pad, j + b - pad
                            if 0 <= y < H and 0 <= xx < W:
                                acc += x[c, y, xx] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def conv_stride_loop(x, k, bias, stride, pad):
    cin, H, W = x.shape
    cout, _, n, _ = k.shape
    Ho = (H + 2 * pad - n) // stride + 1
    Wo = (W + 2 * pad - n) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = bias[o]
                for c in range(cin):
                    for a in range(n):
                        for b in range(n):
                            y, xx = i * stride + a - pad, j * stride + b - pad
                            if 0 <= y < H and 0 <= xx < W:
                                acc += x[c, y, xx] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def attention_loop(Q, K, Wq, Wk, Wv):
    A, D = Q.shape
    B = K.shape[0]
    d = Wq.shape[1]
    q = [[sum(Q[a, i] * Wq[i, j] for i in range(D)) for j in range(d)] for a in range(A)]
    k = [[sum(K[b, i] * Wk[i, j] for i in range(D)) for j in range(d)] for b in range(B)]
    v = [[sum(K[b, i] * Wv[i, j] for i in range(D)) for j in range(d)] for b in range(B)]
    out = np.zeros((A, d))
    for a in range(A):
        for b in range(B):
            s = sigmoid(sum(q[a][j] * k[b][j] for j in range(d)) / math.sqrt(d))
            for j in range(d):
                out[a, j] += s * v[b][j]
    return out
