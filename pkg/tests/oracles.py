"""Loop-level reference implementations used as independent oracles."""

import math

import numpy as np


def layer_norm(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) * gg + bb for v, gg, bb in zip(row, g, b)]
    return out


def softmax(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [v / s for v in e]


def linear(x, w, b):
    return np.array([[sum(x[i, k] * w[k, j] for k in range(w.shape[0])) + b[j] for j in range(w.shape[1])]
                     for i in range(x.shape[0])])


def self_attention(x, p, prefix, heads):
    T, d = x.shape
    dh = d // heads
    qkv = linear(x, p[f"{prefix}.qkv_w"], p[f"{prefix}.qkv_b"])
    out = np.zeros((T, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = qkv[:, sl], qkv[:, d:][:, sl], qkv[:, 2 * d:][:, sl]
        for i in range(T):
            a = softmax([sum(q[i, c] * k[j, c] for c in range(dh)) / math.sqrt(dh) for j in range(T)])
            out[i, sl] = [sum(a[j] * v[j, c] for j in range(T)) for c in range(dh)]
    return linear(out, p[f"{prefix}.proj_w"], p[f"{prefix}.proj_b"])


def mps_rows(M):
    """Attention rows built token by token from overlapping mask products."""
    N, T = M.shape
    W = np.zeros((T, T))
    for i in range(T):
        row = [sum(M[n, i] * M[n, j] for n in range(N)) for j in range(T)]
        s = sum(row)
        if s > 0:
            W[i] = [r / s for r in row]
        else:
            W[i, i] = 1.0
    return W


def query_heatmaps_k0(q, F_V, M, p, heads):
    H, W, d = F_V.shape
    x = layer_norm(q + self_attention(q, p, "out.sa", heads), p["out.ln.g"], p["out.ln.b"])
    out = np.zeros((q.shape[0], H, W))
    for n in range(q.shape[0]):
        logits = [sum(x[n, c] * F_V[i, j, c] for c in range(d)) / math.sqrt(d) for i in range(H) for j in range(W)]
        sm = softmax(logits)
        for i in range(H):
            for j in range(W):
                out[n, i, j] = sm[i * W + j] * M[n, i, j]
    return out


def conv3x3(x, w, b):
    """``x [H, W, cin]``, ``w [3, 3, cin, cout]``, zero padding 1."""
    H, W, cin = x.shape
    cout = w.shape[-1]
    out = np.zeros((H, W, cout))
    for i in range(H):
        for j in range(W):
            for o in range(cout):
                s = b[o]
                for di in range(3):
                    for dj in range(3):
                        y, z = i + di - 1, j + dj - 1
                        if 0 <= y < H and 0 <= z < W:
                            s += sum(x[y, z, c] * w[di, dj, c, o] for c in range(cin))
                out[i, j, o] = s
    return out


def conv_heatmaps(F_V, M, K, p, eps=1e-5):
    """CBR blocks with batch statistics over every proposal and pixel, then conv and spatial softmax."""
    N = M.shape[0]
    H, W, _ = F_V.shape
    xs = [F_V * M[n][:, :, None] for n in range(N)]
    for k in range(K):
        xs = [conv3x3(x, p[f"cbr{k}.w"], p[f"cbr{k}.b"]) for x in xs]
        C = xs[0].shape[-1]
        for c in range(C):
            vals = [x[i, j, c] for x in xs for i in range(H) for j in range(W)]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            for x in xs:
                x[:, :, c] = (x[:, :, c] - mu) / math.sqrt(var + eps) * p[f"cbr{k}.bn.g"][c] + p[f"cbr{k}.bn.b"][c]
        xs = [np.maximum(x, 0.0) for x in xs]
    out = np.zeros((N, H, W))
    for n, x in enumerate(xs):
        z = conv3x3(x, p["head.w"], p["head.b"])[:, :, 0]
        out[n] = np.array(softmax(list(z.reshape(-1)))).reshape(H, W)
    return out


def pool(F_V, Wt, eps=1e-6):
    H, W, d = F_V.shape
    out = np.zeros((Wt.shape[0], d))
    for n in range(Wt.shape[0]):
        mass = sum(Wt[n, i, j] for i in range(H) for j in range(W))
        for c in range(d):
            out[n, c] = sum(Wt[n, i, j] * F_V[i, j, c] for i in range(H) for j in range(W)) / (mass + eps)
    return out


def cosine_scores(F_I, F_T, tau):
    out = np.zeros((F_I.shape[0], F_T.shape[0]))
    for n, a in enumerate(F_I):
        for c, t in enumerate(F_T):
            out[n, c] = sum(x * y for x, y in zip(a, t)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in t)) / tau
    return out


def assemble(F_C, M):
    N, H, W = M.shape
    return np.array([[[sum(F_C[n, c] * M[n, i, j] for n in range(N)) for j in range(W)] for i in range(H)]
                     for c in range(F_C.shape[1])])
