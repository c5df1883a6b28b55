"""Straight-line reference for the encoder classifier.

Plain Python floats and explicit loops over positions, heads and features.
Masked keys are dropped from the softmax outright instead of receiving a
large negative bias. Shares no code with ``irvuln.model``.
"""

import math


def matvec(row, W):
    """row (length n) times W (n x m, nested lists) -> length m."""
    n, m = len(W), len(W[0])
    return [sum(row[i] * W[i][j] for i in range(n)) for j in range(m)]


def pe_row(pos, d):
    out = []
    for c in range(d):
        i2 = c - (c % 2)
        angle = pos / (10000.0 ** (i2 / d))
        out.append(math.sin(angle) if c % 2 == 0 else math.cos(angle))
    return out


def attend(qs, ks, vs, mask):
    dk = len(qs[0])
    out = []
    for q in qs:
        valid = [u for u in range(len(ks)) if mask[u]]
        scores = {u: sum(q[i] * ks[u][i] for i in range(dk)) / math.sqrt(dk) for u in valid}
        top = max(scores.values())
        ws = {u: math.exp(s - top) for u, s in scores.items()}
        z = sum(ws.values())
        out.append([sum(ws[u] / z * vs[u][c] for u in valid) for c in range(len(vs[0]))])
    return out


def layer_norm(row, gain, bias, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((x - mu) ** 2 for x in row) / len(row)
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)]


def mha(E, w, mask, n_heads):
    d = len(E[0])
    dk = d // n_heads
    Q = [matvec(r, w["w_q"]) for r in E]
    K = [matvec(r, w["w_k"]) for r in E]
    V = [matvec(r, w["w_v"]) for r in E]
    heads = []
    for h in range(n_heads):
        cols = slice(h * dk, (h + 1) * dk)
        heads.append(attend([q[cols] for q in Q], [k[cols] for k in K], [v[cols] for v in V], mask))
    concat = [sum((heads[h][t] for h in range(n_heads)), []) for t in range(len(E))]
    return [matvec(r, w["w_o"]) for r in concat]


def block(E, w, mask, n_heads):
    att = mha(E, w, mask, n_heads)
    A = [layer_norm([e + a for e, a in zip(E[t], att[t])], w["ln1_gain"], w["ln1_bias"]) for t in range(len(E))]
    out = []
    for t in range(len(A)):
        hidden = [max(0.0, x + b) for x, b in zip(matvec(A[t], w["w_ff1"]), w["b_ff1"])]
        ff = [x + b for x, b in zip(matvec(hidden, w["w_ff2"]), w["b_ff2"])]
        out.append(layer_norm([a + f for a, f in zip(A[t], ff)], w["ln2_gain"], w["ln2_bias"]))
    return out


def head(row, layers):
    x = row
    for j, (W, b) in enumerate(layers):
        x = [v + bb for v, bb in zip(matvec(x, W), b)]
        if j < len(layers) - 1:
            x = [max(0.0, v) for v in x]
    return x


def forward(ids, mask, params, n_layers, n_heads, n_fc_layers):
    """Return (logits, prob of class 1) for one sequence. ``params`` holds nested lists."""
    d = len(params["embedding"][0])
    E = [[e + p for e, p in zip(params["embedding"][i], pe_row(t, d))] for t, i in enumerate(ids)]
    for layer in range(n_layers):
        prefix = f"blocks.{layer}."
        w = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        E = block(E, w, mask, n_heads)
    layers = [(params[f"head.{j}.weight"], params[f"head.{j}.bias"]) for j in range(n_fc_layers)]
    logits = head(E[0], layers)
    m = max(logits)
    ex = [math.exp(v - m) for v in logits]
    return logits, ex[1] / sum(ex)


def as_lists(params):
    return {k: v.tolist() for k, v in params.items()}
