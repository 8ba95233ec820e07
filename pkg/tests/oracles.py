"""Independent brute-force reference implementations used by the tests."""
import math

import numpy as np


def gelu(x):
    # same operation order as the library so the comparison can be exact
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * x * (1.0 + 0.044715 * (x * x))))


def mlp_ref(mlp, x):
    h = x @ mlp.fc1.weight.data + mlp.fc1.bias.data
    return gelu(h) @ mlp.fc2.weight.data + mlp.fc2.bias.data


def softmax_row(z):
    e = np.exp(np.asarray(z) - max(z))
    return list(e / e.sum())


def moe_dense_loop(moe, x, top_k=1):
    """Dense oracle: every expert on every token, then a per-token loop keeping the top-k.

    out[t] = x[t] + sum over the k most probable experts of prob * expert(x)[t].
    """
    w, b = moe.router.weight.data, moe.router.bias.data
    logits = x @ w + b
    dense = [mlp_ref(ex, x) for ex in moe.experts]
    out = np.array(x, dtype=np.float64, copy=True)
    for t in range(x.shape[0]):
        probs = softmax_row(list(logits[t]))
        order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:top_k]
        for i in order:
            out[t] = out[t] + probs[i] * dense[i][t]
    return out


def interval_load_bruteforce(episodes, n_experts, n_intervals=100):
    """Brute-force expert-load curve.

    ``episodes`` is a list of token sequences, each a list of (selected, top1_prob)
    in token order. A token contributes its probability to its selected expert
    and 0 to the rest. Interval membership is tested token by token; empty
    intervals take the previous interval's value (the first filled one if none
    precedes them). Written with plain loops on purpose.
    """
    curves = []
    for tokens in episodes:
        length = len(tokens)
        rows = []
        for j in range(n_intervals):
            members = [i for i in range(length)
                       if (j * length) // n_intervals <= i < ((j + 1) * length) // n_intervals]
            if not members:
                rows.append(None)
                continue
            row = []
            for e in range(n_experts):
                total = 0.0
                for i in members:
                    sel, prob = tokens[i]
                    total += prob if sel == e else 0.0
                row.append(total / len(members))
            rows.append(row)
        first = next(r for r in rows if r is not None)
        filled, last = [], first
        for r in rows:
            last = r if r is not None else last
            filled.append(last)
        curves.append(filled)
    return [[sum(c[j][e] for c in curves) / len(curves) for e in range(n_experts)]
            for j in range(n_intervals)]
