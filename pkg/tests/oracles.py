"""Independent reference implementations used as test oracles.

Everything here is deliberately written as straight-line Python with no
imports from the code paths it checks: finite differences for gradients,
consecutive-pair enumeration for session graphs, a scalar re-derivation
of the gated update, and loop-based metric recomputation.
"""

import numpy as np


# ---------------------------------------------------------------------------
# gradients


def finite_difference_grads(loss_fn, tensors, h=1e-3):
    """Central finite differences of loss_fn() w.r.t. each tensor.

    ``tensors`` maps names to Tensor objects whose .data is perturbed in
    place; loss_fn must rebuild its computation from the current data on
    every call (and re-create any rng it uses, so stochastic sites are
    frozen across evaluations).
    """
    grads = {}
    for name, tensor in tensors.items():
        flat = tensor.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn()
            flat[i] = original - h
            minus = loss_fn()
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * h)
        grads[name] = grad.reshape(tensor.data.shape)
    return grads


def worst_gradient_error(analytic, numeric, small=1e-4):
    """Max relative error, with an absolute comparison where the true
    gradient is tiny (|numeric| < ``small``: absolute difference must be
    < 1e-6, reported scaled so that 1.0 == at tolerance)."""
    worst = 0.0
    for name in numeric:
        a = np.asarray(analytic[name]).reshape(-1)
        n = np.asarray(numeric[name]).reshape(-1)
        for ai, ni in zip(a, n):
            if abs(ni) < small:
                worst = max(worst, abs(ai - ni) / 1e-6 * 1e-4)
            else:
                worst = max(worst, abs(ai - ni) / abs(ni))
    return worst


def assert_gradients_match(analytic, numeric, tol=1e-4):
    error = worst_gradient_error(analytic, numeric)
    assert error < tol, f"gradient mismatch: worst scaled error {error:g} >= {tol:g}"


# ---------------------------------------------------------------------------
# session graphs


def graph_from_pairs(items):
    """Adjacency oracle: enumerate consecutive pairs, then normalize each
    row by the total number of outgoing (incoming) transitions."""
    unique = []
    for item in items:
        if item not in unique:
            unique.append(item)
    index = {item: i for i, item in enumerate(unique)}
    n = len(unique)
    out_counts = [[0.0] * n for _ in range(n)]
    for a, b in zip(items[:-1], items[1:]):
        out_counts[index[a]][index[b]] += 1.0
    a_out = [[0.0] * n for _ in range(n)]
    a_in = [[0.0] * n for _ in range(n)]
    for i in range(n):
        total = sum(out_counts[i])
        if total > 0:
            for j in range(n):
                a_out[i][j] = out_counts[i][j] / total
    for j in range(n):
        total = sum(out_counts[i][j] for i in range(n))
        if total > 0:
            for i in range(n):
                a_in[j][i] = out_counts[i][j] / total
    return unique, np.array(a_out), np.array(a_in)


# ---------------------------------------------------------------------------
# gated propagation, scalar re-derivation


def gated_step_scalar(a_out, a_in, states, edge_proj, edge_bias,
                      w_update, u_update, w_reset, u_reset, w_cand, u_cand):
    """One gated update computed with explicit scalar loops."""

    def sigmoid(x):
        return 1.0 / (1.0 + np.exp(-x))

    n, d = states.shape
    projected = [[sum(states[i][k] * edge_proj[k][j] for k in range(d))
                  for j in range(2 * d)] for i in range(n)]
    new_states = np.zeros((n, d))
    for i in range(n):
        message = [0.0] * d
        for j in range(n):
            for c in range(d):
                message[c] += a_out[i][j] * projected[j][c]
                message[c] += a_in[i][j] * projected[j][d + c]
        for c in range(d):
            message[c] += edge_bias[c]

        def apply(vec, mat):
            return [sum(vec[k] * mat[k][c] for k in range(d)) for c in range(d)]

        zu = apply(message, w_update)
        zs = apply(list(states[i]), u_update)
        ru = apply(message, w_reset)
        rs = apply(list(states[i]), u_reset)
        z = [sigmoid(zu[c] + zs[c]) for c in range(d)]
        r = [sigmoid(ru[c] + rs[c]) for c in range(d)]
        gated_prev = [r[c] * states[i][c] for c in range(d)]
        cu = apply(message, w_cand)
        cs = apply(gated_prev, u_cand)
        cand = [np.tanh(cu[c] + cs[c]) for c in range(d)]
        for c in range(d):
            new_states[i][c] = (1.0 - z[c]) * states[i][c] + z[c] * cand[c]
    return new_states


# ---------------------------------------------------------------------------
# metrics, loop-based recomputation


def recall_brute(ranked_lists, labels, k):
    hits = 0
    for ranked, label in zip(ranked_lists, labels):
        found = False
        for pos in range(min(k, len(ranked))):
            if ranked[pos] == label:
                found = True
        if found:
            hits += 1
    return hits / len(labels)


def mrr_brute(ranked_lists, labels, k):
    total = 0.0
    for ranked, label in zip(ranked_lists, labels):
        for pos in range(min(k, len(ranked))):
            if ranked[pos] == label:
                total += 1.0 / (pos + 1)
                break
    return total / len(labels)


def arp_brute(ranked_lists, popularity, k):
    total = 0.0
    for ranked in ranked_lists:
        mass = 0.0
        for pos in range(min(k, len(ranked))):
            item = ranked[pos]
            if 0 <= item < len(popularity):
                mass += popularity[item]
        total += mass / k
    return total / len(ranked_lists)
