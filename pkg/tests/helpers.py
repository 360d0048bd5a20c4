"""Shared oracles and finite-difference utilities for the test suite.

Everything here is deliberately slow and literal: loop-based re-derivations
that the fast implementations are checked against.
"""

import numpy as np

from vidseg.tensor import Tensor


def loop_broadcast_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise broadcast add via explicit index arithmetic."""
    out_shape = np.broadcast_shapes(a.shape, b.shape)
    rank = len(out_shape)
    a_shape = (1,) * (rank - a.ndim) + a.shape
    b_shape = (1,) * (rank - b.ndim) + b.shape
    av = a.reshape(a_shape)
    bv = b.reshape(b_shape)
    out = np.zeros(out_shape, dtype=np.result_type(a, b))
    for idx in np.ndindex(*out_shape):
        ia = tuple(i if s > 1 else 0 for i, s in zip(idx, a_shape))
        ib = tuple(i if s > 1 else 0 for i, s in zip(idx, b_shape))
        out[idx] = av[ia] + bv[ib]
    return out


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def loop_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Direct exp/sum softmax per row, in float64."""
    flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
    out = np.zeros_like(flat)
    for r in range(flat.shape[0]):
        row = flat[r] - flat[r].max()
        e = np.exp(row)
        out[r] = e / e.sum()
    return out.reshape(x.shape)


def finite_diff_grads(build_loss, params, step=1e-3):
    """Central finite differences of a scalar loss w.r.t. each param entry.

    ``build_loss`` must rebuild the forward graph from the params' current
    data on every call. Params should be float64 tensors so the differences
    are not drowned in float32 noise.
    """
    fds = []
    for p in params:
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = build_loss().item()
            flat[i] = orig - step
            lo = build_loss().item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        fds.append(fd)
    return fds


def assert_grads_match(analytic, fd, rtol=1e-4, atol=1e-6, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    denom = np.maximum(np.abs(fd), np.abs(analytic))
    err = np.abs(analytic - fd)
    bad = err > np.maximum(rtol * denom, atol)
    assert not bad.any(), (
        f"{label}: gradient mismatch at {np.argwhere(bad)[0]}: "
        f"analytic={analytic[bad][0]}, fd={fd[bad][0]}"
    )


def rand_tensor(rng, shape, requires_grad=True, dtype=np.float64, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=dtype)


def cross_attention_oracle(layer, x, feats, additive, pos):
    """Float64 re-derivation of the masked cross-attention sublayer with
    explicit loops over heads, queries and tokens."""
    x = x.astype(np.float64)
    feats = feats.astype(np.float64)
    n, c = x.shape
    heads = layer.heads
    ch = c // heads

    def lin(m, v2d):
        return v2d @ m.w.data.astype(np.float64) + m.b.data.astype(np.float64)

    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    xn = (x - mu) / np.sqrt(var + layer.norm.eps)
    xn = xn * layer.norm.g.data.astype(np.float64) + layer.norm.b.data.astype(np.float64)

    q = lin(layer.f_q, xn)
    k = lin(layer.f_k, feats + pos.astype(np.float64) if pos is not None else feats)
    v = lin(layer.f_v, feats)

    merged = np.zeros((n, c))
    for h in range(heads):
        qs, ks, vs = q[:, h * ch:(h + 1) * ch], k[:, h * ch:(h + 1) * ch], v[:, h * ch:(h + 1) * ch]
        for i in range(n):
            scores = np.array([qs[i] @ ks[j] / np.sqrt(ch) for j in range(ks.shape[0])])
            if additive is not None:
                scores = scores + additive[i]
            e = np.exp(scores - scores.max())
            wgt = e / e.sum()
            merged[i, h * ch:(h + 1) * ch] = sum(wgt[j] * vs[j] for j in range(ks.shape[0]))
    return lin(layer.proj, merged) + x


def st_iou_slow(a, b):
    """Spatio-temporal IoU by explicit voxel loops."""
    inter = union = 0
    for t in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(a.shape[2]):
                va, vb = bool(a[t, i, j]), bool(b[t, i, j])
                inter += va and vb
                union += va or vb
    return inter / union if union else 0.0


def brute_force_min_cost(cost):
    """Minimum assignment total by enumerating every injection gt -> query."""
    import itertools

    n, g = cost.shape
    best = np.inf
    for rows in itertools.permutations(range(n), g):
        best = min(best, sum(cost[rows[j], j] for j in range(g)))
    return best


def enumeration_ap_oracle(preds, gts, thr):
    """AP oracle: exhaustively enumerate injective matchings and keep the one
    that dominates in score order (each prediction prefers being matched and
    prefers higher IoU, earlier predictions first)."""
    classes = sorted({g.class_id for clip in gts for g in clip})
    per_class = {}
    for cls in classes:
        entries = sorted(
            [(p.score, ci, pi) for ci, cp in enumerate(preds)
             for pi, p in enumerate(cp) if p.class_id == cls],
            key=lambda e: (-e[0], e[1], e[2]),
        )
        cls_gts = {ci: [g for g in clip if g.class_id == cls] for ci, clip in enumerate(gts)}
        n_gt = sum(len(v) for v in cls_gts.values())
        best = {"key": None, "flags": [0.0] * len(entries)}

        def explore(i, used, key):
            if i == len(entries):
                tk = tuple(key)
                if best["key"] is None or tk > best["key"]:
                    best["key"] = tk
                    best["flags"] = [k[0] for k in key]
                return
            _, ci, pi = entries[i]
            p = preds[ci][pi]
            explore(i + 1, used, key + [(0.0, 0.0)])
            for j, g in enumerate(cls_gts[ci]):
                if (ci, j) in used:
                    continue
                iou = st_iou_slow(p.mask, g.mask)
                if iou >= thr:
                    explore(i + 1, used | {(ci, j)}, key + [(1.0, iou)])

        explore(0, frozenset(), [])
        tp = best["flags"]
        if n_gt == 0:
            per_class[cls] = 0.0
            continue
        total = 0.0
        for r in np.linspace(0.0, 1.0, 101):
            best_p = 0.0
            running_tp = 0
            for k in range(len(tp)):
                running_tp += tp[k]
                if running_tp / n_gt >= r - 1e-12:
                    best_p = max(best_p, running_tp / (k + 1))
            total += best_p
        per_class[cls] = total / 101.0
    return float(np.mean(list(per_class.values()))) if per_class else 0.0
