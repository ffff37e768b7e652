"""Scalar-loop reference implementations of the distillation objectives.

These share no code with ``objectives``: every quantity is accumulated with
plain Python loops and ``math`` so the vectorised versions can be checked
against them. Inputs may be Tensors or arrays; traces are read via their
``hidden_states``, ``attention_scores``, ``attention_probs``, ``values`` and
``mask`` fields.
"""

from __future__ import annotations

import math

import numpy as np

FLOOR = 1e-12


def _np(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _softmax_row(row, keep=None) -> list[float]:
    idx = [k for k in range(len(row)) if keep is None or keep[k]]
    top = max(row[k] for k in idx)
    ex = {k: math.exp(row[k] - top) for k in idx}
    total = sum(ex.values())
    return [ex[k] / total if k in ex else 0.0 for k in range(len(row))]


def _kl_row(p, q) -> float:
    out = 0.0
    for pk, qk in zip(p, q):
        if pk > 0:
            out += pk * (math.log(pk) - math.log(max(qk, FLOOR)))
    return out


def pred(z_t, z_s, t=1.0, scale_by_t2=True) -> float:
    zt = np.atleast_2d(_np(z_t))
    zs = np.atleast_2d(_np(z_s))
    total = 0.0
    for i in range(zt.shape[0]):
        p = _softmax_row([v / t for v in zt[i]])
        q = _softmax_row([v / t for v in zs[i]])
        total -= sum(pk * math.log(qk) for pk, qk in zip(p, q))
    loss = total / zt.shape[0]
    return loss * t * t if scale_by_t2 else loss


def entropy(z_t, t=1.0) -> float:
    zt = np.atleast_2d(_np(z_t))
    total = 0.0
    for i in range(zt.shape[0]):
        p = _softmax_row([v / t for v in zt[i]])
        total -= sum(pk * math.log(pk) for pk in p if pk > 0)
    return total / zt.shape[0]


def hid(trace_s, trace_t, pairs, weights, variant="CLS") -> float:
    """``weights`` maps student layer -> projection matrix."""
    mask = np.asarray(trace_s.mask)
    out = 0.0
    for t_layer, s_layer in pairs:
        hs = _np(trace_s.hidden_states[s_layer - 1])
        ht = _np(trace_t.hidden_states[t_layer - 1])
        w = _np(weights[s_layer])
        B, l, _ = hs.shape
        dt = ht.shape[-1]
        rows = [(b, 0) for b in range(B)] if variant == "CLS" else [(b, i) for b in range(B) for i in range(l) if mask[b, i]]
        sq = 0.0
        for b, i in rows:
            for c in range(dt):
                proj = sum(hs[b, i, r] * w[r, c] for r in range(hs.shape[-1]))
                sq += (proj - ht[b, i, c]) ** 2
        out += sq / (len(rows) * dt)
    return out / len(pairs)


def contrast(trace_s, trace_t, pairs, weights, tau=0.1) -> float:
    out = 0.0
    for t_layer, s_layer in pairs:
        hs = _np(trace_s.hidden_states[s_layer - 1])
        ht = _np(trace_t.hidden_states[t_layer - 1])
        w = _np(weights[s_layer])
        B = hs.shape[0]
        s_vecs, t_vecs = [], []
        for b in range(B):
            v = [sum(hs[b, 0, r] * w[r, c] for r in range(hs.shape[-1])) for c in range(w.shape[1])]
            n = math.sqrt(sum(x * x for x in v) + 1e-12)
            s_vecs.append([x / n for x in v])
            u = list(ht[b, 0])
            n = math.sqrt(sum(x * x for x in u) + 1e-12)
            t_vecs.append([x / n for x in u])
        total = 0.0
        for i in range(B):
            sims = [sum(a * b for a, b in zip(s_vecs[i], t_vecs[j])) / tau for j in range(B)]
            top = max(sims)
            log_z = top + math.log(sum(math.exp(s - top) for s in sims))
            total -= sims[i] - log_z
        out += total / B
    return out / len(pairs)


def att_mse(trace_s, trace_t, pairs) -> float:
    mask = np.asarray(trace_s.mask)
    out = 0.0
    for t_layer, s_layer in pairs:
        a = _np(trace_s.attention_scores[s_layer - 1])
        b_ = _np(trace_t.attention_scores[t_layer - 1])
        B, H, l, _ = a.shape
        batch = 0.0
        for b in range(B):
            for h in range(H):
                sq, count = 0.0, 0
                for i in range(l):
                    for j in range(l):
                        if mask[b, i] and mask[b, j]:
                            sq += (a[b, h, i, j] - b_[b, h, i, j]) ** 2
                            count += 1
                batch += sq / count
        out += batch / (B * H)
    return out / len(pairs)


def _kl_over_rows(p_all, q_all, mask) -> float:
    B, H, l, _ = p_all.shape
    batch = 0.0
    for b in range(B):
        rows = [i for i in range(l) if mask[b, i]]
        for h in range(H):
            batch += sum(_kl_row(p_all[b, h, i], q_all[b, h, i]) for i in rows) / len(rows)
    return batch / (B * H)


def att_kl(trace_s, trace_t, pairs) -> float:
    mask = np.asarray(trace_s.mask)
    out = 0.0
    for t_layer, s_layer in pairs:
        out += _kl_over_rows(_np(trace_t.attention_probs[t_layer - 1]), _np(trace_s.attention_probs[s_layer - 1]), mask)
    return out / len(pairs)


def relation(values, mask) -> np.ndarray:
    v = _np(values)
    B, H, l, dh = v.shape
    out = np.zeros((B, H, l, l))
    for b in range(B):
        for h in range(H):
            for i in range(l):
                row = [sum(v[b, h, i, c] * v[b, h, j, c] for c in range(dh)) / math.sqrt(dh) for j in range(l)]
                out[b, h, i] = _softmax_row(row, keep=mask[b])
    return out


def val_kl(trace_s, trace_t, pairs) -> float:
    mask = np.asarray(trace_s.mask)
    out = 0.0
    for t_layer, s_layer in pairs:
        p = relation(trace_t.values[t_layer - 1], np.asarray(trace_t.mask))
        q = relation(trace_s.values[s_layer - 1], mask)
        out += _kl_over_rows(p, q, mask)
    return out / len(pairs)
