"""Finite-difference check of ``forward_backward`` that skips kink-adjacent coordinates."""
from __future__ import annotations

import numpy as np

from ncsr import ops
from ncsr.model import ModelSpec, ModelWeights, forward_backward, forward_cached, init_weights
from oracles import rel_err


def float64_model(spec: ModelSpec, seed: int) -> ModelWeights:
    m = init_weights(spec, seed)
    rng = np.random.default_rng(seed + 1)
    convs = [ops.ConvWeights(c.kernel.astype(np.float64),
                             rng.uniform(-0.5, 0.5, c.bias.shape)) for c in m.convs]
    return ModelWeights(spec, convs)


def _pattern(y, target, m):
    out, pre = forward_cached(y, m)
    masks = [p > 0 for p in pre[:-1]]
    return out, masks, np.sign(out - target)


def check_forward_backward(m: ModelWeights, y, target, coords: int, rng, eps=1e-3):
    """Return (checked, skipped, worst relative error)."""
    _, grads = forward_backward(y, target, m)
    params = m.named_params()
    names = list(params)
    out0, masks0, sign0 = _pattern(y, target, m)
    checked = skipped = 0
    worst = 0.0
    attempts = 0
    while checked < coords and attempts < 20 * coords:
        attempts += 1
        name = names[rng.integers(len(names))]
        arr = params[name]
        idx = tuple(int(rng.integers(d)) for d in arr.shape)
        old = arr[idx]
        vals, stable = [], True
        for delta in (eps, -eps):
            arr[idx] = old + delta
            out, masks, sign = _pattern(y, target, m)
            stable &= all(np.array_equal(a, b) for a, b in zip(masks, masks0))
            stable &= np.array_equal(sign, sign0)
            stable &= bool(np.min(np.abs(out - target)) >= 1e-3)
            vals.append(np.mean(np.abs(out - target)))
        arr[idx] = old
        if not stable:
            skipped += 1
            continue
        fd = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, rel_err(fd, grads[name][idx], floor=1e-8))
        checked += 1
    return checked, skipped, worst
