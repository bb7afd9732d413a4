"""Central finite-difference checks for every differentiable op.

Each case draws a small random instance (spatial <= 4x4, channels <= 3),
reduces the op output to a scalar with a random projection, and compares the
analytic gradient of every input against central differences at float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensor import derive_rng, precision

STEP = 1e-6
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both are (numerically) zero."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f, arrays: dict, name: str, step: float = STEP) -> np.ndarray:
    base = arrays[name]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(arrays)
        flat[i] = orig - step
        fm = f(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def _dims(rng, max_c=3):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, max_c + 1))
    h = int(rng.integers(1, 5))
    w = int(rng.integers(1, 5))
    return n, c, h, w


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def _untied_pool_input(rng, n, c, h, w, margin=1e-3):
    # distinct values per window so no +-STEP perturbation can flip an argmax
    while True:
        x = rng.standard_normal((n, c, h, w))
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        s = np.sort(win, axis=1)
        if np.all(np.diff(s, axis=1) > margin):
            return x


def _case(op: str, rng):
    """Return (arrays, build) where build(graph, leaves) -> output node."""
    if op == "conv3x3":
        n, c, h, w = _dims(rng)
        co = int(rng.integers(1, 4))
        arrays = {"x": rng.standard_normal((n, c, h, w)),
                  "w": rng.standard_normal((co, c, 3, 3)),
                  "b": rng.standard_normal(co)}
        return arrays, lambda g, L: ad.conv3x3(L["x"], L["w"], L["b"])
    if op == "maxpool2x2":
        n, c, _, _ = _dims(rng)
        h, w = 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3))
        return {"x": _untied_pool_input(rng, n, c, h, w)}, lambda g, L: ad.maxpool2x2(L["x"])
    if op == "relu":
        return {"x": _away_from_zero(rng, _dims(rng))}, lambda g, L: ad.relu(L["x"])
    if op == "batchnorm":
        n, c, h, w = _dims(rng)
        # two values per channel normalize to exactly +-1, leaving an eps-sized
        # x-gradient that finite differences cannot resolve relatively
        while n * h * w < 4:
            h += 1
        mode = "train" if rng.random() < 0.75 else "infer"
        rmean = rng.standard_normal(c)
        rvar = rng.uniform(0.5, 2.0, c)
        arrays = {"x": rng.standard_normal((n, c, h, w)) * 2 + 0.5,
                  "gamma": rng.standard_normal(c),
                  "beta": rng.standard_normal(c)}

        def build(g, L):
            st = ad.BatchNormState(c, mode=mode, running_mean=rmean.copy(), running_var=rvar.copy())
            return ad.batchnorm(L["x"], L["gamma"], L["beta"], st)
        return arrays, build
    if op == "bilinear_up2x":
        return {"x": rng.standard_normal(_dims(rng))}, lambda g, L: ad.bilinear_up2x(L["x"])
    if op == "concat":
        n, c, h, w = _dims(rng)
        cb = int(rng.integers(1, 4))
        arrays = {"a": rng.standard_normal((n, c, h, w)), "b": rng.standard_normal((n, cb, h, w))}
        return arrays, lambda g, L: ad.concat_channels(L["a"], L["b"])
    if op in ("gate_mul", "gate_add"):
        shape = _dims(rng)
        mode = op.split("_")[1]
        arrays = {"u": rng.standard_normal(shape), "v": rng.standard_normal(shape)}
        return arrays, lambda g, L: ad.gate_combine(L["u"], L["v"], mode)
    if op == "softmax_xent":
        n, C, h, w = _dims(rng)
        C = max(C, 2)
        target = rng.integers(0, C, size=(n, h, w))
        target[rng.random((n, h, w)) < 0.2] = 255
        weights = rng.uniform(0.2, 2.0, C)
        return ({"scores": rng.standard_normal((n, C, h, w)) * 2},
                lambda g, L: ad.softmax_xent(L["scores"], target, weights, 255))
    raise KeyError(op)


@dataclass
class OpReport:
    op: str
    instances: int
    max_rel_error: float
    passed: bool
    seconds: float


def check_op(op: str, instances: int = 20, seed: int = 0, tol: float = TOLERANCE) -> OpReport:
    t0 = time.perf_counter()
    worst = 0.0
    with precision(np.float64):
        for k in range(instances):
            rng = derive_rng(seed, op, k)
            arrays, build = _case(op, rng)
            probe_rng = derive_rng(seed, op, k, "probe")

            def scalar(arrs, graph=None):
                graph = graph or ad.Graph()
                leaves = {name: graph.leaf(a, name) for name, a in arrs.items()}
                out = build(graph, leaves)
                if out.value.ndim:
                    if "r" not in probe:
                        probe["r"] = probe_rng.standard_normal(out.shape)
                    out = ad.project(out, probe["r"])
                return graph, leaves, out

            probe: dict = {}
            graph, leaves, loss = scalar(arrays)
            graph.backward(loss)
            for name in arrays:
                analytic = graph.grad_of(leaves[name])
                numeric = numeric_grad(lambda a: float(scalar(a)[2].value), arrays, name)
                worst = max(worst, relative_error(analytic, numeric))
    return OpReport(op, instances, worst, worst <= tol, time.perf_counter() - t0)


def run_all(instances: int = 20, seed: int = 0, tol: float = TOLERANCE) -> list[OpReport]:
    return [check_op(op, instances, seed, tol) for op in ad.DIFFERENTIABLE_OPS]
