"""Fast built-in verification: gradient checks against finite
differences, oracle equivalence for the similarity and evaluation
paths, and a feature-store roundtrip. Run via the `selfcheck`
subcommand; any failing suite makes the command exit nonzero.
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from . import tensor as T
from .errors import FormatError, IntegrityError
from .gradcheck import finite_difference, max_relative_error
from .retrieval import CorpusIndex, average_precision, read_store, write_store
from .rng import Rng
from .similarity import topk_cs
from .simlearn import fcs_loss, ms_loss
from .tensor import Tensor

__all__ = ["run_all", "SUITES"]


def _check_op_gradient(build, x_arr, w_arr):
    with T.Tape() as tape:
        x = Tensor(x_arr)
        loss = T.tensor_sum(T.mul(build(x), Tensor(w_arr)))
    grad = tape.backward(loss)[tape.node_id(x)].data

    def value(arr):
        return T.tensor_sum(T.mul(build(Tensor(arr)),
                                  Tensor(w_arr))).item()

    numeric = finite_difference(value, x_arr)
    return max_relative_error(grad, numeric, floor=1e-4)


def check_tensor_gradients() -> str | None:
    rng = Rng(101)
    cases = [
        ("matmul", lambda x: T.matmul(x, Tensor(
            rng.split("m").normal(size=(5, 4)))), (3, 5)),
        ("softmax", lambda x: T.softmax(x, axis=1), (3, 5)),
        ("layer_norm", lambda x: T.layer_norm(
            x, Tensor(rng.split("g").normal(size=5)),
            Tensor(rng.split("b").normal(size=5))), (3, 5)),
        ("gelu", T.gelu, (3, 5)),
        ("l2_normalize", lambda x: T.l2_normalize(x, axis=1), (3, 5)),
    ]
    for name, build, shape in cases:
        for trial in range(10):
            r = rng.split(f"{name}{trial}")
            x = r.normal(size=shape)
            w = r.split("w").normal(size=shape if name != "matmul"
                                    else (shape[0], 4))
            err = _check_op_gradient(build, x, w)
            if err > 1e-6:
                return f"{name} trial {trial}: rel err {err:.2e}"
    return None


def check_loss_gradients() -> str | None:
    rng = Rng(103)
    h = 1e-5
    for trial in range(10):
        r = rng.split(f"ms{trial}")
        sims = r.uniform(-1, 1, size=(2, 6))
        mined = []
        for i in range(2):
            perm = r.permutation(6)
            mined.append((perm[:2], perm[2:4]))
        _, grad = ms_loss(sims, mined, 2.0, 50.0, 1.0, 2)
        numeric = np.zeros_like(grad)
        for i in range(2):
            for j in range(6):
                up = sims.copy()
                up[i, j] += h
                down = sims.copy()
                down[i, j] -= h
                numeric[i, j] = (ms_loss(up, mined, 2.0, 50.0, 1.0, 2)[0]
                                 - ms_loss(down, mined, 2.0, 50.0,
                                           1.0, 2)[0]) / (2 * h)
        err = max_relative_error(grad, numeric, floor=1e-4)
        if err > 1e-6:
            return f"ms_loss trial {trial}: rel err {err:.2e}"
    done = 0
    trial = 0
    while done < 10:
        r = rng.split(f"fcs{trial}")
        trial += 1
        x = [r.split(k).normal(size=(3, 5)) for k in "apq"]
        x = [m / np.linalg.norm(m, axis=1, keepdims=True) for m in x]
        gamma = 0.1
        margins = (x[0] * x[2]).sum(1) - (x[0] * x[1]).sum(1) + gamma
        if np.any(np.abs(margins) <= 1e-3):
            continue
        _, grads = fcs_loss(x[0], x[1], x[2], gamma)
        for which in range(3):
            numeric = np.zeros((3, 5))
            for i in range(3):
                for j in range(5):
                    for sign in (1.0, -1.0):
                        x[which][i, j] += sign * h
                        val = fcs_loss(x[0], x[1], x[2], gamma)[0]
                        x[which][i, j] -= sign * h
                        if sign > 0:
                            hi = val
                        else:
                            lo = val
                    numeric[i, j] = (hi - lo) / (2 * h)
            err = max_relative_error(grads[which], numeric, floor=1e-4)
            if err > 1e-6:
                return f"fcs_loss trial {trial}: rel err {err:.2e}"
        done += 1
    return None


def _oracle_topk(a, b, k):
    best = []
    for i in range(a.shape[0]):
        row_best = max(float(np.dot(a[i], b[j]))
                       for j in range(b.shape[0]))
        best.append(row_best)
    best.sort(reverse=True)
    kk = min(k, len(best))
    return sum(best[:kk]) / kk


def check_topk_oracle() -> str | None:
    rng = Rng(107)
    for trial in range(100):
        r = rng.split(f"{trial}")
        n = int(r.integers(1, 11))
        m = int(r.integers(1, 11))
        d = int(r.integers(2, 17))
        a = r.split("a").normal(size=(n, d)).astype(np.float32)
        b = r.split("b").normal(size=(m, d)).astype(np.float32)
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        got = topk_cs(a, b, k=3)
        want = _oracle_topk(a.astype(np.float64), b.astype(np.float64), 3)
        if abs(got - want) > 1e-6:
            return f"trial {trial}: engine {got!r} vs oracle {want!r}"
    return None


def check_store_roundtrip() -> str | None:
    rng = Rng(109)
    mats = {}
    for i in range(3):
        x = rng.split(f"{i}").normal(size=(i + 2, 8)).astype(np.float32)
        mats[f"v{i}"] = x / np.linalg.norm(x, axis=1, keepdims=True)
    index = CorpusIndex(mats)
    fd, path = tempfile.mkstemp(suffix=".csf1")
    os.close(fd)
    try:
        write_store(index, path)
        loaded = read_store(path)
        for vid in index.ids:
            if not np.array_equal(index.get(vid), loaded.get(vid)):
                return f"roundtrip changed bytes of '{vid}'"
        with open(path, "rb") as f:
            blob = bytearray(f.read())
        blob[5] ^= 0xFF
        with open(path, "wb") as f:
            f.write(bytes(blob))
        try:
            read_store(path)
        except (FormatError, IntegrityError):
            return None
        return "corrupted store was accepted"
    finally:
        os.unlink(path)


def _oracle_ap(ranked, relevant):
    hits = 0
    total = 0.0
    for rank, vid in enumerate(ranked, start=1):
        if vid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def check_map_oracle() -> str | None:
    got = average_precision(["a", "x", "b"], {"a", "b"})
    if abs(got - (1.0 + 2.0 / 3.0) / 2.0) > 1e-9:
        return f"hand example gave {got!r}"
    rng = Rng(113)
    for trial in range(20):
        r = rng.split(f"{trial}")
        n = int(r.integers(3, 30))
        ids = [f"v{j}" for j in range(n)]
        order = [ids[int(j)] for j in r.permutation(n)]
        n_rel = int(r.integers(1, n + 1))
        relevant = set(ids[:n_rel])
        got = average_precision(order, relevant)
        want = _oracle_ap(order, relevant)
        if abs(got - want) > 1e-9:
            return f"trial {trial}: engine {got!r} vs oracle {want!r}"
    return None


SUITES = [
    ("tensor-gradients", check_tensor_gradients),
    ("loss-gradients", check_loss_gradients),
    ("topk-oracle", check_topk_oracle),
    ("store-roundtrip", check_store_roundtrip),
    ("map-oracle", check_map_oracle),
]


def run_all():
    """[(suite name, ok, detail)] for every suite; detail '' when ok."""
    results = []
    for name, fn in SUITES:
        try:
            detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            detail = f"raised {type(exc).__name__}: {exc}"
        results.append((name, detail is None, detail or ""))
    return results
