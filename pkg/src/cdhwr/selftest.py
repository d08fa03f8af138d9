"""Fast oracle checks runnable from the command line (``cdhwr selftest``)."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ctc, dct
from . import tensor as tn
from .metrics import edit_distance
from .network import HWRCNet, tiny_config


@dataclass
class GroupResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def brute_force_label_probability(log_probs: np.ndarray, label) -> float:
    """Sum of path probabilities over all C**T frame paths collapsing to ``label``."""
    T, C = log_probs.shape
    blank = C - 1
    target = np.asarray(label, dtype=np.int64)
    paths = np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64).reshape(-1, T)
    prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != blank) & (paths != prev)
    hits = keep.sum(axis=1) == len(target)
    if len(target):
        # rows with exactly U kept symbols; boolean indexing preserves their order
        kept = paths[hits][keep[hits]].reshape(-1, len(target))
        hits[hits] = (kept == target).all(axis=1)
    path_logp = log_probs[np.arange(T), paths[hits]].sum(axis=1)
    return float(np.exp(path_logp).sum())


def random_ctc_instance(rng: np.random.Generator, max_t=8, max_u=3, max_c=4):
    T = int(rng.integers(1, max_t + 1))
    C = int(rng.integers(2, max_c + 1))
    logits = rng.normal(size=(T, C)) * 2
    lp = logits - logits.max(axis=1, keepdims=True)
    lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
    while True:
        U = int(rng.integers(0, min(max_u, T) + 1))
        label = [int(v) for v in rng.integers(0, C - 1, size=U)]
        if ctc.required_frames(label) <= T:
            return lp, label


def _recursive_distance(a: str, b: str) -> int:
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(_recursive_distance(a[1:], b) + 1, _recursive_distance(a, b[1:]) + 1,
               _recursive_distance(a[1:], b[1:]) + (a[0] != b[0]))


def network_grad_error(model: HWRCNet, x: np.ndarray, labels, rng=None,
                       coords_per_param: int | None = None) -> float:
    """Max relative error of the CTC-loss gradient over every model parameter.

    ``model`` must hold float64 parameters. With ``coords_per_param`` only a
    random subset of each parameter's coordinates is compared.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, param in model.params.items():
        def f(t, name=name, original=param):
            model.params[name] = t
            try:
                return ctc.ctc_loss_batch(model.forward(x, training=True), labels)
            finally:
                model.params[name] = original
        coords = None
        if coords_per_param is not None and param.data.size > coords_per_param:
            coords = rng.choice(param.data.size, coords_per_param, replace=False)
        worst = max(worst, tn.grad_check(f, param.data, coords=coords))
    return worst


def check_dct(n_blocks: int = 1000, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for n, dc in ((8, 8.0), (4, 2 * math.sqrt(2))):
        blocks = rng.uniform(-1, 1, (n_blocks, n, n))
        err64 = np.abs(dct.inverse_block_dct(dct.forward_block_dct(blocks)) - blocks).max()
        assert err64 < 1e-10, f"{n}x{n} round trip error {err64:.3g} (64-bit)"
        b32 = blocks.astype(np.float32)
        back = dct.inverse_block_dct(dct.forward_block_dct(b32))
        assert back.dtype == np.float32
        err32 = np.abs(back - b32).max()
        assert err32 < 1e-4, f"{n}x{n} round trip error {err32:.3g} (32-bit)"
        for v in (1.0, -0.37, 2.5):
            got = dct.forward_block_dct(np.full((n, n), v))[0, 0]
            assert abs(got - dc * v) < 1e-10, f"{n}x{n} DC of constant {v}: {got} != {dc * v}"
    return f"{n_blocks} blocks per size, round trip and DC closed forms"


def check_ctc(n_instances: int = 200, seed: int = 1) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        lp, label = random_ctc_instance(rng)
        diff = abs(math.exp(-ctc.ctc_loss(lp, label)) - brute_force_label_probability(lp, label))
        worst = max(worst, diff)
    assert worst < 1e-10, f"CTC vs enumeration differs by {worst:.3g}"
    return f"{n_instances} instances, max abs diff {worst:.2e}"


def check_edit_distance(n_pairs: int = 300, seed: int = 2) -> str:
    rng = np.random.default_rng(seed)
    alphabet = "abc"

    def word():
        return "".join(rng.choice(list(alphabet), size=int(rng.integers(0, 7))))

    for _ in range(n_pairs):
        a, b, c = word(), word(), word()
        d = edit_distance(a, b)
        assert d == _recursive_distance(a, b), f"distance({a!r}, {b!r})"
        assert d == edit_distance(b, a)
        assert (d == 0) == (a == b)
        assert edit_distance(a, c) <= d + edit_distance(b, c)
    return f"{n_pairs} random pairs against the recursive definition"


def check_gradients(seed: int = 3) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(3):
        lp, label = random_ctc_instance(rng, 5, 2, 4)
        worst = max(worst, _fd_ctc(lp, label, ctc.ctc_grad(lp, label)))
    assert worst < 1e-6, f"CTC gradient error {worst:.3g}"
    with tn.precision(np.float64):
        model = HWRCNet(tiny_config(), seed=seed, dtype=np.float64)
        x = rng.uniform(-1, 1, (2,) + model.config.input_shape)
        net = network_grad_error(model, x, [[1, 2, 3], [4, 4]], rng, coords_per_param=6)
    assert net < 1e-4, f"network gradient error {net:.3g}"
    return f"ctc {worst:.2e}, scaled-down network {net:.2e}"


def _fd_ctc(lp, label, g, h=1e-6) -> float:
    worst = 0.0
    for idx in np.ndindex(*lp.shape):
        e = np.zeros_like(lp)
        e[idx] = h
        fd = (ctc.ctc_loss(lp + e, label) - ctc.ctc_loss(lp - e, label)) / (2 * h)
        worst = max(worst, abs(g[idx] - fd) / max(1.0, abs(g[idx]), abs(fd)))
    return worst


GROUPS: dict[str, Callable[[], str]] = {
    "dct-round-trip": check_dct,
    "ctc-brute-force": check_ctc,
    "edit-distance": check_edit_distance,
    "gradients": check_gradients,
}


def run_selftest() -> list[GroupResult]:
    results = []
    for name, check in GROUPS.items():
        t0 = time.perf_counter()
        try:
            detail, ok = check(), True
        except AssertionError as err:
            detail, ok = str(err), False
        results.append(GroupResult(name, ok, detail, time.perf_counter() - t0))
    return results
