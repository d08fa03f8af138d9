"""Connectionist temporal classification: loss, gradient and decoding.

All lattice arithmetic happens in log space. The blank is the last class
(index ``C - 1``) unless given explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .metrics import edit_distance
from .tensor import Tensor

NEG_INF = -np.inf


class InfeasibleLabelError(ValueError):
    """The label cannot be aligned to the available number of frames."""


def required_frames(label: Sequence) -> int:
    """Fewest frames that can emit ``label``: one per symbol plus one blank per adjacent repeat."""
    label = list(label)
    return len(label) + sum(a == b for a, b in zip(label, label[1:]))


@dataclass
class AlignmentLattice:
    extended: np.ndarray      # blank-interleaved label, length 2U+1
    log_alpha: np.ndarray     # [T, 2U+1]
    log_beta: np.ndarray      # [T, 2U+1]
    log_likelihood: float     # log p(label | input)


def _prepare(log_probs, label, blank):
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError(f"log_probs must be [T, C], got shape {lp.shape}")
    T, C = lp.shape
    blank = C - 1 if blank is None else blank
    label = [int(c) for c in label]
    for c in label:
        if c == blank or not 0 <= c < C:
            raise ValueError(f"label index {c} is not a non-blank class of {C}")
    if required_frames(label) > T:
        raise InfeasibleLabelError(f"label of length {len(label)} needs {required_frames(label)} "
                                   f"frames but only {T} are available")
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    # skip transitions s-2 -> s are allowed onto a symbol that differs from s-2
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return lp, ext, skip


def ctc_lattice(log_probs, label: Sequence[int], blank: int | None = None) -> AlignmentLattice:
    lp, ext, skip = _prepare(log_probs, label, blank)
    T = lp.shape[0]
    S = len(ext)
    emit = lp[:, ext]                                  # [T, S]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    ll = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return AlignmentLattice(ext, alpha, beta, float(ll))


def ctc_loss(log_probs, label: Sequence[int], blank: int | None = None) -> float:
    """Negative log-likelihood of ``label`` under per-frame ``log_probs`` [T, C]."""
    return -ctc_lattice(log_probs, label, blank).log_likelihood


def ctc_occupancy(log_probs, label: Sequence[int], blank: int | None = None) -> np.ndarray:
    """Posterior probability of emitting each class at each frame, [T, C]."""
    lat = ctc_lattice(log_probs, label, blank)
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    post = np.exp(lat.log_alpha + lat.log_beta - lp[:, lat.extended] - lat.log_likelihood)
    occ = np.zeros_like(lp)
    for s, k in enumerate(lat.extended):
        occ[:, k] += post[:, s]
    return occ


def ctc_grad(log_probs, label: Sequence[int], blank: int | None = None) -> np.ndarray:
    """Gradient of :func:`ctc_loss` with respect to ``log_probs``.

    Each log-probability enters every path product once, so the derivative is
    minus the symbol occupancy. Chained through a log-softmax this becomes
    ``softmax(logits) - occupancy``.
    """
    return -ctc_occupancy(log_probs, label, blank)


def ctc_loss_batch(log_probs: Tensor, labels: Sequence[Sequence[int]],
                   blank: int | None = None, ids: Sequence[str] | None = None) -> Tensor:
    """Mean CTC loss over a batch [B, T, C] as a differentiable scalar."""
    B = log_probs.shape[0]
    if len(labels) != B:
        raise ValueError(f"{len(labels)} labels for a batch of {B}")
    losses = np.empty(B)
    grads = np.empty(log_probs.shape, dtype=np.float64)
    for b, label in enumerate(labels):
        try:
            lat = ctc_lattice(log_probs.data[b], label, blank)
        except InfeasibleLabelError as err:
            who = ids[b] if ids is not None else f"batch item {b}"
            raise InfeasibleLabelError(f"{who}: {err}") from None
        lp = log_probs.data[b].astype(np.float64)
        post = np.exp(lat.log_alpha + lat.log_beta - lp[:, lat.extended] - lat.log_likelihood)
        occ = np.zeros_like(lp)
        np.add.at(occ.T, lat.extended, post.T)
        grads[b] = -occ
        losses[b] = -lat.log_likelihood
    out = np.asarray(losses.mean(), dtype=log_probs.dtype)
    grads = (grads / B).astype(log_probs.dtype)
    return tn.apply("ctc_loss", (log_probs,), out, lambda g, w: (g * grads,))


# ---------------------------------------------------------------------------
# decoding

def _chars(vocab) -> str:
    return getattr(vocab, "chars", vocab)


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def decode_best_path(log_probs, vocab) -> str:
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    chars = _chars(vocab)
    blank = lp.shape[-1] - 1
    return "".join(chars[k] for k in collapse(lp.argmax(axis=-1), blank))


def beam_search(log_probs, beam_width: int = 25, blank: int | None = None) -> list[tuple[tuple[int, ...], float]]:
    """Prefix beam search; returns (labeling, log-probability) best first.

    Ties in score are broken by the lexicographically smaller labeling.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    T, C = lp.shape
    blank = C - 1 if blank is None else blank
    symbols = [k for k in range(C) if k != blank]
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}  # (blank-ending, symbol-ending)
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def bump(prefix, which, value):
            entry = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            entry[which] = np.logaddexp(entry[which], value)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, 0, total + row[blank])
            last = prefix[-1] if prefix else None
            for k in symbols:
                if k == last:
                    bump(prefix, 1, pnb + row[k])
                    bump(prefix + (k,), 1, pb + row[k])
                else:
                    bump(prefix + (k,), 1, total + row[k])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {p: (v[0], v[1]) for p, v in ranked[:beam_width]}
    return sorted(((p, float(np.logaddexp(*v))) for p, v in beams.items()), key=lambda pv: (-pv[1], pv[0]))


def decode_beam(log_probs, vocab, beam_width: int = 25) -> str:
    chars = _chars(vocab)
    best, _ = beam_search(log_probs, beam_width)[0]
    return "".join(chars[k] for k in best)


def lexicon_correct(word: str, lexicon: Sequence[str]) -> str:
    """Nearest lexicon entry by edit distance; earlier entries win ties."""
    if not lexicon:
        raise ValueError("lexicon is empty")
    best, best_d = None, None
    for entry in lexicon:
        d = edit_distance(word, entry)
        if best_d is None or d < best_d:
            best, best_d = entry, d
            if d == 0:
                break
    return best


def load_lexicon(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
