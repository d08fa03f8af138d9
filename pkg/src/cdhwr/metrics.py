"""Edit distance and word/character error measures."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit-cost insert, delete and substitute."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _pairs(pairs: Iterable[tuple[str, str]]) -> list[tuple[str, str]]:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one (ground truth, prediction) pair")
    return pairs


def cer(pairs: Iterable[tuple[str, str]]) -> float:
    """Character error rate in percent: total edit distance over total GT length.

    Can exceed 100 when predictions are much longer than the ground truth.
    """
    pairs = _pairs(pairs)
    chars = sum(len(gt) for gt, _ in pairs)
    if chars == 0:
        raise ValueError("character error rate is undefined when every ground truth is empty")
    return 100.0 * sum(edit_distance(gt, pt) for gt, pt in pairs) / chars


def wa_waf(pairs: Iterable[tuple[str, str]], flexibility: int = 2) -> tuple[float, float]:
    """Percent of exact matches and percent within ``flexibility`` edits."""
    pairs = _pairs(pairs)
    dists = [edit_distance(gt, pt) for gt, pt in pairs]
    n = len(dists)
    return (100.0 * sum(d == 0 for d in dists) / n,
            100.0 * sum(d <= flexibility for d in dists) / n)


@dataclass
class EvalReport:
    cer: float
    wer: float
    wa: float
    waf: float
    samples: int
    gt_chars: int
    exact: int
    within2: int

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "EvalReport":
        pairs = _pairs(pairs)
        dists = [edit_distance(gt, pt) for gt, pt in pairs]
        chars = sum(len(gt) for gt, _ in pairs)
        if chars == 0:
            raise ValueError("character error rate is undefined when every ground truth is empty")
        n = len(pairs)
        exact = sum(d == 0 for d in dists)
        within2 = sum(d <= 2 for d in dists)
        wa = 100.0 * exact / n
        return cls(cer=100.0 * sum(dists) / chars, wer=100.0 - wa, wa=wa,
                   waf=100.0 * within2 / n, samples=n, gt_chars=chars,
                   exact=exact, within2=within2)

    @property
    def counts(self) -> dict:
        return {"samples": self.samples, "gt_chars": self.gt_chars,
                "exact": self.exact, "within2": self.within2}

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"cer": d["cer"], "wer": d["wer"], "wa": d["wa"], "waf": d["waf"],
                "counts": self.counts}

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, sort_keys=True)

    def table(self) -> str:
        rows = [("WA", self.wa), ("WAF", self.waf), ("CER", self.cer), ("WER", self.wer)]
        lines = [f"{'measure':<8}{'value':>8}", "-" * 16]
        lines += [f"{name:<8}{value:>8.2f}" for name, value in rows]
        lines.append(f"samples={self.samples} chars={self.gt_chars} "
                     f"exact={self.exact} within2={self.within2}")
        return "\n".join(lines)
