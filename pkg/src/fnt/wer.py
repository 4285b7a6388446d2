"""Token error rate via minimal-cost Levenshtein alignment."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self):
        if self.ref_len == 0:
            return 0.0
        return self.errors / self.ref_len

    def __add__(self, other):
        return WerReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )

    def as_dict(self):
        return {
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "ref_len": self.ref_len,
            "wer": self.wer,
        }


def wer(ref, hyp):
    """Alignment with unit costs; substitution preferred over insert+delete."""
    ref = [int(t) for t in ref]
    hyp = [int(t) for t in hyp]
    if not ref:
        raise ValidationError("wer: empty reference")
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dp[i, j] = min(sub, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    # traceback for the S/D/I breakdown
    i, j = n, m
    s = d = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    report = WerReport(int(s), int(d), int(ins), n)
    assert report.errors == int(dp[n, m])
    return report


def edit_distance_recursive(ref, hyp):
    """Independent memoized-recursion oracle for the alignment cost."""
    ref = tuple(ref)
    hyp = tuple(hyp)

    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            dist(i - 1, j) + 1,
            dist(i, j - 1) + 1,
            dist(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]),
        )

    return dist(len(ref), len(hyp))


def aggregate(reports):
    total = WerReport()
    for r in reports:
        total = total + r
    return total
