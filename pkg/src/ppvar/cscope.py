"""Decomposition plans in the C-scope of a K-factor model.

A plan picks a nonempty set of manifest factors, orders them into
conditioning blocks B_1..B_m, and leaves every other factor latent (mixed
out before conditioning). Each plan yields m + 1 terms: the leading
E..E Var term and one Var-E term per block.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import comb

MAX_ENUM_K = 6


class PlanError(ValueError):
    """A plan violates one of its structural invariants."""


class PlanSyntaxError(ValueError):
    def __init__(self, text: str, position: int, message: str):
        super().__init__(f"{message} at position {position} in plan {text!r}")
        self.text = text
        self.position = position


@dataclass(frozen=True)
class DecompositionPlan:
    blocks: tuple[tuple[int, ...], ...]
    latent: frozenset[int]
    K: int

    def __post_init__(self):
        blocks = tuple(tuple(sorted(b)) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "latent", frozenset(self.latent))
        if self.K < 1:
            raise PlanError("K must be positive")
        if not blocks:
            raise PlanError("plan needs at least one block (m >= 1)")
        seen: set[int] = set()
        for b in blocks:
            if not b:
                raise PlanError("blocks must be nonempty")
            if seen & set(b):
                raise PlanError("blocks must be pairwise disjoint")
            seen |= set(b)
        universe = set(range(1, self.K + 1))
        if not (seen | self.latent) <= universe:
            raise PlanError(f"plan references factors outside 1..{self.K}")
        if seen & self.latent:
            raise PlanError("a factor cannot be both manifest and latent")
        if seen | self.latent != universe:
            raise PlanError("every factor must be in a block or latent")

    @classmethod
    def from_blocks(cls, blocks, K: int) -> "DecompositionPlan":
        blocks = tuple(tuple(b) for b in blocks)
        manifest = {k for b in blocks for k in b}
        return cls(blocks, frozenset(set(range(1, K + 1)) - manifest), K)

    @property
    def manifest(self) -> frozenset[int]:
        return frozenset(k for b in self.blocks for k in b)

    @property
    def m(self) -> int:
        return len(self.blocks)

    def text(self) -> str:
        return "|".join(",".join(str(k) for k in b) for b in self.blocks)

    def sort_key(self):
        return (len(self.manifest), self.blocks)

    def __str__(self):
        return self.text()


@dataclass(frozen=True)
class TermLabel:
    pattern: str
    # 0 for the leading E..E Var term, otherwise the block position j (1-based)
    block: int

    @property
    def kind(self) -> str:
        return "E-Var" if self.block == 0 else "Var-E"

    def __str__(self):
        return self.pattern


def fubini(n: int) -> int:
    """Number of ordered set partitions of an n-element set."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    return _fubini(n)


@lru_cache(maxsize=None)
def _fubini(n: int) -> int:
    if n == 0:
        return 1
    return sum(comb(n, i) * _fubini(n - i) for i in range(1, n + 1))


def count_plans(K: int) -> int:
    if not isinstance(K, int) or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    return sum(comb(K, j) * fubini(j) for j in range(1, K + 1))


def ordered_set_partitions(items: tuple[int, ...]):
    """Yield every ordered partition of ``items`` into nonempty blocks."""
    if not items:
        yield ()
        return
    n = len(items)
    for r in range(1, n + 1):
        for first in itertools.combinations(items, r):
            rest = tuple(x for x in items if x not in first)
            for tail in ordered_set_partitions(rest):
                yield (first,) + tail


def enumerate_plans(K: int) -> list[DecompositionPlan]:
    if not isinstance(K, int) or not 1 <= K <= MAX_ENUM_K:
        raise ValueError(f"K must be an integer in 1..{MAX_ENUM_K}, got {K!r}")
    plans = []
    universe = tuple(range(1, K + 1))
    for size in range(1, K + 1):
        for subset in itertools.combinations(universe, size):
            latent = frozenset(universe) - set(subset)
            for blocks in ordered_set_partitions(subset):
                plans.append(DecompositionPlan(blocks, latent, K))
    plans.sort(key=DecompositionPlan.sort_key)
    return plans


def _block_name(block: tuple[int, ...]) -> str:
    return ",".join(f"V{k}" for k in block)


def term_labels(plan: DecompositionPlan) -> list[TermLabel]:
    """Labels in result order: leading term, then blocks m down to 1."""
    if not isinstance(plan, DecompositionPlan):
        raise PlanError("term_labels needs a DecompositionPlan")
    blocks = plan.blocks
    prefix = ["E_{" + _block_name(b) + "}" for b in blocks]
    cond_all = ",".join(f"V{k}" for b in blocks for k in b)
    labels = [TermLabel("".join(prefix) + f"Var(Y|{cond_all},D)", 0)]
    for j in range(len(blocks), 0, -1):
        cond = ",".join(f"V{k}" for b in blocks[:j] for k in b)
        pattern = "".join(prefix[: j - 1]) + "Var_{" + _block_name(blocks[j - 1]) + "}" + f"E(Y|{cond},D)"
        labels.append(TermLabel(pattern, j))
    return labels


def parse_plan(text: str, K: int) -> DecompositionPlan:
    """Parse "1|2" (blocks split by '|', factors by ','); omitted factors are latent."""
    blocks: list[list[int]] = [[]]
    seen: dict[int, int] = {}
    i = 0
    expect_number = True
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit():
            if not expect_number:
                raise PlanSyntaxError(text, i, "expected ',' or '|'")
            start = i
            while i < len(text) and text[i].isdigit():
                i += 1
            k = int(text[start:i])
            if not 1 <= k <= K:
                raise PlanSyntaxError(text, start, f"factor {k} outside 1..{K}")
            if k in seen:
                raise PlanSyntaxError(text, start, f"factor {k} repeated")
            seen[k] = start
            blocks[-1].append(k)
            expect_number = False
            continue
        if ch in ",|":
            if expect_number:
                raise PlanSyntaxError(text, i, "expected a factor index")
            if ch == "|":
                blocks.append([])
            expect_number = True
            i += 1
            continue
        raise PlanSyntaxError(text, i, f"unexpected character {ch!r}")
    if expect_number:
        raise PlanSyntaxError(text, len(text), "expected a factor index")
    return DecompositionPlan.from_blocks(blocks, K)
