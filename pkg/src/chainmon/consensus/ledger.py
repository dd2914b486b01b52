"""Coin balances with age cohorts.

Time is measured in slices; one slice per block height, so coinage is
verifiable from the chain alone.  A cohort is ``(coins, acquired_slice)``.
"""
from __future__ import annotations

from typing import Iterable, Mapping

Cohorts = tuple[tuple[int, int], ...]


class CoinLedger:
    __slots__ = ("_cohorts", "_balances")

    def __init__(self, cohorts: Mapping[str, Cohorts] | None = None):
        self._cohorts: dict[str, Cohorts] = dict(cohorts or {})
        self._balances: dict[str, int] = {}

    @classmethod
    def endowed(cls, nodes: Iterable[str], coins: int, at: int = 0) -> "CoinLedger":
        return cls({n: ((coins, at),) if coins else () for n in nodes})

    def nodes(self) -> list[str]:
        return list(self._cohorts)

    def cohorts(self, node: str) -> Cohorts:
        return self._cohorts.get(node, ())

    def balance(self, node: str) -> int:
        bal = self._balances.get(node)
        if bal is None:
            bal = self._balances[node] = sum(c for c, _ in self.cohorts(node))
        return bal

    def total(self) -> int:
        return sum(self.balance(n) for n in self._cohorts)

    def coinage(self, node: str, now: int) -> int:
        return sum(c * (now - a) for c, a in self.cohorts(node) if now > a)

    def _with(self, node: str, cohorts: list[tuple[int, int]]) -> "CoinLedger":
        merged: dict[int, int] = {}
        for c, a in cohorts:
            if c:
                merged[a] = merged.get(a, 0) + c
        out = dict(self._cohorts)
        out[node] = tuple((c, a) for a, c in sorted(merged.items()))
        return CoinLedger(out)

    def credit(self, node: str, coins: int, now: int) -> "CoinLedger":
        return self._with(node, [*self.cohorts(node), (coins, now)])

    def invest(self, node: str, coins: int, now: int) -> "CoinLedger":
        """Self-transfer ``coins`` (oldest first): their age restarts at ``now``."""
        rest, moved = [], 0
        for c, a in self.cohorts(node):
            take = min(c, coins - moved)
            moved += take
            rest.append((c - take, a))
        rest.append((moved, now))
        return self._with(node, rest)

    def coins_for_investment(self, node: str, investment: int, now: int) -> int:
        """Coins, oldest first, whose combined coinage covers ``investment``."""
        if investment < 1 or investment > self.coinage(node, now):
            raise ValueError(f"investment {investment} outside 1..coinage for {node}")
        remaining, coins = investment, 0
        for c, a in self.cohorts(node):
            age = now - a
            if age <= 0:
                continue
            if remaining >= c * age:
                coins += c
                remaining -= c * age
            else:
                coins += -(-remaining // age)
                remaining = 0
            if remaining == 0:
                break
        return coins

    def __eq__(self, other) -> bool:
        return isinstance(other, CoinLedger) and self._cohorts == other._cohorts

    def __repr__(self) -> str:
        return f"CoinLedger({self._cohorts!r})"


def coinage(ledger: CoinLedger, node: str, now: int) -> int:
    return ledger.coinage(node, now)
