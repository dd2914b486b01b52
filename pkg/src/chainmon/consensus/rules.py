from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from functools import lru_cache

from ..chain import difficulty_target

METHODS = ("pow", "pos", "dpow", "ppokw")


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=1024)
def exact(x: float | int | str) -> Fraction:
    """Decimal reading of a config number (0.01 means 1/100, not the nearest double)."""
    return Fraction(str(x))


@dataclass(frozen=True)
class ConsensusRules:
    method: str = "pow"
    difficulty_nibbles: int = 2
    block_reward: int = 1
    committee_target: int = 1
    lottery_threshold: float = 0.25
    ban_window: int = 3
    pos_alpha: float = 0.01
    initial_coins: int = 100
    prune_depth: int = 6
    max_obs_per_block: int = 64
    empty_blocks: bool = True
    kernel_easing: bool = True
    vrf_bits: int = 1024

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown consensus method {self.method!r}")
        if not 0 <= self.difficulty_nibbles <= 64:
            raise ConfigError("difficulty_nibbles must be within 0..64")
        if self.block_reward <= 0 or self.initial_coins < 0:
            raise ConfigError("block_reward must be positive and initial_coins non-negative")
        if self.committee_target < 1:
            raise ConfigError("committee_target must be >= 1")
        if not 0 < self.lottery_threshold <= 1:
            raise ConfigError("lottery_threshold must lie in (0, 1]")
        if self.ban_window < 0 or self.prune_depth < 0 or self.max_obs_per_block < 1:
            raise ConfigError("ban_window/prune_depth must be >= 0, max_obs_per_block >= 1")
        if self.pos_alpha <= 0:
            raise ConfigError("pos_alpha must be positive")

    @property
    def base_target(self) -> int:
        return difficulty_target(self.difficulty_nibbles)

    @property
    def uses_lottery(self) -> bool:
        return self.method in ("dpow", "ppokw")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def default_committee_target(n_nodes: int) -> int:
    return max(1, math.ceil(0.2 * n_nodes))


def threshold_for_round(base: float, rnd: int) -> float:
    return min(1.0, base * 2**rnd)


def relax_difficulty(threshold: float) -> float:
    """Double the selection probability after a lottery round came up short, capped at 1."""
    return min(1.0, 2 * threshold)


def max_relax_rounds(base: float) -> int:
    r = 0
    while threshold_for_round(base, r) < 1.0:
        r += 1
    return r


def cap(target: int | Fraction) -> int:
    return min(int(target), 2**256 - 1)


@lru_cache(maxsize=1 << 14)
def stake_target(rules: ConsensusRules, investment: int) -> int:
    """Eased target: base target scaled by ``1 + alpha * investment``."""
    return cap(rules.base_target * (1 + exact(rules.pos_alpha) * investment))


def kernel_target(rules: ConsensusRules, n_members: int) -> int:
    """Race target for the committee methods.

    With easing on, the committee mines at ``n_members / committee_target``
    times the base target, so a committee of the intended size finds blocks
    about as often as the whole network would under plain proof-of-work.
    """
    if not rules.kernel_easing:
        return rules.base_target
    return cap(rules.base_target * Fraction(n_members, rules.committee_target))
