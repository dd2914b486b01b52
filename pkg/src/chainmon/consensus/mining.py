from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import replace
from typing import Callable, Iterable

from ..chain import Block, ObsKind, Observation, StakeProof, ProofMeta
from .ledger import CoinLedger
from .rules import ConsensusRules, stake_target


class StaleHead(Exception):
    """Mining was aborted because the head moved."""


class NonceSearch:
    """Ascending nonce search over one block template."""

    def __init__(self, template: Block, target: int):
        self.template = template
        self.target = target
        self.nonce = 0
        self._prefix = hashlib.sha256(template.prefix_bytes)

    def attempt(self, timestamp: float) -> Block | None:
        h = self._prefix.copy()
        h.update(struct.pack(">dQ", timestamp, self.nonce))
        nonce = self.nonce
        self.nonce += 1
        if int.from_bytes(h.digest(), "big") <= self.target:
            return replace(self.template, timestamp=timestamp, nonce=nonce)
        return None


def reward_obs(miner_id: str, rules: ConsensusRules, sim_time: int) -> Observation:
    return Observation(miner_id, sim_time, ObsKind.REWARD, amount=rules.block_reward)


def build_template(head: Block, pending: Iterable[Observation], miner_id: str, rules: ConsensusRules,
                   timestamp: float, proof_meta: ProofMeta = None,
                   extra: Iterable[Observation] = ()) -> Block:
    extra = list(extra)
    chosen = [o for o in pending if o not in extra][: rules.max_obs_per_block]
    obs = [*extra, *chosen, reward_obs(miner_id, rules, int(timestamp))]
    return Block(height=head.height + 1, prev_hash=head.digest, timestamp=timestamp,
                 observations=tuple(obs), nonce=0, miner_id=miner_id, proof_meta=proof_meta)


def search(template: Block, target: int, abort: Callable[[], bool] | None = None,
           max_attempts: int | None = None) -> tuple[Block, int]:
    """Run the nonce loop to completion.  Returns the block and the attempts used."""
    s = NonceSearch(template, target)
    while True:
        if abort is not None and abort():
            raise StaleHead(f"head moved while mining height {template.height}")
        if max_attempts is not None and s.nonce >= max_attempts:
            raise RuntimeError("attempt budget exhausted")
        found = s.attempt(template.timestamp)
        if found is not None:
            return found, s.nonce


def pow_mine(head: Block, pending: Iterable[Observation], rules: ConsensusRules,
             miner_id: str = "miner", timestamp: float | None = None,
             abort: Callable[[], bool] | None = None) -> Block:
    ts = head.timestamp if timestamp is None else timestamp
    template = build_template(head, pending, miner_id, rules, ts)
    return search(template, rules.base_target, abort)[0]


def draw_investment(ledger: CoinLedger, miner_id: str, height: int, rng: random.Random) -> int:
    """Uniform on 1..coinage; 0 means the miner holds no coinage and sits the round out."""
    age = ledger.coinage(miner_id, height)
    return rng.randint(1, age) if age > 0 else 0


def investment_obs(ledger: CoinLedger, miner_id: str, investment: int, height: int,
                   sim_time: int) -> Observation:
    coins = ledger.coins_for_investment(miner_id, investment, height)
    return Observation(miner_id, sim_time, ObsKind.COINAGE_INVESTMENT, amount=coins)


def pos_template(head: Block, pending: Iterable[Observation], ledger: CoinLedger, rules: ConsensusRules,
                 miner_id: str, investment: int, timestamp: float) -> tuple[Block, int]:
    inv = investment_obs(ledger, miner_id, investment, head.height + 1, int(timestamp))
    template = build_template(head, pending, miner_id, rules, timestamp,
                              proof_meta=StakeProof(investment), extra=[inv])
    return template, stake_target(rules, investment)


def pos_mine(head: Block, pending: Iterable[Observation], ledger: CoinLedger, rules: ConsensusRules,
             miner_id: str = "miner", rng: random.Random | None = None, timestamp: float | None = None,
             abort: Callable[[], bool] | None = None) -> Block | None:
    """Invest a random share of coinage, then mine against the eased target.

    Returns None when the miner has no coinage to invest.
    """
    rng = rng or random.Random(0)
    investment = draw_investment(ledger, miner_id, head.height + 1, rng)
    if investment == 0:
        return None
    ts = head.timestamp if timestamp is None else timestamp
    template, target = pos_template(head, pending, ledger, rules, miner_id, investment, ts)
    return search(template, target, abort)[0]
