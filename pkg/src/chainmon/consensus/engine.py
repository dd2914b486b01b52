"""Per-method proof checks and the chain-derived state every node keeps in sync."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..chain import (Block, ChainView, LotteryTicket, ObsKind, Observation, Reject, StakeProof,
                     validate_block)
from ..vrf import VrfPublicKey
from .ledger import CoinLedger
from .lottery import AccessState, verify_selection
from .rules import ConsensusRules, kernel_target, stake_target


@dataclass(frozen=True)
class BranchState:
    """Everything a block's ancestry determines: ledger, recent creators, monitor sync values."""
    height: int
    digest: bytes
    prev_digest: bytes
    ledger: CoinLedger
    recent_miners: tuple[str, ...]
    sync: dict = field(default_factory=dict)  # node -> (sim_time, value)


class ConsensusEngine:
    def __init__(self, rules: ConsensusRules, members: list[str],
                 public_keys: dict[str, VrfPublicKey] | None = None):
        self.rules = rules
        self.members = list(members)
        self._member_set = set(members)
        self.public_keys = public_keys or {}
        if rules.uses_lottery and not set(members) <= set(self.public_keys):
            raise ValueError("every member needs a VRF public key for the lottery methods")

    def genesis_state(self, genesis: Block) -> BranchState:
        ledger = CoinLedger.endowed(self.members, self.rules.initial_coins, at=0)
        return BranchState(0, genesis.digest, genesis.prev_hash, ledger, ())

    @property
    def race_target(self) -> int:
        if self.rules.uses_lottery:
            return kernel_target(self.rules, len(self.members))
        return self.rules.base_target

    def derive(self, parent: BranchState, block: Block) -> BranchState:
        ledger = parent.ledger
        sync = parent.sync
        copied = False
        for o in block.observations:
            if o.kind is ObsKind.COINAGE_INVESTMENT:
                ledger = ledger.invest(o.sensor_id, o.amount, block.height)
            elif o.kind is ObsKind.REWARD:
                ledger = ledger.credit(o.sensor_id, o.amount, block.height)
            else:
                if not copied:
                    sync, copied = dict(sync), True
                prev = sync.get(o.sensor_id)
                if prev is None or o.sim_time >= prev[0]:
                    sync[o.sensor_id] = (o.sim_time, o.value)
        keep = max(self.rules.ban_window, 1)
        recent = (parent.recent_miners + (block.miner_id,))[-keep:]
        return BranchState(block.height, block.digest, block.prev_hash, ledger, recent, sync)

    def check(self, parent: Block, parent_state: BranchState, candidate: Block,
              whitelist: set[str] | None = None) -> Reject | None:
        """Method-specific proof check, then access control."""
        rules = self.rules
        rewards = [o for o in candidate.observations if o.kind is ObsKind.REWARD]
        if (len(rewards) != 1 or rewards[0].sensor_id != candidate.miner_id
                or rewards[0].amount != rules.block_reward):
            return Reject.BAD_PROOF
        if candidate.miner_id not in self._member_set:
            return Reject.NOT_AUTHORIZED
        for o in candidate.observations:
            if o.kind is ObsKind.COINAGE_INVESTMENT and (
                    o.sensor_id not in self._member_set
                    or o.amount > parent_state.ledger.balance(o.sensor_id)):
                return Reject.BAD_PROOF
        meta = candidate.proof_meta
        h = candidate.digest_int

        if rules.method == "pow":
            return None if meta is None and h <= rules.base_target else Reject.BAD_PROOF

        if rules.method == "pos":
            if not isinstance(meta, StakeProof):
                return Reject.BAD_PROOF
            ledger, miner = parent_state.ledger, candidate.miner_id
            if not 1 <= meta.investment <= ledger.coinage(miner, candidate.height):
                return Reject.BAD_PROOF
            coins = ledger.coins_for_investment(miner, meta.investment, candidate.height)
            own = [o for o in candidate.observations
                   if o.kind is ObsKind.COINAGE_INVESTMENT and o.sensor_id == miner and o.amount == coins]
            if not own or h > stake_target(rules, meta.investment):
                return Reject.BAD_PROOF
            return None

        # dpow / ppokw
        if not isinstance(meta, LotteryTicket):
            return Reject.BAD_PROOF
        seeds = (parent.digest, parent.prev_hash)
        pk = self.public_keys.get(candidate.miner_id)
        if not verify_selection(candidate.miner_id, meta.round, meta.vrf, pk, seeds, rules):
            return Reject.BAD_PROOF
        if h > self.race_target:
            return Reject.BAD_PROOF
        if rules.method == "ppokw":
            if whitelist is not None and candidate.miner_id not in whitelist:
                return Reject.NOT_AUTHORIZED
            if rules.ban_window and candidate.miner_id in parent_state.recent_miners[-rules.ban_window:]:
                return Reject.NOT_AUTHORIZED
        return None


@dataclass
class Outcome:
    accepted: list[Block] = field(default_factory=list)
    rejected: list[tuple[Block, Reject]] = field(default_factory=list)
    removed: list[Block] = field(default_factory=list)
    added: list[Block] = field(default_factory=list)
    pruned: list[Block] = field(default_factory=list)
    orphaned: bool = False
    duplicate: bool = False

    @property
    def head_changed(self) -> bool:
        return bool(self.added)


class EngineState:
    """A node's consensus-side state: block tree, derived states, pending pool, access control."""

    def __init__(self, engine: ConsensusEngine, genesis: Block, peer_addresses=(),
                 state_cache: dict[bytes, BranchState] | None = None):
        self.engine = engine
        self.rules = engine.rules
        self.view = ChainView(genesis, engine.rules.prune_depth, peer_addresses)
        self.states = state_cache if state_cache is not None else {}
        if genesis.digest not in self.states:
            self.states[genesis.digest] = engine.genesis_state(genesis)
        self.pending: dict[Observation, None] = {}
        self.canon_obs: set[Observation] = set()
        self.orphans: dict[bytes, list[Block]] = {}
        self.access = AccessState(whitelist=set(engine.members), current_seed=genesis.digest,
                                  prev_seed=genesis.prev_hash, threshold=engine.rules.lottery_threshold)

    @property
    def head(self) -> Block:
        return self.view.head_block

    @property
    def head_state(self) -> BranchState:
        return self.states[self.view.head]

    def state_of(self, digest: bytes) -> BranchState:
        return self.states[digest]

    def add_pending(self, obs: Observation) -> bool:
        if obs in self.pending or obs in self.canon_obs:
            return False
        self.pending[obs] = None
        return True

    def check(self, parent: Block, candidate: Block) -> Reject | None:
        return validate_block(parent, candidate, self.rules, proof_check=lambda p, c: self.engine.check(
            p, self.states[p.digest], c, self.access.whitelist))

    def receive(self, block: Block) -> Outcome:
        out = Outcome()
        if block.digest in self.view:
            out.duplicate = True
            return out
        if block.prev_hash not in self.view:
            siblings = self.orphans.setdefault(block.prev_hash, [])
            if all(b.digest != block.digest for b in siblings):
                siblings.append(block)
            out.orphaned = True
            return out
        queue = [block]
        while queue:
            b = queue.pop(0)
            if b.digest in self.view:
                continue
            reason = self.check(self.view.blocks[b.prev_hash], b)
            if reason is not None:
                out.rejected.append((b, reason))
                self.orphans.pop(b.digest, None)
                continue
            self.view.add(b)
            if b.digest not in self.states:
                self.states[b.digest] = self.engine.derive(self.states[b.prev_hash], b)
            out.accepted.append(b)
            queue.extend(self.orphans.pop(b.digest, []))
        if out.accepted:
            self._refresh_head(out)
        return out

    def _refresh_head(self, out: Outcome) -> None:
        change = self.view.update_head()
        if change is not None:
            removed, added = change
            old_obs = [o for b in removed for o in b.observations if o.kind is not ObsKind.REWARD]
            new_obs = [o for b in added for o in b.observations if o.kind is not ObsKind.REWARD]
            self.canon_obs.difference_update(old_obs)
            self.canon_obs.update(new_obs)
            for o in old_obs:
                if o not in self.canon_obs:
                    self.pending[o] = None
            for o in new_obs:
                self.pending.pop(o, None)
            out.removed.extend(removed)
            out.added.extend(added)
            head = self.view.head_block
            self.access.recent_miners = self.head_state.recent_miners
            self.access.current_seed = head.digest
            self.access.prev_seed = head.prev_hash
        out.pruned.extend(self.view.prune())

    def evict(self, node: str) -> None:
        self.access.whitelist.discard(node)


def engine_on_block(state: EngineState, block: Block) -> Outcome:
    return state.receive(block)
