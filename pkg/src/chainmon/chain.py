"""Blocks, canonical serialization, validation and the local block tree.

Canonical block layout (all integers big-endian)::

    u64   height
    32B   prev_hash
    str   miner_id
    u32   observation count, then each observation:
            str  sensor_id
            u64  sim_time
            u8   kind (0 sensor_reading, 1 coinage_investment, 2 reward)
            f64  value   (sensor_reading)  |  u64 amount (other kinds)
    meta  u8 tag
            0  none
            1  stake:  u64 investment
            2  ticket: u8 round, 32B output, u16 len + proof bytes, 32B seed
    f64   timestamp
    u64   nonce

``str`` is a u16 byte length followed by UTF-8.  Timestamp and nonce come
last so a miner can hash the constant prefix once per template.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Iterable

from .vrf import VrfProof

ZERO_HASH = bytes(32)
DIGEST_BITS = 256


class ObsKind(str, Enum):
    SENSOR_READING = "sensor_reading"
    COINAGE_INVESTMENT = "coinage_investment"
    REWARD = "reward"


_KIND_CODE = {ObsKind.SENSOR_READING: 0, ObsKind.COINAGE_INVESTMENT: 1, ObsKind.REWARD: 2}


class Reject(str, Enum):
    BAD_LINK = "bad_link"
    BAD_TIMESTAMP = "bad_timestamp"
    BAD_PROOF = "bad_proof"
    NOT_AUTHORIZED = "not_authorized"


@dataclass(frozen=True)
class Observation:
    sensor_id: str
    sim_time: int
    kind: ObsKind = ObsKind.SENSOR_READING
    value: float | None = None
    amount: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ObsKind(self.kind))
        if not isinstance(self.sim_time, int) or self.sim_time < 0:
            raise ValueError(f"sim_time must be a non-negative integer, got {self.sim_time!r}")
        if self.kind is ObsKind.SENSOR_READING:
            if self.value is None or not math.isfinite(self.value) or self.amount is not None:
                raise ValueError("sensor_reading needs a finite value and no amount")
        elif not isinstance(self.amount, int) or self.amount <= 0 or self.value is not None:
            raise ValueError(f"{self.kind.value} needs a positive integer amount")

    @cached_property
    def sort_key(self) -> tuple:
        payload = self.value if self.kind is ObsKind.SENSOR_READING else self.amount
        return (self.sensor_id, self.sim_time, _KIND_CODE[self.kind], payload)

    def __hash__(self) -> int:
        return hash(self._encoded)

    def to_bytes(self) -> bytes:
        return self._encoded

    @cached_property
    def _encoded(self) -> bytes:
        out = _pack_str(self.sensor_id) + struct.pack(">QB", self.sim_time, _KIND_CODE[self.kind])
        if self.kind is ObsKind.SENSOR_READING:
            return out + struct.pack(">d", self.value)
        return out + struct.pack(">Q", self.amount)

    def to_json(self) -> dict:
        d = {"sensor_id": self.sensor_id, "sim_time": self.sim_time, "kind": self.kind.value}
        if self.kind is ObsKind.SENSOR_READING:
            d["value"] = self.value
        else:
            d["amount"] = self.amount
        return d


@dataclass(frozen=True)
class StakeProof:
    investment: int


@dataclass(frozen=True)
class LotteryTicket:
    round: int
    vrf: VrfProof


ProofMeta = StakeProof | LotteryTicket | None


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


def _meta_bytes(meta: ProofMeta) -> bytes:
    if meta is None:
        return b"\x00"
    if isinstance(meta, StakeProof):
        return b"\x01" + struct.pack(">Q", meta.investment)
    v = meta.vrf
    return (b"\x02" + struct.pack(">B", meta.round) + v.output
            + struct.pack(">H", len(v.proof)) + v.proof + v.seed_used)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: float
    observations: tuple[Observation, ...] = ()
    nonce: int = 0
    miner_id: str = ""
    proof_meta: ProofMeta = None

    def __post_init__(self):
        obs = tuple(sorted(self.observations, key=lambda o: o.sort_key))
        object.__setattr__(self, "observations", obs)
        if len(self.prev_hash) != 32:
            raise ValueError("prev_hash must be 32 bytes")
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError("timestamp must be finite and non-negative")

    @cached_property
    def prefix_bytes(self) -> bytes:
        parts = [struct.pack(">Q", self.height), self.prev_hash, _pack_str(self.miner_id),
                 struct.pack(">I", len(self.observations))]
        parts.extend(o.to_bytes() for o in self.observations)
        parts.append(_meta_bytes(self.proof_meta))
        return b"".join(parts)

    def to_bytes(self) -> bytes:
        return self.prefix_bytes + struct.pack(">dQ", self.timestamp, self.nonce)

    @cached_property
    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    @cached_property
    def size(self) -> int:
        return len(self.prefix_bytes) + 16

    @property
    def digest_int(self) -> int:
        return int.from_bytes(self.digest, "big")

    def to_json(self) -> dict:
        meta = self.proof_meta
        if isinstance(meta, StakeProof):
            meta_json = {"investment": meta.investment}
        elif isinstance(meta, LotteryTicket):
            meta_json = {"round": meta.round, "output": meta.vrf.output.hex(),
                         "proof": meta.vrf.proof.hex(), "seed": meta.vrf.seed_used.hex()}
        else:
            meta_json = None
        return {
            "height": self.height,
            "hash": self.digest.hex(),
            "prev_hash": self.prev_hash.hex(),
            "timestamp": self.timestamp,
            "nonce": self.nonce,
            "miner_id": self.miner_id,
            "observations": [o.to_json() for o in self.observations],
            "proof_meta": meta_json,
        }


def block_hash(block: Block) -> bytes:
    return block.digest


def make_genesis() -> Block:
    return Block(height=0, prev_hash=ZERO_HASH, timestamp=0.0, miner_id="genesis")


def difficulty_target(nibbles: int) -> int:
    """Largest digest (as an integer) with at least ``nibbles`` leading zero hex digits."""
    if not 0 <= nibbles <= 64:
        raise ValueError(f"difficulty must be within 0..64 nibbles, got {nibbles}")
    return 16 ** (64 - nibbles) - 1


def leading_zero_nibbles(digest: bytes) -> int:
    h = digest.hex()
    return len(h) - len(h.lstrip("0"))


def validate_block(parent: Block, candidate: Block, rules=None,
                   proof_check: Callable[[Block, Block], Reject | None] | None = None) -> Reject | None:
    """Return ``None`` if ``candidate`` may extend ``parent``, else the rejection reason.

    ``proof_check`` is the consensus engine's hook; it covers both the proof
    and any access control.  Without one, the plain leading-zero difficulty
    of ``rules.difficulty_nibbles`` is enforced.
    """
    if candidate.prev_hash != parent.digest or candidate.height != parent.height + 1:
        return Reject.BAD_LINK
    if candidate.timestamp < parent.timestamp:
        return Reject.BAD_TIMESTAMP
    if proof_check is not None:
        return proof_check(parent, candidate)
    nibbles = 0 if rules is None else rules.difficulty_nibbles
    if candidate.digest_int > difficulty_target(nibbles):
        return Reject.BAD_PROOF
    return None


class ChainView:
    """A node's block tree: parent-closed store, height index and canonical head."""

    def __init__(self, genesis: Block, prune_depth: int = 6, peer_addresses: Iterable[str] = ()):
        self.genesis = genesis
        self.prune_depth = prune_depth
        self.peer_addresses: list[str] = list(peer_addresses)
        self.blocks: dict[bytes, Block] = {genesis.digest: genesis}
        self.children: dict[bytes, list[bytes]] = defaultdict(list)
        self.heights: dict[int, set[bytes]] = {0: {genesis.digest}}
        self.head = genesis.digest
        self._canon: list[bytes] = [genesis.digest]
        self._side: set[bytes] = set()
        self._block_bytes = genesis.size
        self.pruned_count = 0

    def __contains__(self, digest: bytes) -> bool:
        return digest in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def head_block(self) -> Block:
        return self.blocks[self.head]

    @property
    def height(self) -> int:
        return len(self._canon) - 1

    def add(self, block: Block) -> bool:
        """Store ``block``; its parent must already be stored.  Returns False on duplicates."""
        h = block.digest
        if h in self.blocks:
            return False
        if block.prev_hash not in self.blocks:
            raise KeyError(f"unknown parent {block.prev_hash.hex()[:16]}")
        self.blocks[h] = block
        self.children[block.prev_hash].append(h)
        self.heights.setdefault(block.height, set()).add(h)
        self._block_bytes += block.size
        self._side.add(h)
        return True

    def is_canonical(self, digest: bytes) -> bool:
        b = self.blocks.get(digest)
        return b is not None and b.height < len(self._canon) and self._canon[b.height] == digest

    def canonical_hash(self, height: int) -> bytes | None:
        return self._canon[height] if 0 <= height < len(self._canon) else None

    def canonical(self) -> list[Block]:
        return [self.blocks[h] for h in self._canon]

    def update_head(self):
        """Re-run fork choice.  Returns ``(removed, added)`` canonical blocks, or None if unchanged."""
        new = fork_choice(self)
        if new == self.head:
            return None
        path = []
        cur = new
        while not self.is_canonical(cur):
            path.append(cur)
            cur = self.blocks[cur].prev_hash
        fork_height = self.blocks[cur].height
        removed = self._canon[fork_height + 1:]
        added = path[::-1]
        self._canon = self._canon[: fork_height + 1] + added
        self._side.difference_update(added)
        self._side.update(removed)
        self.head = new
        return [self.blocks[h] for h in removed], [self.blocks[h] for h in added]

    def prune(self) -> list[Block]:
        """Drop side branches whose tip trails the head by more than ``prune_depth``."""
        limit = self.height - self.prune_depth
        roots = [h for h in self._side if self.blocks[h].prev_hash not in self._side]
        dropped: list[Block] = []
        for root in roots:
            subtree = [root]
            i = 0
            while i < len(subtree):
                subtree.extend(self.children.get(subtree[i], ()))
                i += 1
            if max(self.blocks[h].height for h in subtree) >= limit:
                continue
            for h in subtree:
                dropped.append(self._remove(h))
        self.pruned_count += len(dropped)
        return dropped

    def _remove(self, h: bytes) -> Block:
        block = self.blocks.pop(h)
        self._side.discard(h)
        self.children.pop(h, None)
        siblings = self.children.get(block.prev_hash)
        if siblings and h in siblings:
            siblings.remove(h)
        self.heights[block.height].discard(h)
        if not self.heights[block.height]:
            del self.heights[block.height]
        self._block_bytes -= block.size
        return block

    def locator(self) -> list[bytes]:
        """Canonical hashes at exponentially spaced depths, head first, genesis last."""
        out, step, h = [], 1, self.height
        while h > 0:
            out.append(self._canon[h])
            if len(out) >= 10:
                step *= 2
            h -= step
        out.append(self._canon[0])
        return out

    def segment_after(self, wanted: bytes, known: Iterable[bytes]) -> list[Block] | None:
        """Ancestors of ``wanted`` (inclusive) above the first hash in ``known``, oldest first."""
        if wanted not in self.blocks:
            return None
        known = set(known)
        out = []
        cur = wanted
        while cur not in known and cur != self.genesis.digest:
            out.append(self.blocks[cur])
            cur = self.blocks[cur].prev_hash
        return out[::-1]


def fork_choice(view: ChainView) -> bytes:
    """Tip with greatest height; equal heights go to the numerically smallest digest."""
    top = max(view.heights)
    return min(view.heights[top], key=lambda h: int.from_bytes(h, "big"))


def chain_weight_bytes(view: ChainView) -> int:
    return view._block_bytes + sum(len(a.encode("utf-8")) for a in view.peer_addresses)


def dump_jsonl(blocks: Iterable[Block]) -> str:
    return "".join(json.dumps(b.to_json(), sort_keys=True) + "\n" for b in blocks)
