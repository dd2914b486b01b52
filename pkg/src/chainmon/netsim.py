"""Deterministic discrete-event simulation of the peer-to-peer network.

One global event queue ordered by ``(time, sequence number)``.  Nodes mine in
fixed slices of simulated time: a slice of length ``L`` performs
``hash_rate * L`` real SHA-256 attempts whose timestamps are spread evenly
over the slice, so a block found mid-slice carries an interpolated time.
Every message is delivered exactly once after ``link_latency`` seconds.
"""
from __future__ import annotations

import bisect
import heapq
import itertools
import json
import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Sequence

from .chain import (Block, LotteryTicket, ObsKind, Observation, Reject, StakeProof, chain_weight_bytes,
                    dump_jsonl, make_genesis)
from .consensus.engine import ConsensusEngine, EngineState
from .consensus.lottery import Blocked, below_threshold, ppokw_gate, verify_selection
from .consensus.mining import NonceSearch, build_template, draw_investment, investment_obs
from .consensus.rules import ConfigError, ConsensusRules, stake_target, threshold_for_round
from .metrics import BLOCK, MINING, MetricEvent, MetricsSink, dumps_summary, summarize
from .monitor import (MonitorState, SensorStream, VIOLATION, assign_round_robin, detect_global_event,
                      local_condition, percentile_threshold, write_events_csv)
from .vrf import VrfKeyPair, VrfProof, vrf_keygen, vrf_prove

# event kinds; the order only matters for readability of traces
DELIVER, SLICE_END, FOUND, READING, WINDOW, LOTTERY_CLOSE, POLL, JOIN, FRAUD, REFRESH = (
    "deliver", "slice_end", "found", "reading", "window", "lottery_close", "poll", "join", "fraud",
    "refresh")


class InvariantViolation(RuntimeError):
    pass


@dataclass
class SimConfig:
    n_nodes: int = 5
    duration: float = 3600.0
    hash_rate: float = 2.0
    link_latency: float = 0.05
    rng_seed: int = 0
    target_block_time: float = 40.0
    slice_length: float = 1.0
    window: float = 60.0
    sync_interval: float = 60.0
    lottery_window: float | None = None  # None: three link latencies
    threshold: float | None = None  # None: 75th percentile of the readings in [0, duration]
    join_times: dict[int, float] = field(default_factory=dict)
    fraud_times: dict[int, float] = field(default_factory=dict)
    trace: bool = False
    trace_limit: int = 5000

    def __post_init__(self):
        if not isinstance(self.n_nodes, int) or self.n_nodes < 1:
            raise ConfigError("n_nodes must be a positive integer")
        if not self.duration > 0:
            raise ConfigError("duration must be > 0")
        if not self.hash_rate > 0:
            raise ConfigError("hash_rate must be > 0")
        if self.link_latency < 0 or not self.slice_length > 0 or not self.window > 0:
            raise ConfigError("link_latency must be >= 0; slice_length and window > 0")
        if self.sync_interval < 0:
            raise ConfigError("sync_interval must be >= 0 (0 disables polling)")
        self.join_times = {int(k): float(v) for k, v in self.join_times.items()}
        self.fraud_times = {int(k): float(v) for k, v in self.fraud_times.items()}
        for k in [*self.join_times, *self.fraud_times]:
            if not 0 <= k < self.n_nodes:
                raise ConfigError(f"node index {k} out of range")

    @property
    def effective_lottery_window(self) -> float:
        if self.lottery_window is not None:
            return self.lottery_window
        return max(3 * self.link_latency, 1e-3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["join_times"] = {str(k): v for k, v in sorted(self.join_times.items())}
        d["fraud_times"] = {str(k): v for k, v in sorted(self.fraud_times.items())}
        return d


# ---------------------------------------------------------------- messages

def _str_len(s: str) -> int:
    return 2 + len(s.encode("utf-8"))


@dataclass(frozen=True)
class DataRequest:
    wanted: bytes | None  # None: the peer's head
    locator: tuple[bytes, ...]

    @property
    def size(self) -> int:
        return 1 + 32 + 2 + 32 * len(self.locator)


@dataclass(frozen=True)
class DataResponse:
    block: Block | None
    head: bytes
    found: bool = True

    @property
    def size(self) -> int:
        return self.block.size if self.block is not None else 1 + 32


@dataclass(frozen=True)
class LotteryAnnounce:
    node: str
    round: int
    proof: VrfProof

    @property
    def size(self) -> int:
        return _str_len(self.node) + 1 + 32 + 2 + len(self.proof.proof) + 32


@dataclass(frozen=True)
class LotteryVerify:
    node: str
    seed: bytes
    accepted: bool
    reason: str = ""

    @property
    def size(self) -> int:
        return _str_len(self.node) + 32 + 1 + _str_len(self.reason)


def payload_size(payload: Any) -> int:
    if isinstance(payload, Observation):
        return len(payload.to_bytes())
    return payload.size


@dataclass(frozen=True)
class Message:
    msg_type: str
    src: str
    dst: str
    payload_bytes: int
    send_time: float
    deliver_time: float
    payload: Any = field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------- mining

@dataclass(frozen=True)
class MiningStep:
    status: str  # progressed | block_found
    block: Block | None
    attempts: int
    times: tuple[float, ...]


def mining_step(search: NonceSearch, start: float, length: float, budget: int) -> MiningStep:
    """Spend ``budget`` attempts spread evenly over ``[start, start + length]``.

    Attempt ``j`` is stamped ``start + (j + 1) * length / budget`` and that
    timestamp is what gets hashed, so a hit mid-slice carries its own time.
    """
    return attempts_at(search, [start + (j + 1) * length / budget for j in range(budget)])


def attempts_at(search: NonceSearch, stamps: Sequence[float]) -> MiningStep:
    """Try one nonce per timestamp, stopping at the first hit."""
    for j, ts in enumerate(stamps):
        blk = search.attempt(ts)
        if blk is not None:
            return MiningStep("block_found", blk, j + 1, tuple(stamps[:j + 1]))
    return MiningStep("progressed", None, len(stamps), tuple(stamps))


@lru_cache(maxsize=256)
def node_keys(rng_seed: int, index: int, bits: int) -> VrfKeyPair:
    return vrf_keygen(("node-key", rng_seed, index), bits)


def node_name(index: int, n_nodes: int) -> str:
    return f"node{index:0{max(2, len(str(n_nodes - 1)))}d}"


# ---------------------------------------------------------------- nodes

class Node:
    def __init__(self, sim: "Simulation", index: int, node_id: str, state: EngineState,
                 keys: VrfKeyPair | None, sensors: list[SensorStream]):
        self.sim = sim
        self.index = index
        self.id = node_id
        self.state = state
        self.keys = keys
        self.sensors = sensors
        self.sink = MetricsSink(node_id, sim.cfg.window, sim.cfg.duration)
        self.rng = random.Random(f"node-rng:{sim.cfg.rng_seed}:{index}")
        self.live = False
        self.peers: list["Node"] = []
        self._poll_ptr = 0
        # mining
        self.mining = False
        self.token = 0
        self.search: NonceSearch | None = None
        self.dirty = False
        self.carry = 0.0
        self.slice_start = 0.0
        self.slice_times: tuple[float, ...] = ()
        self._refresh_key: tuple[int, float] | None = None
        # proof-of-stake round
        self.investment = 0
        self.invest_obs: Observation | None = None
        self.invest_outstanding: Observation | None = None
        # lottery race
        self.race_id = 0
        self.race_seed: bytes | None = None
        self.race_round = 0
        self.race_decided = False
        self.my_proof: VrfProof | None = None
        self.my_round: int | None = None
        self.ticket: LotteryTicket | None = None
        self.announcements: dict[bytes, dict[str, tuple[int, VrfProof]]] = {}
        self.unverified: dict[bytes, list[LotteryAnnounce]] = {}
        # monitoring
        self.latest: dict[str, float] = {}
        self.report: Observation | None = None
        self.reports_sent: list[Observation] = []
        self.report_times: list[float] = []  # exact emission time of each report
        # sync
        self.requested: set[bytes] = set()
        self.fraudulent = False

    # -- helpers -------------------------------------------------------

    @property
    def rules(self) -> ConsensusRules:
        return self.state.rules

    @property
    def head(self) -> Block:
        return self.state.head

    def _metric(self, kind: str, t: float, **kw) -> None:
        self.sink.record_event(MetricEvent(kind, t, **kw))

    def whitelisted(self) -> bool:
        return self.id in self.state.access.whitelist

    # -- lifecycle -----------------------------------------------------

    def join(self, t: float, late: bool) -> None:
        self.live = True
        self.sim.log(t, JOIN, self.id, "late" if late else "")
        if late and self.peers:
            peer = self._next_peer()
            if peer is not None:
                sync_request(self, peer, t, None, full=True)
        self._new_round(t)
        self.evaluate(t)
        if self.sim.cfg.sync_interval > 0 and len(self.sim.nodes) > 1:
            n = len(self.sim.nodes)
            first = t + self.sim.cfg.sync_interval * (1 + self.index / n)
            self.sim.schedule(first, POLL, self, None)

    def _next_peer(self) -> "Node | None":
        live = [p for p in self.peers if p.live]
        if not live:
            return None
        peer = live[self._poll_ptr % len(live)]
        self._poll_ptr += 1
        return peer

    # -- mining --------------------------------------------------------

    def _should_mine(self) -> bool:
        if not self.live:
            return False
        r = self.rules
        if not r.empty_blocks and not self.state.pending:
            return False
        if r.method == "pow":
            return True
        if r.method == "pos":
            return self.invest_obs is not None
        return self.ticket is not None and (r.method != "ppokw" or self.whitelisted())

    def _template_pending(self) -> list[Observation]:
        ledger = self.state.head_state.ledger
        balances: dict[str, int] = {}
        out = []
        cap = self.rules.max_obs_per_block
        for o in self.state.pending:
            # an investment may outrun the balance on this branch after a reorg
            if o.kind is ObsKind.COINAGE_INVESTMENT:
                bal = balances.get(o.sensor_id)
                if bal is None:
                    bal = balances[o.sensor_id] = ledger.balance(o.sensor_id)
                if o.amount > bal:
                    continue
            out.append(o)
            if len(out) >= cap:
                break
        return out

    def _retemplate(self, t: float) -> None:
        r = self.rules
        head = self.head
        pending = self._template_pending()
        if r.method == "pos":
            tmpl = build_template(head, [o for o in pending if o != self.invest_obs][: r.max_obs_per_block - 1],
                                  self.id, r, t, proof_meta=StakeProof(self.investment),
                                  extra=[self.invest_obs])
            target = stake_target(r, self.investment)
        elif r.uses_lottery:
            tmpl = build_template(head, pending, self.id, r, t, proof_meta=self.ticket)
            target = self.state.engine.race_target
        else:
            tmpl = build_template(head, pending, self.id, r, t)
            target = r.base_target
        self.search = NonceSearch(tmpl, target)
        self.dirty = False

    def start_mining(self, t: float) -> None:
        self.abort_mining(t)
        if not self._should_mine() or t >= self.sim.cfg.duration:
            return
        self.mining = True
        self.search = None
        self._start_slice(t)

    def _start_slice(self, t: float) -> None:
        cfg = self.sim.cfg
        if self.search is None or self.dirty:
            self._retemplate(t)
        total = self.carry + cfg.hash_rate * cfg.slice_length
        budget = int(total)
        self.carry = total - budget
        self.slice_start = t
        step = mining_step(self.search, t, cfg.slice_length, budget)
        self.slice_times = step.times
        if step.block is not None:
            self.sim.schedule(step.times[-1], FOUND, self, (self.token, step.block))
        else:
            self.sim.schedule(t + cfg.slice_length, SLICE_END, self, self.token)

    def request_refresh(self, t: float) -> None:
        """New pending observations: rebuild the template just before the next attempt.

        Arrivals between two attempts share one rebuild.
        """
        idx = bisect.bisect_right(self.slice_times, t)
        if idx >= len(self.slice_times):
            return  # the next slice starts from a fresh template anyway
        key = (self.token, self.slice_times[idx])
        if self._refresh_key == key:
            return
        self._refresh_key = key
        self.sim.schedule(max(t, math.nextafter(key[1], -math.inf)), REFRESH, self, self.token)

    def on_refresh(self, t: float, token: int) -> None:
        if token == self.token and self.mining:
            self._refresh_slice(t)

    def _refresh_slice(self, t: float) -> None:
        """Fold new pending observations into the template mid-slice.

        Attempts stamped after ``t`` are redone on the fresh template, so the
        slice's attempt budget is unchanged.
        """
        done = bisect.bisect_right(self.slice_times, t)
        rest = self.slice_times[done:]
        if not rest:
            return
        self.token += 1
        self._retemplate(t)
        step = attempts_at(self.search, rest)
        self.slice_times = self.slice_times[:done] + step.times
        if step.block is not None:
            self.sim.schedule(step.times[-1], FOUND, self, (self.token, step.block))
        else:
            self.sim.schedule(self.slice_start + self.sim.cfg.slice_length, SLICE_END, self, self.token)

    def _account(self, t: float, upto: float) -> None:
        n = sum(1 for x in self.slice_times if x <= upto)
        self._metric(MINING, t, attempts=n, duration=max(0.0, upto - self.slice_start))
        self.slice_times = ()

    def abort_mining(self, t: float) -> None:
        if self.mining:
            self._account(t, t)
            self.sim.log(t, "abort", self.id, self.head.height + 1)
        self.mining = False
        self.token += 1
        self.search = None

    def on_slice_end(self, t: float, token: int) -> None:
        if token != self.token or not self.mining:
            return
        self._account(t, t)
        if t >= self.sim.cfg.duration:
            self.mining = False
            return
        self._start_slice(t)

    def on_found(self, t: float, token: int, block: Block) -> None:
        if token != self.token or not self.mining:
            return
        self._account(t, t)
        self.mining = False
        self.token += 1
        self.search = None
        self.sim.log(t, FOUND, self.id, block.height)
        out = self.state.receive(block)
        self._after_receive(t, out)
        if out.accepted:
            self.sim.broadcast(self, "block_announce", block, t)
        # a rejected own block means this node lost its right to mine; wait for the next head

    # -- rounds --------------------------------------------------------

    def _new_round(self, t: float) -> None:
        """Head changed (or node joined): start over on the new tip."""
        r = self.rules
        self.abort_mining(t)
        if r.method == "pos":
            self._pos_round(t)
        elif r.uses_lottery:
            self._start_race(t)
        self.start_mining(t)

    def _pos_round(self, t: float) -> None:
        head_state = self.state.head_state
        ledger = head_state.ledger
        height = self.head.height + 1
        self.investment = draw_investment(ledger, self.id, height, self.rng)
        self.invest_obs = None
        if self.investment == 0:
            return
        self.invest_obs = investment_obs(ledger, self.id, self.investment, height, int(t))
        out = self.invest_outstanding
        if out is None or out in self.state.canon_obs or out not in self.state.pending:
            self.invest_outstanding = self.invest_obs
            if self.state.add_pending(self.invest_obs):
                self.sim.broadcast(self, "transaction", self.invest_obs, t)

    def _start_race(self, t: float) -> None:
        self.race_id += 1
        self.race_seed = self.head.digest
        self.race_round = 0
        self.race_decided = False
        self.ticket = None
        self.my_proof = None
        self.my_round = None
        access = self.state.access
        # drop announcements for seeds we have moved past
        for seed in list(self.announcements):
            if seed != self.race_seed:
                del self.announcements[seed]
        for seed in list(self.unverified):
            if seed in self.state.view and seed != self.race_seed:
                del self.unverified[seed]
        for ann in self.unverified.pop(self.race_seed, []):
            self._check_announce(t, ann)
        if self.rules.method == "ppokw" and ppokw_gate(self.id, access, self.rules) is not None:
            pass
        else:
            self.my_proof = vrf_prove(self.keys.sk, self.race_seed)
            self._maybe_announce(t)
        self.sim.schedule(t + self.sim.cfg.effective_lottery_window, LOTTERY_CLOSE, self, self.race_id)

    def _maybe_announce(self, t: float) -> None:
        if self.my_proof is None or self.my_round is not None:
            return
        thr = threshold_for_round(self.rules.lottery_threshold, self.race_round)
        if below_threshold(self.my_proof.output, thr):
            self.my_round = self.race_round
            self.announcements.setdefault(self.race_seed, {})[self.id] = (self.race_round, self.my_proof)
            self.sim.broadcast(self, "lottery_announce", LotteryAnnounce(self.id, self.race_round, self.my_proof), t)

    def on_lottery_close(self, t: float, race_id: int) -> None:
        if race_id != self.race_id or self.race_decided:
            return
        r = self.rules
        count = len(self.announcements.get(self.race_seed, {}))
        thr = threshold_for_round(r.lottery_threshold, self.race_round)
        if count >= r.committee_target or (thr >= 1.0 and count >= 1):
            self.race_decided = True
            if self.my_round is not None and (r.method != "ppokw" or self.whitelisted()):
                self.ticket = LotteryTicket(self.my_round, self.my_proof)
                self.sim.log(t, "selected", self.id, (self.head.height + 1, self.my_round, count))
                self.start_mining(t)
            return
        if thr >= 1.0:
            return  # nobody eligible; wait for a new head
        self.race_round += 1
        self._maybe_announce(t)
        self.sim.schedule(t + self.sim.cfg.effective_lottery_window, LOTTERY_CLOSE, self, self.race_id)

    def _check_announce(self, t: float, ann: LotteryAnnounce) -> None:
        seed = ann.proof.seed_used
        eng = self.state.engine
        ok = verify_selection(ann.node, ann.round, ann.proof, eng.public_keys.get(ann.node), (seed,),
                              self.rules)
        if ok and self.rules.method == "ppokw":
            gate = ppokw_gate(ann.node, self.state.access, self.rules)
            if gate is Blocked.NOT_WHITELISTED:
                peer = self.sim.by_id[ann.node]
                self.sim.send(self, peer, "lottery_verify",
                              LotteryVerify(ann.node, seed, False, gate.value), t)
                return
            ok = gate is None
        if ok:
            self.announcements.setdefault(seed, {})[ann.node] = (ann.round, ann.proof)

    def on_announce(self, t: float, ann: LotteryAnnounce) -> None:
        seed = ann.proof.seed_used
        if seed == self.race_seed:
            self._check_announce(t, ann)
        elif seed not in self.state.view:
            self.unverified.setdefault(seed, []).append(ann)

    def on_lottery_verify(self, t: float, msg: LotteryVerify) -> None:
        if msg.node == self.id and not msg.accepted and msg.reason == Blocked.NOT_WHITELISTED.value:
            if self.whitelisted():
                self.state.evict(self.id)
                self.sim.log(t, "self_evicted", self.id, "")
                self.ticket = None
                self.abort_mining(t)

    # -- blocks and sync -----------------------------------------------

    def _after_receive(self, t: float, out) -> None:
        for b in out.accepted:
            self._metric(BLOCK, t, own=b.miner_id == self.id)
            self.requested.discard(b.digest)
        for b, reason in out.rejected:
            self.sim.log(t, "reject", self.id, (b.height, b.miner_id, reason.value))
            if reason is Reject.BAD_PROOF and self.rules.method == "ppokw" and b.miner_id != self.id:
                if b.miner_id in self.state.access.whitelist:
                    self.state.evict(b.miner_id)
                    self.sim.log(t, "evict", self.id, b.miner_id)
        if out.head_changed:
            if self.report is not None and self.report in self.state.canon_obs:
                self.report = None
            self._new_round(t)
            self.evaluate(t)

    def on_block(self, t: float, block: Block, src: "Node") -> None:
        out = self.state.receive(block)
        if out.orphaned:
            missing = block.prev_hash
            if missing not in self.requested:
                self.requested.add(missing)
                sync_request(self, src, t, missing)
            return
        self._after_receive(t, out)

    def on_data_request(self, t: float, req: DataRequest, src: "Node") -> None:
        view = self.state.view
        wanted = req.wanted if req.wanted is not None else view.head
        if wanted not in view:
            self.sim.send(self, src, "data_response", DataResponse(None, wanted, found=False), t)
            return
        seg = view.segment_after(wanted, req.locator)
        if not seg:
            self.sim.send(self, src, "data_response", DataResponse(None, view.head), t)
            return
        for b in seg:
            self.sim.send(self, src, "data_response", DataResponse(b, view.head), t)

    def on_data_response(self, t: float, resp: DataResponse, src: "Node") -> None:
        if resp.block is None:
            if not resp.found:
                # peer lost the hash (pruned); fall back to its whole chain from genesis
                self.requested.discard(resp.head)
                sync_request(self, src, t, None, full=True)
            elif resp.head not in self.state.view and resp.head not in self.requested:
                self.requested.add(resp.head)
                sync_request(self, src, t, resp.head)
            return
        self.on_block(t, resp.block, src)

    def on_poll(self, t: float) -> None:
        peer = self._next_peer()
        if peer is not None:
            sync_request(self, peer, t, None)
        self.sim.schedule(t + self.sim.cfg.sync_interval, POLL, self, None)

    def on_fraud(self, t: float) -> None:
        """Broadcast one block whose proof does not hold."""
        r = self.rules
        head = self.head
        meta = None
        if r.method == "pos":
            meta = StakeProof(1)
        elif r.uses_lottery:
            meta = LotteryTicket(0, vrf_prove(self.keys.sk, head.digest))
        tmpl = build_template(head, [], self.id, r, t, proof_meta=meta)
        target = min(r.base_target, self.state.engine.race_target)
        nonce = 0
        while True:
            bad = Block(tmpl.height, tmpl.prev_hash, t, tmpl.observations, nonce, self.id, meta)
            if bad.digest_int > target:
                break
            nonce += 1
        self.fraudulent = True
        self.sim.log(t, FRAUD, self.id, bad.height)
        self.sim.broadcast(self, "block_announce", bad, t)

    # -- monitoring ----------------------------------------------------

    def on_reading(self, t: float, sensor_id: str, value: float) -> None:
        self.latest[sensor_id] = value
        if self.live:
            self.evaluate(t)

    def local_value(self) -> float | None:
        if not self.latest:
            return None
        return math.fsum(self.latest.values()) / len(self.latest)

    def evaluate(self, t: float) -> None:
        if self.report is not None:
            if self.report in self.state.canon_obs:
                self.report = None
            else:
                return  # one report in flight at a time
        v = self.local_value()
        if v is None:
            return
        mon = self.sim.monitor_state(self.state.head_state)
        if local_condition(mon, self.id, v) == VIOLATION:
            obs = Observation(self.id, int(t), ObsKind.SENSOR_READING, value=v)
            if obs in self.state.canon_obs:
                return
            self.report = obs
            self.reports_sent.append(obs)
            self.report_times.append(t)
            self.state.add_pending(obs)
            self.dirty = True
            self.sim.log(t, "report", self.id, v)
            self.sim.broadcast(self, "transaction", obs, t)
            if self.mining:
                self.request_refresh(t)

    def on_transaction(self, t: float, obs: Observation) -> None:
        if self.state.add_pending(obs):
            self.dirty = True
            if self.mining:
                self.request_refresh(t)
            elif self._should_mine():
                self.start_mining(t)

    def memory_bytes(self) -> int:
        total = chain_weight_bytes(self.state.view)
        if self.rules.uses_lottery:
            total += self.sim.pk_directory_bytes + self.state.access.size_bytes()
        return total


def sync_request(node: Node, peer: Node, t: float, wanted: bytes | None, full: bool = False) -> Message:
    """Ask ``peer`` for the blocks leading to ``wanted`` (its head if None)."""
    locator = (node.state.view.genesis.digest,) if full else tuple(node.state.view.locator())
    return node.sim.send(node, peer, "data_request", DataRequest(wanted, locator), t)


def broadcast(sim: "Simulation", src: Node, msg_type: str, payload: Any, t: float) -> list[Message]:
    return sim.broadcast(src, msg_type, payload, t)


# ---------------------------------------------------------------- simulation

@dataclass
class RunResult:
    config: SimConfig
    rules: ConsensusRules
    threshold: float
    nodes: list[Node]
    rows: list[dict]
    totals: dict[str, dict[str, float]]
    crossings: list
    invariants: dict[str, bool]
    problems: list[str]
    trace: list[dict]

    @property
    def ok(self) -> bool:
        return all(self.invariants.values())

    def reference_chain(self) -> list[Block]:
        """Canonical chain of the tallest honest node (the one events are computed from)."""
        honest = [n for n in self.nodes if n.live and not n.fraudulent] or self.nodes
        ref = max(honest, key=lambda n: (n.state.view.height, -n.index))
        return ref.state.view.canonical()

    def chain(self, node_id: str) -> list[Block]:
        for n in self.nodes:
            if n.id == node_id:
                return n.state.view.canonical()
        raise KeyError(node_id)

    def summary(self, resolved: dict | None = None) -> dict:
        return {
            "config": resolved if resolved is not None else {
                "sim": self.config.to_dict(), "rules": self.rules.to_dict()},
            "method": self.rules.method,
            "n_nodes": self.config.n_nodes,
            "threshold": self.threshold,
            "rows": self.rows,
            "invariants": self.invariants,
            "events": [{"sim_time": c.sim_time, "direction": c.direction, "estimate": c.estimate}
                       for c in self.crossings],
        }


class Simulation:
    def __init__(self, config: SimConfig, rules: ConsensusRules,
                 streams: dict[str, SensorStream] | list[SensorStream]):
        self.cfg = config
        self.rules = rules
        stream_list = list(streams.values()) if isinstance(streams, dict) else list(streams)
        if not stream_list or not any(s.readings for s in stream_list):
            raise ConfigError("no sensor streams")
        if rules.uses_lottery and rules.committee_target > config.n_nodes:
            raise ConfigError("committee_target exceeds the number of nodes")
        self.threshold = (config.threshold if config.threshold is not None
                          else percentile_threshold(stream_list, 75.0, until=config.duration))
        n = config.n_nodes
        self.ids = [node_name(i, n) for i in range(n)]
        self.by_id: dict[str, Node] = {}
        keys = {}
        if rules.uses_lottery:
            keys = {nid: node_keys(config.rng_seed, i, rules.vrf_bits) for i, nid in enumerate(self.ids)}
        engine = ConsensusEngine(rules, self.ids, {k: v.pk for k, v in keys.items()})
        self.pk_directory_bytes = sum(len(k.pk.to_bytes()) for k in keys.values())
        genesis = make_genesis()
        shared_states: dict = {}
        addresses = {nid: f"{nid}:5000" for nid in self.ids}
        assignment = assign_round_robin(stream_list, n)
        self.nodes: list[Node] = []
        for i, nid in enumerate(self.ids):
            peers = [addresses[p] for p in self.ids if p != nid]
            st = EngineState(engine, genesis, peers, state_cache=shared_states)
            node = Node(self, i, nid, st, keys.get(nid), assignment[i])
            self.nodes.append(node)
            self.by_id[nid] = node
        for node in self.nodes:
            node.peers = [p for p in self.nodes if p is not node]
        self._queue: list = []
        self._seq = itertools.count()
        self.now = 0.0
        self._monitor_cache: dict[bytes, MonitorState] = {}
        self._trace: deque = deque(maxlen=config.trace_limit)
        self._full_trace: list | None = [] if config.trace else None
        self.messages_sent = 0
        self.messages_delivered = 0
        self._finished = False

        for i, node in enumerate(self.nodes):
            t = config.join_times.get(i, 0.0)
            self.schedule(t, JOIN, node, t > 0)
        for i, t in sorted(config.fraud_times.items()):
            self.schedule(t, FRAUD, self.nodes[i], None)
        for node in self.nodes:
            for s in node.sensors:
                for ts, v in s.readings:
                    if ts > config.duration:
                        break
                    self.schedule(float(ts), READING, node, (s.sensor_id, v))
        k = 1
        while k * config.window < config.duration:
            self.schedule(k * config.window, WINDOW, None, None)
            k += 1

    # -- queue ---------------------------------------------------------

    def schedule(self, t: float, kind: str, node: Node | None, data: Any) -> None:
        heapq.heappush(self._queue, (t, next(self._seq), kind, node, data))

    def log(self, t: float, kind: str, node: str, detail: Any) -> None:
        entry = (t, kind, node, detail)
        self._trace.append(entry)
        if self._full_trace is not None:
            self._full_trace.append(entry)

    def send(self, src: Node, dst: Node, msg_type: str, payload: Any, t: float,
             size: int | None = None) -> Message:
        if size is None:
            size = payload_size(payload)
        msg = Message(msg_type, src.id, dst.id, size, t, t + self.cfg.link_latency, payload)
        src.sink.count_message(True, t, msg_type, size)
        self.messages_sent += 1
        self.schedule(msg.deliver_time, DELIVER, dst, msg)
        return msg

    def broadcast(self, src: Node, msg_type: str, payload: Any, t: float) -> list[Message]:
        """One message per live peer."""
        size = payload_size(payload)
        return [self.send(src, p, msg_type, payload, t, size) for p in src.peers if p.live]

    def monitor_state(self, branch) -> MonitorState:
        st = self._monitor_cache.get(branch.digest)
        if st is None:
            st = MonitorState.from_sync(self.threshold, branch.sync)
            self._monitor_cache[branch.digest] = st
        return st

    # -- loop ----------------------------------------------------------

    def run_until(self, t_end: float) -> None:
        q = self._queue
        while q and q[0][0] <= t_end:
            t, _, kind, node, data = heapq.heappop(q)
            self.now = t
            self._dispatch(t, kind, node, data)

    def _dispatch(self, t: float, kind: str, node: Node | None, data: Any) -> None:
        if kind == DELIVER:
            self._deliver(t, node, data)
        elif kind == SLICE_END:
            node.on_slice_end(t, data)
        elif kind == FOUND:
            node.on_found(t, *data)
        elif kind == READING:
            node.on_reading(t, *data)
        elif kind == WINDOW:
            for n in self.nodes:
                n.sink.sample_memory(t, n.memory_bytes() if n.live else 0)
        elif kind == LOTTERY_CLOSE:
            if node.live:
                node.on_lottery_close(t, data)
        elif kind == POLL:
            node.on_poll(t)
        elif kind == JOIN:
            node.join(t, data)
        elif kind == REFRESH:
            node.on_refresh(t, data)
        elif kind == FRAUD:
            if node.live:
                node.on_fraud(t)

    def _deliver(self, t: float, node: Node, msg: Message) -> None:
        self.messages_delivered += 1
        node.sink.count_message(False, min(t, self.cfg.duration), msg.msg_type, msg.payload_bytes)
        if self._finished:
            return
        src = self.by_id[msg.src]
        p = msg.payload
        mt = msg.msg_type
        if mt == "block_announce":
            node.on_block(t, p, src)
        elif mt == "transaction":
            node.on_transaction(t, p)
        elif mt == "data_request":
            node.on_data_request(t, p, src)
        elif mt == "data_response":
            node.on_data_response(t, p, src)
        elif mt == "lottery_announce":
            node.on_announce(t, p)
        elif mt == "lottery_verify":
            node.on_lottery_verify(t, p)

    def finish(self) -> RunResult:
        cfg = self.cfg
        self.run_until(cfg.duration)
        end = cfg.duration
        for n in self.nodes:
            if n.mining:
                n._account(end, end)
                n.mining = False
        self._finished = True
        # messages still in flight are delivered (and counted) without reactions
        while self._queue:
            t, _, kind, node, data = heapq.heappop(self._queue)
            if kind == DELIVER:
                self._deliver(t, node, data)
        for n in self.nodes:
            n.sink.sample_memory(end, n.memory_bytes() if n.live else 0)
            n.sink.ensure_windows(end)
            n.sink.set_block_times([b.timestamp for b in n.state.view.canonical()])
        totals = {}
        for n in self.nodes:
            tot = n.sink.totals()
            canon = n.state.view.canonical()
            tot["canonical_height"] = canon[-1].height
            tot["block_time"] = (canon[-1].timestamp - canon[0].timestamp) / canon[-1].height if len(canon) > 1 else None
            tot["monitor_reports"] = len(n.reports_sent)
            totals[n.id] = tot
        ref = self.reference_node()
        crossings = detect_global_event(ref.state.view.canonical(), self.threshold)
        extra = {
            "run.messages": float(self.messages_sent),
            "run.bytes": float(sum(t["bytes_sent"] for t in totals.values())),
            "run.crossings": float(len(crossings)),
        }
        rows = summarize(totals, self.rules.method, cfg.n_nodes, extra)
        invariants, problems = self.check_invariants()
        trace = [_trace_json(e) for e in (self._full_trace if self._full_trace is not None else self._trace)]
        return RunResult(cfg, self.rules, self.threshold, self.nodes, rows, totals, crossings,
                         invariants, problems, trace)

    def honest_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.live and not n.fraudulent]

    def reference_node(self) -> Node:
        honest = self.honest_nodes() or self.nodes
        return max(honest, key=lambda n: (n.state.view.height, -n.index))

    def check_invariants(self) -> tuple[dict[str, bool], list[str]]:
        problems: list[str] = []
        honest = self.honest_nodes()
        # eventual agreement below the prune depth
        agree = True
        if honest:
            top = max(n.state.view.height for n in honest)
            k = top - self.rules.prune_depth
            if k >= 0:
                hashes = {n.state.view.canonical_hash(k) for n in honest}
                if len(hashes) != 1 or None in hashes:
                    agree = False
                    problems.append(f"canonical chains disagree at height {k}")
        # reliable network
        sent = sum(sum(r.bytes_sent.values()) for n in self.nodes for r in n.sink.records)
        recv = sum(sum(r.bytes_recv.values()) for n in self.nodes for r in n.sink.records)
        delivered = self.messages_sent == self.messages_delivered and sent == recv
        if not delivered:
            problems.append(f"sent {self.messages_sent} msgs/{sent} B, delivered {self.messages_delivered}/{recv} B")
        # observations: at most once anywhere, at least once if emitted early enough
        emitted = [o for n in self.nodes for o in n.reports_sent]
        cutoff = self.cfg.duration - 10 * self.cfg.target_block_time
        conserved = True
        for n in honest:
            seen: dict[Observation, int] = {}
            for b in n.state.view.canonical():
                for o in b.observations:
                    if o.kind is ObsKind.SENSOR_READING:
                        seen[o] = seen.get(o, 0) + 1
            dup = [o for o, c in seen.items() if c > 1]
            missing = [o for o in emitted if o.sim_time < cutoff and o not in seen]
            if dup or missing:
                conserved = False
                problems.append(f"{n.id}: {len(dup)} duplicated, {len(missing)} missing observations")
        # coins: endowment plus one reward per canonical block
        coins = True
        for n in honest:
            st = n.state.head_state
            expect = self.rules.initial_coins * self.cfg.n_nodes + self.rules.block_reward * st.height
            if st.ledger.total() != expect:
                coins = False
                problems.append(f"{n.id}: ledger holds {st.ledger.total()} coins, expected {expect}")
        created_le_total = all(n.sink.totals()["blocks_created"] <= n.sink.totals()["blocks_total"]
                               for n in self.nodes)
        if not created_le_total:
            problems.append("blocks_created exceeds blocks_total")
        return ({"agreement": agree, "delivery": delivered, "observations": conserved,
                 "coins": coins, "block_counts": created_le_total}, problems)


def _trace_json(entry) -> dict:
    t, kind, node, detail = entry
    if isinstance(detail, bytes):
        detail = detail.hex()
    elif isinstance(detail, tuple):
        detail = [d.hex() if isinstance(d, bytes) else d for d in detail]
    return {"t": t, "kind": kind, "node": node, "detail": detail}


def run_simulation(config: SimConfig, rules: ConsensusRules,
                   streams: dict[str, SensorStream] | list[SensorStream]) -> RunResult:
    return Simulation(config, rules, streams).finish()


def write_artifact(result: RunResult, out_dir: str | Path, resolved: dict | None = None,
                   trace: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for n in result.nodes:
        (out / f"chain_{n.id}.jsonl").write_text(dump_jsonl(n.state.view.canonical()), encoding="utf-8")
        n.sink.write_csv(out / f"metrics_{n.id}.csv")
    (out / "summary.json").write_text(dumps_summary(result.summary(resolved)), encoding="utf-8")
    write_events_csv(out / "events.csv", result.crossings)
    if trace or not result.ok:
        with (out / "trace.jsonl").open("w", encoding="utf-8") as fh:
            for e in result.trace:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
    return out
