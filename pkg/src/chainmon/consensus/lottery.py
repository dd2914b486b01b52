"""Committee selection for the distributed methods: VRF lottery, whitelist and ruleset."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from ..vrf import VrfKeyPair, VrfProof, VrfPublicKey, vrf_prove, vrf_verify
from .rules import ConsensusRules, max_relax_rounds, threshold_for_round


class Blocked(str, Enum):
    NOT_WHITELISTED = "not_whitelisted"
    RECENTLY_MINED = "recently_mined"


@dataclass
class AccessState:
    whitelist: set[str] = field(default_factory=set)
    recent_miners: tuple[str, ...] = ()
    current_seed: bytes = bytes(32)
    prev_seed: bytes = bytes(32)
    threshold: float = 1.0
    round: int = 0
    selected: dict[str, tuple[int, VrfProof]] = field(default_factory=dict)

    def seeds(self) -> tuple[bytes, bytes]:
        return self.current_seed, self.prev_seed

    def size_bytes(self, id_bytes: int = 8) -> int:
        proofs = sum(1 + len(p.output) + len(p.proof) + len(p.seed_used) for _, p in self.selected.values())
        return id_bytes * (len(self.whitelist) + len(self.recent_miners) + len(self.selected)) + 64 + proofs


def below_threshold(output: bytes, threshold: float) -> bool:
    t = Fraction(threshold)
    return int.from_bytes(output, "big") * t.denominator < t.numerator * 2**256


def ppokw_gate(node: str, access: AccessState, rules: ConsensusRules) -> Blocked | None:
    """None if ``node`` may enter the lottery, else why not."""
    if node not in access.whitelist:
        return Blocked.NOT_WHITELISTED
    if rules.ban_window and node in access.recent_miners[-rules.ban_window:]:
        return Blocked.RECENTLY_MINED
    return None


def lottery_draw(node: str, keys: VrfKeyPair, access: AccessState, rules: ConsensusRules,
                 proof: VrfProof | None = None) -> VrfProof | None:
    """The node's draw on the current seed if it is selected at the current threshold."""
    if rules.method == "ppokw" and ppokw_gate(node, access, rules) is not None:
        return None
    if proof is None or proof.seed_used != access.current_seed:
        proof = vrf_prove(keys.sk, access.current_seed)
    return proof if below_threshold(proof.output, access.threshold) else None


def verify_selection(node: str, rnd: int, proof: VrfProof, pk: VrfPublicKey | None,
                     seeds: tuple[bytes, ...], rules: ConsensusRules,
                     access: AccessState | None = None) -> bool:
    """Public check of a claimed selection.

    The seed may be the current one or its predecessor, which absorbs the
    race between a new block landing and a lottery announcement.
    """
    if pk is None or proof.seed_used not in seeds:
        return False
    if not 0 <= rnd <= max_relax_rounds(rules.lottery_threshold):
        return False
    if rules.method == "ppokw" and access is not None and ppokw_gate(node, access, rules) is not None:
        return False
    if not below_threshold(proof.output, threshold_for_round(rules.lottery_threshold, rnd)):
        return False
    return vrf_verify(pk, proof.seed_used, proof)
