from .engine import BranchState, ConsensusEngine, EngineState, Outcome, engine_on_block
from .ledger import CoinLedger, coinage
from .lottery import AccessState, Blocked, below_threshold, lottery_draw, ppokw_gate, verify_selection
from .mining import NonceSearch, StaleHead, build_template, pos_mine, pow_mine, search
from .rules import (METHODS, ConfigError, ConsensusRules, default_committee_target, kernel_target,
                    relax_difficulty, stake_target, threshold_for_round)

__all__ = [
    "AccessState", "Blocked", "BranchState", "CoinLedger", "ConfigError", "ConsensusEngine",
    "ConsensusRules", "EngineState", "METHODS", "NonceSearch", "Outcome", "StaleHead",
    "below_threshold", "build_template", "coinage", "default_committee_target", "engine_on_block",
    "kernel_target", "lottery_draw", "pos_mine", "pow_mine", "ppokw_gate", "relax_difficulty",
    "search", "stake_target", "threshold_for_round", "verify_selection",
]
