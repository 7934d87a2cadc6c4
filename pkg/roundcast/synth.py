"""
Synthetic rounds with a known ground truth.

Each round simulates two players trading hits at 5 fps. Player k lands a hit
on a step with probability `rate_k` for a uniform amount of health; the
attack order within a step is random so both players cannot be knocked out
on the same step. The round ends at a knockout, or at the step limit once
the damage totals differ. The label therefore always equals the player who
inflicted more damage by the final frame.

With `noise_level` > 0 a round is, with that probability, "noisy": the two
hit rates are swapped for the opening steps, so the eventual loser tends to
lead early and short prefixes mislead.
"""

from __future__ import annotations

import logging
from typing import List, Tuple

from .errors import DataError, ParameterError
from .models import Round
from .tensor import SeededRng

logger = logging.getLogger(__name__)

SYNTH_SHEETS = 10
MIN_ROUNDS = SYNTH_SHEETS
MAX_STEPS = 90
EARLY_FRACTION = 0.3
RATE_RANGE = (0.15, 0.40)
HIT_RANGE = (4.0, 12.0)


def _simulate(
    rng: SeededRng, noise_level: float, max_steps: int
) -> Tuple[List[Tuple[float, float]], int]:
    rates = rng.uniform(2, *RATE_RANGE)
    noisy = bool(rng.random(1)[0] < noise_level)
    early_steps = int(EARLY_FRACTION * max_steps)
    taken = [0.0, 0.0]  # damage taken by player 1, player 2
    features = [(0.0, 0.0)]
    step = 0
    while True:
        step += 1
        active = rates[::-1] if noisy and step <= early_steps else rates
        lands = rng.random(2) < active
        amounts = rng.uniform(2, *HIT_RANGE)
        knockout = False
        for attacker in rng.permutation(2):
            if lands[attacker]:
                defender = 1 - attacker
                taken[defender] = min(100.0, taken[defender] + float(amounts[attacker]))
                if taken[defender] >= 100.0:
                    knockout = True
                    break
        features.append((taken[0], taken[1]))
        if knockout:
            break
        if step >= max_steps - 1 and taken[0] != taken[1]:
            break
    # Label 1 means player 2 won, i.e. player 1 took more damage.
    winner = 1 if taken[0] > taken[1] else 0
    return features, winner


def synth_generate(
    n_rounds: int,
    seed: int,
    noise_level: float = 0.0,
    n_sheets: int = SYNTH_SHEETS,
    max_steps: int = MAX_STEPS,
) -> List[Round]:
    """Generate `n_rounds` rounds spread over `n_sheets` contiguous sheets."""
    if n_rounds < max(MIN_ROUNDS, n_sheets):
        raise DataError(
            f"need at least {max(MIN_ROUNDS, n_sheets)} rounds, got {n_rounds}"
        )
    if not 0.0 <= noise_level <= 1.0:
        raise ParameterError(f"noise_level must be in [0, 1], got {noise_level}")
    if max_steps < 2:
        raise ParameterError(f"max_steps must be at least 2, got {max_steps}")
    root = SeededRng(seed)
    rounds = []
    per_sheet = [0] * n_sheets
    for i in range(n_rounds):
        sheet = i * n_sheets // n_rounds
        features, winner = _simulate(root.derive(i), noise_level, max_steps)
        rounds.append(
            Round(
                sheet_id=f"Sheet_{sheet + 1}",
                round_index=per_sheet[sheet],
                winner=winner,
                features=features,
            )
        )
        per_sheet[sheet] += 1
    logger.info(
        "Generated %d synthetic round(s) over %d sheet(s) (seed=%d, noise=%.2f)",
        n_rounds,
        n_sheets,
        seed,
        noise_level,
    )
    return rounds
