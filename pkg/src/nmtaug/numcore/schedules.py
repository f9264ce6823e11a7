"""Learning-rate schedules."""
from __future__ import annotations

TRIANGULAR_WARMUP_FRACTION = 0.1


def lr_inverse_sqrt(step: int, warmup: int, d_model: int) -> float:
    """Linear warmup then inverse-square-root decay, scaled by ``d_model ** -0.5``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    return d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def lr_triangular(step: int, total_steps: int, peak: float) -> float:
    """Linear rise to ``peak`` over the first 10% of steps, then linear decay to 0."""
    if not 1 <= step <= total_steps:
        raise ValueError(f"step must lie in [1, {total_steps}], got {step}")
    warmup = max(1, round(TRIANGULAR_WARMUP_FRACTION * total_steps))
    if step <= warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup)
