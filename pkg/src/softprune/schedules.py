"""Decay laws for the pruned-filter multiplier and pruning-rate ramps."""

import csv
import math
from dataclasses import dataclass

from .errors import InputError

EXPONENTIAL = "exponential"
LINEAR = "linear"
CONSTANT_ZERO = "constant-zero"
DECAY_KINDS = (EXPONENTIAL, LINEAR, CONSTANT_ZERO)

CONSTANT = "constant"
EXP_APPROACH = "exponential-approach"
RAMP_KINDS = (CONSTANT, EXP_APPROACH)

# Defaults: 1e-5 for small datasets, 1e-7 for long/large runs, 1e-9 when
# fine-tuning a pre-trained model.
EPSILON_SMALL = 1e-5
EPSILON_LARGE = 1e-7
EPSILON_PRETRAINED = 1e-9


@dataclass(frozen=True)
class DecaySchedule:
    """Multiplier alpha(t) applied to pruned filters after epoch t.

    ``exponential``: alpha0 * (alpha0/epsilon) ** (-t/(t_max-1)), so the last
    epoch lands exactly on epsilon; values below ``floor`` snap to 0.
    ``linear``: alpha0 * (1 - t/(t_max-1)).
    ``constant-zero``: always 0 (plain soft filter pruning).
    """

    kind: str = EXPONENTIAL
    alpha0: float = 1.0
    epsilon: float = EPSILON_SMALL
    t_max: int = 100
    floor: float = 1e-12

    def __post_init__(self):
        if self.kind not in DECAY_KINDS:
            raise InputError(f"unknown decay kind {self.kind!r}; choose from {DECAY_KINDS}")
        if not 0.0 <= self.alpha0 <= 1.0:
            raise InputError(f"alpha0 must lie in [0, 1], got {self.alpha0}")
        if self.t_max < 2:
            raise InputError(f"t_max must be >= 2, got {self.t_max}")
        if self.kind == EXPONENTIAL and not 0.0 < self.epsilon < self.alpha0:
            raise InputError(f"exponential decay needs 0 < epsilon < alpha0 (got {self.epsilon}, {self.alpha0})")

    def _check(self, t):
        if not 0 <= t < self.t_max:
            raise InputError(f"epoch {t} outside [0, {self.t_max})")

    def raw(self, t):
        """Value before the zero-snap floor is applied."""
        self._check(t)
        if self.kind == CONSTANT_ZERO:
            return 0.0
        frac = t / (self.t_max - 1)
        if self.kind == LINEAR:
            return self.alpha0 * (1.0 - frac)
        return self.alpha0 * (self.alpha0 / self.epsilon) ** (-frac)

    def __call__(self, t):
        a = self.raw(t)
        return 0.0 if a < self.floor else a

    @property
    def decay_coefficient(self):
        """k = ln(alpha0/epsilon) of the exponential law."""
        return math.log(self.alpha0 / self.epsilon)


@dataclass(frozen=True)
class RateRamp:
    """Pruning rate P(t).

    ``exponential-approach`` rises as target*(1 - exp(-t/tau)) and snaps to the
    target once t >= 3*tau. ``tau=None`` means t_max/8.
    """

    kind: str = CONSTANT
    target_rate: float = 0.0
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in RAMP_KINDS:
            raise InputError(f"unknown ramp kind {self.kind!r}; choose from {RAMP_KINDS}")
        if not 0.0 <= self.target_rate < 1.0:
            raise InputError(f"target rate must lie in [0, 1), got {self.target_rate}")
        if self.tau is not None and self.tau <= 0:
            raise InputError(f"tau must be positive, got {self.tau}")

    def __call__(self, t, t_max):
        if not 0 <= t < t_max:
            raise InputError(f"epoch {t} outside [0, {t_max})")
        if self.kind == CONSTANT:
            return self.target_rate
        tau = self.tau if self.tau is not None else t_max / 8.0
        if t >= 3 * tau:
            return self.target_rate
        return self.target_rate * (1.0 - math.exp(-t / tau))


def alpha_at(schedule, t):
    return schedule(t)


def rate_at(ramp, t, t_max):
    return ramp(t, t_max)


def schedule_rows(schedule, ramp):
    return [(t, schedule(t), ramp(t, schedule.t_max)) for t in range(schedule.t_max)]


def write_schedule_csv(path, schedule, ramp):
    with open(path, "w", newline="") as fh:
        fh.write("# softprune schedule v1\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "alpha", "rate"])
        for t, a, p in schedule_rows(schedule, ramp):
            w.writerow([t, repr(a), repr(p)])
