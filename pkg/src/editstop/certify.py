"""Runtime-checkable stability certificates for run-length stops.

A stop fired by the run-length rule says only "the alignment
distribution moved little for a while". The functions here turn that
into explicit guarantees: a total-variation budget over the stability
window, an argmax-invariance test against the top-2 margin, a tail bound
from an empirically estimated contraction coefficient, stability bounds
for Lipschitz observables, and a calibration routine that picks
(threshold, span) pairs backed by a margin quantile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentDistribution
from .errors import (
    AlphaNotContractiveError,
    EmptyInputError,
    NoAdmissiblePairError,
    NoValidSamplesError,
    SupportMismatchError,
    WindowTooShortError,
)
from .linalg import ProbVector, total_variation
from .monitor import StabilityState, StopConfig

# Calibration search grids (threshold, span).
DELTA_GRID: tuple[float, ...] = (0.025, 0.05, 0.1, 0.25, 0.45, 0.55)
OMEGA_GRID: tuple[int, ...] = (6, 8, 10, 12)

TV_SLACK = 1e-9


def fmt_real(x: float) -> str:
    """Decimal string at 12 significant digits, for stable reports."""
    return "%.12g" % float(x)


def _as_probvector(d) -> ProbVector:
    return d.dist if isinstance(d, AlignmentDistribution) else d


@dataclass(frozen=True)
class MarginReport:
    """Top-1 token and top-2 probability margin of one distribution."""

    argmax_index: int
    margin: float
    step: int
    support_size: int

    def __post_init__(self):
        if not 0.0 <= self.margin <= 1.0 + 1e-12:
            raise ValueError(f"margin {self.margin} outside [0, 1]")
        if self.support_size < 1:
            raise ValueError("support_size must be >= 1")
        if self.support_size == 1 and self.margin != 1.0:
            raise ValueError("singleton support has margin 1 by convention")

    @classmethod
    def from_distribution(cls, dist, step: int | None = None) -> "MarginReport":
        pv = _as_probvector(dist)
        if step is None:
            step = dist.step if isinstance(dist, AlignmentDistribution) else 0
        return cls(
            argmax_index=pv.argmax_token(),
            margin=pv.top2_margin(),
            step=step,
            support_size=len(pv),
        )


def tv_budget(delta: float, omega: int) -> float:
    """Worst-case TV movement across a window of ``omega`` sub-threshold steps."""
    if not delta > 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    if omega < 1:
        raise ValueError(f"omega must be >= 1, got {omega}")
    return omega * math.sqrt(delta / 2.0)


def window_intersection(distributions) -> tuple[int, ...]:
    """Running intersection of the supports of all given distributions."""
    if not distributions:
        raise EmptyInputError("no distributions in window")
    common = set(_as_probvector(distributions[0]).support)
    for d in distributions[1:]:
        common &= set(_as_probvector(d).support)
    return tuple(sorted(common))


def verify_runlength_bound(
    distributions,
    delta: float,
    omega: int,
    state: StabilityState | None = None,
) -> bool:
    """Check the windowed TV bound on an actual stability window.

    Takes the per-step distributions of a block (the last ``omega + 1``
    are the window), restricts them to the running intersection of their
    supports, and compares the endpoint TV against the budget. When a
    trace is supplied, the sub-threshold precondition on the last
    ``omega`` divergences is verified first.
    """
    if len(distributions) < omega + 1:
        raise WindowTooShortError(
            f"need {omega + 1} distributions, got {len(distributions)}"
        )
    if state is not None:
        tail = state.divergence_trace[-omega:]
        if len(tail) < omega:
            raise WindowTooShortError(
                f"trace has {len(tail)} divergences, need {omega}"
            )
        for row in tail:
            if math.isnan(row.divergence) or row.divergence >= delta:
                raise ValueError(
                    f"window precondition violated at step {row.step}: "
                    f"divergence {row.divergence} >= delta {delta}"
                )
    window = [_as_probvector(d) for d in distributions[-(omega + 1):]]
    common = window_intersection(window)
    if not common:
        raise SupportMismatchError("window supports have empty intersection")
    first = window[0].restrict(common)
    last = window[-1].restrict(common)
    return total_variation(last, first) <= tv_budget(delta, omega) + TV_SLACK


def local_argmax_certificate(
    margin: MarginReport, cfg: StopConfig, window=None
) -> bool:
    """Pass iff the window TV budget cannot overcome half the margin.

    A singleton support passes vacuously (there is no competitor to flip
    to). When the certificate passes and the window distributions are
    supplied, a direct replay confirms the argmax was constant; a
    violation there would mean the bound itself is broken, so it raises
    rather than returning False.
    """
    passed = margin.support_size == 1 or tv_budget(cfg.delta, cfg.omega) < margin.margin / 2.0
    if passed and window:
        pvs = [_as_probvector(d) for d in window]
        common = window_intersection(pvs)
        restricted = [p.restrict(common) for p in pvs]
        target = restricted[-1].argmax_token()
        for r in restricted:
            if r.argmax_token() != target:
                raise AssertionError(
                    "certificate passed but the window argmax moved; "
                    "the stability window violates its own TV budget"
                )
    return passed


@dataclass(frozen=True)
class ContractionEstimate:
    alpha_hat: float
    samples_used: int
    skipped_small_denominators: int

    @property
    def contractive(self) -> bool:
        return self.alpha_hat < 1.0


def estimate_contraction(
    post_unmask_traces, denom_floor: float = 1e-9
) -> ContractionEstimate:
    """Max ratio of consecutive TV steps over all traces.

    Each trace is a sequence of distributions on one fixed support,
    covering steps after the visible set stopped growing. Ratios whose
    denominator is below ``denom_floor`` are skipped and counted.
    """
    if not post_unmask_traces:
        raise EmptyInputError("no traces given")
    ratios: list[float] = []
    skipped = 0
    for trace in post_unmask_traces:
        pvs = [_as_probvector(d) for d in trace]
        if len(pvs) < 3:
            raise WindowTooShortError(f"trace has {len(pvs)} steps, need >= 3")
        support = pvs[0].support
        for p in pvs[1:]:
            if p.support != support:
                raise SupportMismatchError(
                    "contraction traces must stay on a fixed support"
                )
        for r in range(1, len(pvs) - 1):
            den = total_variation(pvs[r], pvs[r - 1])
            num = total_variation(pvs[r + 1], pvs[r])
            if den < denom_floor:
                skipped += 1
                continue
            ratios.append(num / den)
    if not ratios:
        raise NoValidSamplesError(
            f"all {skipped} ratio samples had denominators below {denom_floor}"
        )
    return ContractionEstimate(
        alpha_hat=float(max(ratios)),
        samples_used=len(ratios),
        skipped_small_denominators=skipped,
    )


def tail_budget(alpha_hat: float, delta: float, s: int | None = None) -> float:
    """TV budget for movement after the stop under estimated contraction.

    With ``s`` given, the budget for exactly ``s`` steps ahead; without,
    the supremum over all horizons.
    """
    if not 0.0 <= alpha_hat < 1.0:
        raise AlphaNotContractiveError(
            f"alpha_hat must be in [0, 1), got {alpha_hat}"
        )
    if not delta > 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    root = math.sqrt(delta / 2.0)
    if s is None:
        return root / (1.0 - alpha_hat)
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    return (alpha_hat**s / (1.0 - alpha_hat)) * root


def global_argmax_certificate(
    margin: MarginReport, cfg: StopConfig, alpha_hat: float
) -> bool:
    """Pass iff window budget plus contraction tail stays under half the margin."""
    if not 0.0 <= alpha_hat < 1.0:
        raise AlphaNotContractiveError(
            f"alpha_hat must be in [0, 1), got {alpha_hat}"
        )
    if margin.support_size == 1:
        return True
    combined = tv_budget(cfg.delta, cfg.omega) + tail_budget(alpha_hat, cfg.delta)
    return combined < margin.margin / 2.0


@dataclass(frozen=True)
class LipschitzObservable:
    """A real functional of distributions with a declared TV Lipschitz constant."""

    name: str
    evaluate: object  # callable ProbVector -> float
    lipschitz_constant: float

    def __post_init__(self):
        if self.lipschitz_constant < 0.0:
            raise ValueError("Lipschitz constant must be nonnegative")
        if not callable(self.evaluate):
            raise TypeError("evaluate must be callable")

    def validate(self, rng: np.random.Generator, support: tuple[int, ...], n_pairs: int = 200) -> bool:
        """Empirically check the declared constant on random pairs."""
        for _ in range(n_pairs):
            w1 = rng.random(len(support)) + 1e-3
            w2 = rng.random(len(support)) + 1e-3
            p = ProbVector(w1 / w1.sum(), support)
            q = ProbVector(w2 / w2.sum(), support)
            gap = abs(self.evaluate(p) - self.evaluate(q))
            if gap > self.lipschitz_constant * total_variation(p, q) + TV_SLACK:
                return False
        return True


def lipschitz_stability_bound(
    obs: LipschitzObservable, cfg: StopConfig, alpha_hat: float | None = None
) -> tuple[float, float | None]:
    """Window and optional tail bounds on an observable's movement."""
    window = obs.lipschitz_constant * tv_budget(cfg.delta, cfg.omega)
    if alpha_hat is None:
        return window, None
    tail = obs.lipschitz_constant * tail_budget(alpha_hat, cfg.delta)
    return window, tail


@dataclass(frozen=True)
class CalibrationResult:
    beta: float
    margin_quantile: float
    alpha_hat: float
    admissible_pairs: tuple[tuple[float, int], ...]
    chosen: tuple[float, int]

    def to_json_dict(self) -> dict:
        return {
            "beta": fmt_real(self.beta),
            "margin_quantile": fmt_real(self.margin_quantile),
            "alpha_hat": fmt_real(self.alpha_hat),
            "admissible_pairs": [
                {"delta": fmt_real(d), "omega": int(o)} for d, o in self.admissible_pairs
            ],
            "chosen": {"delta": fmt_real(self.chosen[0]), "omega": int(self.chosen[1])},
        }


def margin_quantile(validation_margins, beta: float) -> float:
    """Nearest-rank quantile: the value that at least a (1 - beta)
    fraction of margins reach or exceed.

    Sort descending and take rank ceil((1 - beta) * n); no interpolation.
    """
    margins = [float(m) for m in validation_margins]
    if not margins:
        raise EmptyInputError("no validation margins")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    ordered = sorted(margins, reverse=True)
    rank = math.ceil((1.0 - beta) * len(ordered))
    return ordered[rank - 1]


def calibrate_pac(
    validation_margins,
    beta: float,
    alpha_hat: float,
    delta_grid=DELTA_GRID,
    omega_grid=OMEGA_GRID,
) -> CalibrationResult:
    """Pick the fastest (threshold, span) pair whose combined TV budget
    fits under half the margin quantile.

    Admissible pairs satisfy omega * sqrt(delta/2) + sqrt(delta/2) / (1 -
    alpha_hat) <= q / 2. Among them the pair with the smallest span wins
    (shorter runs stop sooner); ties prefer the larger threshold, then the
    smaller span.
    """
    if not 0.0 <= alpha_hat < 1.0:
        raise AlphaNotContractiveError(
            f"alpha_hat must be in [0, 1), got {alpha_hat}"
        )
    if not delta_grid or not omega_grid:
        raise EmptyInputError("calibration grids must be nonempty")
    q = margin_quantile(validation_margins, beta)
    admissible = [
        (float(d), int(o))
        for d in delta_grid
        for o in omega_grid
        if tv_budget(d, o) + tail_budget(alpha_hat, d) <= q / 2.0
    ]
    if not admissible:
        raise NoAdmissiblePairError(
            f"no (delta, omega) pair fits under quantile {q:.6g} at beta {beta}"
        )
    chosen = min(admissible, key=lambda pair: (pair[1], -pair[0]))
    return CalibrationResult(
        beta=beta,
        margin_quantile=q,
        alpha_hat=alpha_hat,
        admissible_pairs=tuple(sorted(admissible)),
        chosen=chosen,
    )


@dataclass(frozen=True)
class Certificate:
    """Everything known about one run-length stop, in checkable form."""

    stop_step: int
    omega: int
    delta: float
    tv_budget: float
    margin_report: MarginReport
    local_pass: bool
    tail_budget: float | None = None
    global_pass: bool | None = None
    pac_pass: bool | None = None

    def __post_init__(self):
        if (self.tail_budget is None) != (self.global_pass is None):
            raise ValueError("tail_budget and global_pass must be set together")
        m = self.margin_report
        if m.support_size == 1:
            if not self.local_pass:
                raise ValueError("singleton support must pass the local certificate")
            return
        if self.local_pass != (self.tv_budget < m.margin / 2.0):
            raise ValueError("local_pass inconsistent with budget and margin")
        if self.tail_budget is not None:
            expected = (self.tv_budget + self.tail_budget) < m.margin / 2.0
            if self.global_pass != expected:
                raise ValueError("global_pass inconsistent with combined budget")

    def to_json_dict(self) -> dict:
        return {
            "stop_step": int(self.stop_step),
            "omega": int(self.omega),
            "delta": fmt_real(self.delta),
            "tv_budget": fmt_real(self.tv_budget),
            "argmax_index": int(self.margin_report.argmax_index),
            "margin": fmt_real(self.margin_report.margin),
            "margin_step": int(self.margin_report.step),
            "support_size": int(self.margin_report.support_size),
            "local_pass": bool(self.local_pass),
            "tail_budget": None if self.tail_budget is None else fmt_real(self.tail_budget),
            "global_pass": self.global_pass,
            "pac_pass": self.pac_pass,
        }


def build_certificate(
    stop_step: int,
    margin: MarginReport,
    cfg: StopConfig,
    alpha_hat: float | None = None,
    pac_pass: bool | None = None,
) -> Certificate:
    """Assemble a certificate for one stop from its measured quantities."""
    budget = tv_budget(cfg.delta, cfg.omega)
    local = local_argmax_certificate(margin, cfg)
    tail = None
    global_p = None
    if alpha_hat is not None:
        tail = tail_budget(alpha_hat, cfg.delta)
        global_p = global_argmax_certificate(margin, cfg, alpha_hat)
    return Certificate(
        stop_step=stop_step,
        omega=cfg.omega,
        delta=cfg.delta,
        tv_budget=budget,
        margin_report=margin,
        local_pass=local,
        tail_budget=tail,
        global_pass=global_p,
        pac_pass=pac_pass,
    )


def certified_stop_fraction(certs) -> float:
    """Fraction of stops whose calibrated certificate passed."""
    certs = list(certs)
    if not certs:
        raise EmptyInputError("no certificates")
    return sum(1 for c in certs if c.pac_pass is True) / len(certs)
