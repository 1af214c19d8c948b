# src/gradcheck.py

"""
Finite-difference verification of every differentiable operation.

Each check reduces an operation's output to a scalar with a fixed random
projection, takes the analytic gradient with autograd and compares its
directional derivative along random unit directions with a central
difference of the scalar. Everything runs in double precision on toy shapes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import pandas as pd
import torch
import torch.nn as nn

from core.geometry import resize_disparity, warp_horizontal
from core.models import ModelConfig
from network.base_estimators import BASE_LEVEL, soft_argmin
from network.features import NUM_LEVELS
from network.rru import horizontal_correlation
from network.stereo_net import StereoNet
from training import cross_entropy_occ, smooth_l1

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-3
# A direction whose central difference changes when the step shrinks by
# REFINE_RATIO has a ReLU, floor or border kink inside the stencil; it is
# replaced by a fresh draw, at most MAX_REDRAWS times.
REFINE_RATIO = 0.1
SMOOTHNESS_TOLERANCE = DEFAULT_TOLERANCE / 4
MAX_REDRAWS = 8
# Relative errors are taken against at least this derivative magnitude.
DERIVATIVE_FLOOR = 1e-5

TOY_HEIGHT = 32
TOY_WIDTH = 64

TOY_MODEL = ModelConfig(
    feature_channels=(4, 4, 4, 4, 4),
    hidden_channels=6,
    context_channels=3,
    motion_channels=6,
    corr_radius=1,
    corr_levels=(1, 2),
    max_disparity_train=32,
    bde_channels=3,
    bde_aggregation_depth=1,
    bme_channels=3,
    nlr_channels=3,
    rru_iters_train=1,
    rru_iters_infer=1,
)


class _ScaleGrad(torch.autograd.Function):
    """Identity forward, gradient scaled on the way back. Used for fault injection."""

    @staticmethod
    def forward(ctx, x, factor):
        ctx.factor = factor
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.factor, None


def scale_grad(x: torch.Tensor, factor: float) -> torch.Tensor:
    return _ScaleGrad.apply(x, factor)


@dataclass(frozen=True)
class GradcheckCase:
    name: str
    max_rel_error: float
    directions: int
    tensors: int
    seconds: float
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    step: float
    seed: int
    cases: List[GradcheckCase] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def failures(self) -> List[str]:
        return [c.name for c in self.cases if not c.passed]

    def errors(self) -> Dict[str, float]:
        return {c.name: c.max_rel_error for c in self.cases}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "operation": c.name,
                    "max_rel_error": c.max_rel_error,
                    "directions": c.directions,
                    "tensors": c.tensors,
                    "seconds": round(c.seconds, 3),
                    "passed": c.passed,
                }
                for c in self.cases
            ]
        )

    def to_text(self) -> str:
        verdict = "PASS" if self.passed else f"FAIL ({', '.join(self.failures)})"
        header = (
            f"gradient check: tolerance {self.tolerance:g}, step {self.step:g}, "
            f"seed {self.seed} -> {verdict}"
        )
        return header + "\n" + self.to_frame().to_string(index=False)


# -----------------------------------------------------------------------------
# Core check
# -----------------------------------------------------------------------------

def directional_error(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    generator: torch.Generator,
    step: float = DEFAULT_STEP,
    directions: int = 2,
    max_redraws: int = MAX_REDRAWS,
) -> float:
    """
    Max relative error between autograd and a central difference of
    <fn(), P> along random unit directions in the joint space of `tensors`.

    `fn` must read the current values of `tensors` (leaf tensors or module
    parameters) every time it is called. A direction is redrawn when its
    stencil is not smooth; after `max_redraws` the last draw is scored as is.
    """
    out = fn()
    projection = torch.randn(out.shape, generator=generator, dtype=out.dtype)

    def scalar() -> torch.Tensor:
        return (fn() * projection).sum()

    grads = torch.autograd.grad((out * projection).sum(), list(tensors), allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]

    def central(vs: List[torch.Tensor], h: float) -> float:
        saved = [t.detach().clone() for t in tensors]
        with torch.no_grad():
            for t, v in zip(tensors, vs):
                t.add_(h * v)
            plus = float(scalar())
            for t, v, s in zip(tensors, vs, saved):
                t.copy_(s - h * v)
            minus = float(scalar())
            for t, s in zip(tensors, saved):
                t.copy_(s)
        return (plus - minus) / (2.0 * h)

    worst = 0.0
    for _ in range(directions):
        for attempt in range(max_redraws + 1):
            vs = [torch.randn(t.shape, generator=generator, dtype=t.dtype) for t in tensors]
            norm = torch.sqrt(sum((v * v).sum() for v in vs))
            vs = [v / norm for v in vs]
            numeric = central(vs, step)
            fine = central(vs, step * REFINE_RATIO)
            spread = max(abs(numeric), abs(fine), DERIVATIVE_FLOOR)
            if abs(numeric - fine) <= SMOOTHNESS_TOLERANCE * spread:
                break
            logger.debug("direction %d crosses a kink (%.3e vs %.3e)", attempt, numeric, fine)

        analytic = float(sum((g * v).sum() for g, v in zip(grads, vs)))
        scale = max(abs(numeric), abs(analytic), DERIVATIVE_FLOOR)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def _leaf(generator: torch.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> torch.Tensor:
    t = torch.rand(shape, generator=generator, dtype=torch.float64) * (high - low) + low
    return t.requires_grad_(True)


def _params(module: nn.Module) -> List[torch.Tensor]:
    return [p for p in module.parameters() if p.requires_grad]


# -----------------------------------------------------------------------------
# Cases
# -----------------------------------------------------------------------------

Case = Callable[[torch.Generator, StereoNet, Callable[[torch.Tensor], torch.Tensor]], tuple]


def _warp(g, model, tap):
    source = _leaf(g, 1, 2, 4, 12)
    disparity = _leaf(g, 1, 1, 4, 12, low=0.2, high=3.8)
    return (lambda: tap(warp_horizontal(source, disparity)[0])), [source, disparity]


def _resize(g, model, tap):
    d = _leaf(g, 1, 1, 5, 7, low=0.0, high=6.0)
    return (lambda: tap(resize_disparity(d, 9, 13))), [d]


def _soft_argmin(g, model, tap):
    cost = _leaf(g, 1, 4, 3, 5, low=-2.0, high=2.0)
    return (lambda: tap(soft_argmin(cost))), [cost]


def _correlation(g, model, tap):
    f_left = _leaf(g, 1, 3, 4, 10)
    f_warped = _leaf(g, 1, 3, 4, 10)
    return (lambda: tap(horizontal_correlation(f_left, f_warped, 2))), [f_left, f_warped]


def _features(g, model, tap):
    image = _leaf(g, 1, 3, TOY_HEIGHT, TOY_WIDTH, low=0.0, high=1.0)

    def fn():
        return tap(torch.cat([level.flatten() for level in model.features(image)]))

    return fn, _params(model.features) + [image]


def _base_level_features(g, model):
    c = model.config.feature_channels[BASE_LEVEL]
    h, w = TOY_HEIGHT >> (BASE_LEVEL + 1), TOY_WIDTH >> (BASE_LEVEL + 1)
    return _leaf(g, 1, c, h, w), _leaf(g, 1, c, h, w)


def _base_disparity(g, model, tap):
    f_left, f_right = _base_level_features(g, model)
    return (lambda: tap(model.bde(f_left, f_right))), _params(model.bde) + [f_left, f_right]


def _base_occlusion(g, model, tap):
    f_left, f_warped = _base_level_features(g, model)
    return (lambda: tap(model.bme(f_left, f_warped))), _params(model.bme) + [f_left, f_warped]


def _pyramid(g, model) -> List[torch.Tensor]:
    channels = model.config.feature_channels
    return [
        torch.rand((1, channels[i], TOY_HEIGHT >> (i + 1), TOY_WIDTH >> (i + 1)),
                   generator=g, dtype=torch.float64) * 2 - 1
        for i in range(NUM_LEVELS)
    ]


def _rru_step(g, model, tap):
    pyr_left, pyr_warped = _pyramid(g, model), _pyramid(g, model)
    occ_init = torch.rand((1, 2, TOY_HEIGHT >> 4, TOY_WIDTH >> 4), generator=g, dtype=torch.float64)
    with torch.no_grad():
        state, d1, o1 = model.rru.init(pyr_left, pyr_warped, occ_init)
    d1 = _leaf(g, *d1.shape, low=0.1, high=1.4)
    o1 = o1.clone().requires_grad_(True)

    def fn():
        # init is part of the op so hidden/context projections are covered too
        s, _, _ = model.rru.init(pyr_left, pyr_warped, occ_init)
        s_next, d_next, o_next, _ = model.rru.step(s, pyr_left, pyr_warped, d1, o1)
        return tap(torch.cat([s_next.hidden.flatten(), d_next.flatten(), o_next.flatten()]))

    return fn, _params(model.rru) + [d1, o1]


def _nlr(g, model, tap):
    left = _leaf(g, 1, 3, 16, 24, low=0.0, high=1.0)
    d0 = _leaf(g, 1, 1, 16, 24, low=1.0, high=20.0)
    return (lambda: tap(model.nlr(left, d0))), _params(model.nlr) + [left, d0]


def _smooth_l1(g, model, tap):
    pred = _leaf(g, 1, 1, 6, 8, low=-3.0, high=3.0)
    target = torch.rand((1, 1, 6, 8), generator=g, dtype=torch.float64)
    return (lambda: tap(smooth_l1(pred, target).reshape(1))), [pred]


def _cross_entropy(g, model, tap):
    scores = _leaf(g, 1, 2, 6, 8, low=-2.0, high=2.0)
    labels = (torch.rand((1, 6, 8), generator=g) > 0.5).long()
    return (lambda: tap(cross_entropy_occ(scores, labels).reshape(1))), [scores]


CASES: Dict[str, Case] = {
    "warp_horizontal": _warp,
    "resize_disparity": _resize,
    "soft_argmin": _soft_argmin,
    "horizontal_correlation": _correlation,
    "feature_extractor": _features,
    "base_disparity": _base_disparity,
    "base_occlusion": _base_occlusion,
    "rru_step": _rru_step,
    "nlr_refine": _nlr,
    "smooth_l1": _smooth_l1,
    "cross_entropy_occ": _cross_entropy,
}

FAULT_FACTOR = 1.1


def gradcheck_suite(
    cfg: Optional[ModelConfig] = None,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    directions: int = 2,
    only: Optional[Iterable[str]] = None,
    faults: Iterable[str] = (),
) -> GradcheckReport:
    """
    Run the finite-difference checks. `faults` names operations whose analytic
    gradient is scaled by 1.1 before comparison; a healthy harness fails them.
    """
    names = list(CASES) if only is None else list(only)
    unknown = [n for n in (*names, *faults) if n not in CASES]
    if unknown:
        raise ValueError(f"unknown gradient checks: {unknown}; choose from {list(CASES)}")
    faulty = set(faults)

    report = GradcheckReport(tolerance=tolerance, step=step, seed=seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = StereoNet(cfg or TOY_MODEL).double()
        model.train()
        for index, name in enumerate(names):
            started = time.perf_counter()
            g = torch.Generator().manual_seed(seed * 1000 + index)
            factor = FAULT_FACTOR if name in faulty else 1.0

            def tap(t: torch.Tensor, factor=factor) -> torch.Tensor:
                return scale_grad(t, factor) if factor != 1.0 else t

            fn, tensors = CASES[name](g, model, tap)
            error = directional_error(fn, tensors, g, step=step, directions=directions)
            case = GradcheckCase(
                name=name,
                max_rel_error=error,
                directions=directions,
                tensors=len(tensors),
                seconds=time.perf_counter() - started,
                passed=error <= tolerance,
            )
            report.cases.append(case)
            log = logger.info if case.passed else logger.warning
            log("gradcheck %-22s max rel error %.3e (%s)", name, error,
                "ok" if case.passed else "FAIL")
    return report
