"""
Gradient-check suite

Checks every differentiable operation (and the full patch-level VAE loss)
against central finite differences in double precision, over several seeds.
Each case wraps its operation into a scalar by projecting the output onto a
fixed random tensor.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from rich.table import Table

from mra_errors import GradCheckFailure, NonFiniteError
from tensor_engine import (
    ConvSpec,
    Tensor,
    add,
    clamp,
    conv2d,
    conv_transpose2d,
    div,
    exp,
    fixed_window_mean,
    grad_check,
    leaky_relu,
    mul,
    reduce_mean,
    reduce_sum,
    sigmoid,
    square,
    sub,
)
from vae_model import LatentStats, VaeArchitecture, VaeParams, forward
from vae_objectives import LossConfig, LossMode, SsimConfig, kl_loss, l2_loss, ssim_loss, total_loss

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_TOLERANCE = 1e-5

# builder(rng) -> (scalar function, input arrays)
CaseBuilder = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[np.ndarray]]]


@dataclass
class GradCheckCase:
    name: str
    build: CaseBuilder
    step: float = 1e-5
    tolerance: float = DEFAULT_TOLERANCE
    max_coords: Optional[int] = None
    random_coords: int = 0


@dataclass
class GradCheckOutcome:
    name: str
    max_rel_error: float
    tolerance: float
    seeds: List[int] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error <= self.tolerance


def _uniform(rng: np.random.Generator, *shape: int) -> np.ndarray:
    # |values| in [0.1, 1]: near-zero gradients make the relative error meaningless
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def projected(op: Callable[..., Tensor], rng: np.random.Generator,
              *shapes: Tuple[int, ...]) -> Tuple[Callable[..., Tensor], List[np.ndarray]]:
    """Wrap op into sum(op(inputs) * R) with fixed random R"""
    inputs = [_uniform(rng, *s) for s in shapes]
    out_shape = op(*[Tensor(x) for x in inputs]).shape
    weights = Tensor(_uniform(rng, *out_shape))
    return (lambda *ts: reduce_sum(mul(op(*ts), weights))), inputs


def _elementwise(op: Callable[..., Tensor], arity: int) -> CaseBuilder:
    return lambda rng: projected(op, rng, *[(2, 3, 4, 5)] * arity)


def _div_case(rng: np.random.Generator):
    fn, (a, b) = projected(div, rng, (2, 3, 4, 5), (2, 3, 4, 5))
    # keep the divisor away from zero
    b = np.sign(b) * (0.5 + np.abs(b))
    return fn, [a, b]


def _conv_case(rng: np.random.Generator):
    spec = ConvSpec.square(2, 3, kernel=3, stride=2, padding=1)
    return projected(lambda x, w, b: conv2d(x, w, b, spec), rng, (1, 2, 5, 5), (3, 2, 3, 3), (3,))


def _conv_transpose_case(rng: np.random.Generator):
    spec = ConvSpec.square(2, 3, kernel=4, stride=2, padding=1)
    return projected(lambda x, w, b: conv_transpose2d(x, w, b, spec), rng, (1, 2, 3, 3), (2, 3, 4, 4), (3,))


def _window_case(rng: np.random.Generator):
    window = SsimConfig(window_size=5).window()
    return projected(lambda x: fixed_window_mean(x, window), rng, (2, 2, 8, 8))


def _ssim_case(rng: np.random.Generator):
    x, y = _uniform(rng, 1, 1, 13, 13), _uniform(rng, 1, 1, 13, 13)
    return (lambda a, b: ssim_loss(a, b, SsimConfig(), weight=1000.0)), [x, y]


def _kl_case(rng: np.random.Generator):
    mu, logvar = _uniform(rng, 2, 3, 2, 2), _uniform(rng, 2, 3, 2, 2)
    return (lambda m, lv: kl_loss(LatentStats(m, lv))), [mu, logvar]


def _total_loss_case(mode: LossMode) -> CaseBuilder:
    def build(rng: np.random.Generator):
        arch = VaeArchitecture.default()
        names = list(arch.parameter_shapes())
        start = VaeParams.initialize(arch, seed=int(rng.integers(2 ** 31)), precision="double")
        arrays = [a.copy() for a in start.arrays().values()]
        # random biases so no layer sits at a symmetric point
        arrays = [a + 0.05 * _uniform(rng, *a.shape) if n.endswith(".bias") else a
                  for n, a in zip(names, arrays)]
        batch = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 32, 32)))
        cfg = LossConfig(mode=mode)
        noise_seed = int(rng.integers(2 ** 31))

        def loss(*tensors: Tensor) -> Tensor:
            params = VaeParams(arch, dict(zip(names, tensors)))
            recon, stats = forward(params, batch, rng=np.random.default_rng(noise_seed))
            return total_loss(batch, recon, stats, cfg)[0]

        return loss, arrays
    return build


def default_cases() -> List[GradCheckCase]:
    return [
        GradCheckCase("add", _elementwise(add, 2)),
        GradCheckCase("sub", _elementwise(sub, 2)),
        GradCheckCase("mul", _elementwise(mul, 2)),
        GradCheckCase("div", _div_case),
        GradCheckCase("exp", _elementwise(exp, 1)),
        GradCheckCase("square", _elementwise(square, 1)),
        GradCheckCase("clamp", _elementwise(lambda x: clamp(x, -0.5, 0.5), 1)),
        GradCheckCase("leaky_relu", _elementwise(lambda x: leaky_relu(x, 0.01), 1)),
        GradCheckCase("sigmoid", _elementwise(sigmoid, 1)),
        GradCheckCase("reduce_sum", lambda rng: ((lambda x: mul(reduce_sum(x), 0.3)), [_uniform(rng, 2, 3, 4, 5)])),
        GradCheckCase("reduce_mean", lambda rng: ((lambda x: mul(reduce_mean(x), 3.0)), [_uniform(rng, 2, 3, 4, 5)])),
        GradCheckCase("conv2d", _conv_case),
        GradCheckCase("conv_transpose2d", _conv_transpose_case),
        GradCheckCase("fixed_window_mean", _window_case),
        GradCheckCase("l2_loss", lambda rng: (l2_loss, [_uniform(rng, 2, 1, 6, 6), _uniform(rng, 2, 1, 6, 6)])),
        GradCheckCase("ssim_loss", _ssim_case, step=1e-4),
        GradCheckCase("kl_loss", _kl_case),
        GradCheckCase("total_loss_l2", _total_loss_case(LossMode.L2), step=1e-6, max_coords=8,
                      random_coords=4),
        GradCheckCase("total_loss_ssim", _total_loss_case(LossMode.SSIM), step=1e-6, max_coords=8,
                      random_coords=4),
    ]


def run_case(case: GradCheckCase, seeds: Sequence[int] = DEFAULT_SEEDS) -> GradCheckOutcome:
    worst = 0.0
    for seed in seeds:
        fn, inputs = case.build(np.random.default_rng(seed))
        try:
            err = grad_check(fn, inputs, step=case.step, max_coords=case.max_coords,
                             random_coords=case.random_coords, rng=np.random.default_rng(seed))
        except NonFiniteError as e:
            return GradCheckOutcome(case.name, float("nan"), case.tolerance, list(seeds), error=str(e))
        worst = max(worst, err)
    outcome = GradCheckOutcome(case.name, worst, case.tolerance, list(seeds))
    logger.debug("%s: max relative error %.3e (%s)", case.name, worst, "ok" if outcome.passed else "FAIL")
    return outcome


def run_suite(cases: Optional[Sequence[GradCheckCase]] = None,
              seeds: Sequence[int] = DEFAULT_SEEDS) -> List[GradCheckOutcome]:
    """Run every case over every seed; see require_pass for a raising variant"""
    outcomes = [run_case(case, seeds) for case in (cases if cases is not None else default_cases())]
    failed = [o.name for o in outcomes if not o.passed]
    logger.info("gradcheck: %d cases, %d failed%s", len(outcomes), len(failed),
                f" ({', '.join(failed)})" if failed else "")
    return outcomes


def require_pass(outcomes: Sequence[GradCheckOutcome]) -> None:
    failed = [o for o in outcomes if not o.passed]
    if failed:
        raise GradCheckFailure("gradient check failed", cases=[o.name for o in failed])


def outcome_table(outcomes: Sequence[GradCheckOutcome]) -> Table:
    table = Table(title="Gradient check (double precision, central differences)")
    table.add_column("operation")
    table.add_column("max rel. error", justify="right")
    table.add_column("tolerance", justify="right")
    table.add_column("result")
    for o in outcomes:
        status = "[green]pass[/green]" if o.passed else f"[red]FAIL[/red] {o.error or ''}".rstrip()
        table.add_row(o.name, f"{o.max_rel_error:.2e}", f"{o.tolerance:.0e}", status)
    return table
