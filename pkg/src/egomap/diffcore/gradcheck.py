"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, precision

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
# a check with more than this share of probes straddling a kink is inconclusive and fails
MAX_KINK_FRACTION = 0.1


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    per_input: list[float] = field(default_factory=list)
    tol: float = DEFAULT_TOL
    probes: int = 0
    kinks: int = 0

    @property
    def passed(self) -> bool:
        if self.probes and self.kinks > MAX_KINK_FRACTION * self.probes:
            return False
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude.

    Scaling by the gradient's overall magnitude (rather than per element)
    keeps entries whose true derivative is ~0 from dominating the report.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = DEFAULT_EPS,
                      tol: float = DEFAULT_TOL, max_entries: int | None = 64,
                      rng: np.random.Generator | None = None, name: str = "op",
                      check: Sequence[bool] | None = None) -> GradCheckResult:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    The (possibly non-scalar) output is reduced with a fixed random
    projection so every output entry participates. At most ``max_entries``
    coordinates per input are probed. Runs in high precision.

    A central difference is only a derivative estimate when both probe
    points lie on the same smooth piece of the function. Piecewise ops
    (relu, the L1 scan, the cosine denominator floor) log their active
    branch; a probe whose branch pattern differs from the unperturbed one
    is counted as a kink and left out of the comparison.
    """
    rng = rng or np.random.default_rng(0)
    check = list(check) if check is not None else [t.requires_grad for t in inputs]
    with precision("high"):
        inputs = [Tensor(np.asarray(t.data, dtype=np.float64), requires_grad=t.requires_grad) for t in inputs]
        with Tape() as tape:
            out = fn(*inputs)
        proj = rng.standard_normal(out.shape)

        def objective() -> tuple[float, list]:
            ops._branch_log = []
            try:
                value = float((fn(*inputs).data * proj).sum())
                return value, ops._branch_log
            finally:
                ops._branch_log = None

        _, base = objective()

        for t in inputs:
            t.grad = None
        tape.backward(out, seed=proj)
        per_input = []
        probes = kinks = 0
        for t, do in zip(inputs, check):
            if not do:
                continue
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            numeric = np.empty(len(idx))
            smooth = np.ones(len(idx), dtype=bool)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                plus, plus_branches = objective()
                flat[i] = orig - eps
                minus, minus_branches = objective()
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * eps)
                smooth[j] = plus_branches == base and minus_branches == base
            probes += len(idx)
            kinks += int((~smooth).sum())
            per_input.append(relative_error(analytic.reshape(-1)[idx][smooth], numeric[smooth]))
    worst = max(per_input) if per_input else 0.0
    return GradCheckResult(name=name, max_rel_err=worst, per_input=per_input, tol=tol, probes=probes, kinks=kinks)
