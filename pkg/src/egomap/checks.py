"""Finite-difference suites shared by the test-suite and the ``gradcheck`` command."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import GradCheckResult, Tensor, finite_diff_check, parameter
from .geometry import CameraIntrinsics

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _p(rng, *shape, scale=1.0):
    return parameter(rng.standard_normal(shape) * scale)


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    # keep kinked ops (relu, abs) away from their non-differentiable point
    return np.where(np.abs(x) < margin, margin * 5 * np.sign(x + 1e-12), x)


def _conv(rng):
    stride, pad = [(1, 0), (2, 1), (1, 1), (2, 0)][int(rng.integers(4))]
    return (lambda x, w, b: dc.conv2d(x, w, b, stride, pad)), [_p(rng, 3, 8, 8), _p(rng, 2, 3, 3, 3), _p(rng, 2)]


def _gru(rng):
    hidden, n_in = 4, 3
    ps = [_p(rng, 3 * hidden, n_in, scale=0.5), _p(rng, 3 * hidden, hidden, scale=0.5),
          _p(rng, 3 * hidden, scale=0.5), _p(rng, 3 * hidden, scale=0.5)]

    def unroll(h0, xs, *p):
        h = h0
        for t in range(5):
            h = dc.gru_cell(h, xs[t], *p)
        return h
    return unroll, [_p(rng, 2, hidden, scale=0.5), _p(rng, 5, 2, n_in)] + ps


def _grid_sample(rng):
    grid = rng.uniform(-1.3, 1.3, (2, 4, 4, 2))
    return (lambda m: dc.bilinear_grid_sample(m, grid)), [_p(rng, 2, 3, 5, 6)]


def _scatter(rng):
    cells = rng.integers(-1, 6, (2, 12))
    return (lambda f: dc.scatter_mean(f, cells, 6)[0]), [_p(rng, 2, 12, 3)]


def _l1(rng):
    v, q = _p(rng, 2, 4, 9), _p(rng, 2, 4)
    v.data[...] = q.data[:, :, None] + _away_from_zero(v.data - q.data[:, :, None])
    return dc.l1_scan, [v, q]


def _relu(rng):
    return dc.relu, [parameter(_away_from_zero(rng.standard_normal((4, 5))))]


def _unary(fn):
    return lambda rng: (fn, [_p(rng, 4, 5)])


def _binary(fn):
    return lambda rng: (fn, [_p(rng, 3, 4), _p(rng, 3, 4)])


OP_CASES: dict[str, Callable] = {
    "conv2d": _conv,
    "linear": lambda rng: (dc.linear, [_p(rng, 5, 7), _p(rng, 4, 7), _p(rng, 4)]),
    "gru_cell": _gru,
    "softmax_with_temperature": lambda rng: (dc.softmax_with_temperature,
                                             [_p(rng, 3, 6), parameter(1.0 + rng.random(3) * 3)]),
    "bilinear_grid_sample": _grid_sample,
    "scatter_mean": _scatter,
    "cosine_scan": lambda rng: (dc.cosine_scan, [_p(rng, 2, 4, 9), _p(rng, 2, 4)]),
    "l1_scan": _l1,
    "weighted_sum": lambda rng: (dc.weighted_sum, [_p(rng, 2, 9), _p(rng, 2, 4, 9)]),
    "relu": _relu,
    "tanh": _unary(dc.tanh),
    "sigmoid": _unary(dc.sigmoid),
    "oneplus": _unary(dc.oneplus),
    "log_softmax": _unary(dc.log_softmax),
    "categorical_entropy": _unary(dc.categorical_entropy),
    "categorical_log_prob": _unary(lambda x: dc.categorical_log_prob(x, [0, 3, 1, 2])),
    "sum": _unary(lambda x: dc.sum_(x, axis=1)),
    "mean": _unary(lambda x: dc.mean(x, axis=0)),
    "reshape": _unary(lambda x: dc.reshape(x, (-1,))),
    "transpose": _unary(lambda x: dc.transpose(x, (1, 0))),
    "slice": _unary(lambda x: x[1:, ::2]),
    "add": _binary(dc.add),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul),
    "mse": _binary(dc.mse),
    "concat": _binary(lambda a, b: dc.concat([a, b], axis=1)),
    "stack": _binary(lambda a, b: dc.stack([a, b], axis=1)),
}


def check_op(name: str, instances: int = 20, seed: int = 0, tol: float = OP_TOL) -> GradCheckResult:
    """Worst relative error of ``name`` over ``instances`` random cases."""
    worst = 0.0
    per = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        with dc.precision("high"):
            fn, inputs = OP_CASES[name](rng)
        res = finite_diff_check(fn, inputs, rng=rng, tol=tol, name=name)
        per.append(res.max_rel_err)
        worst = max(worst, res.max_rel_err)
    return GradCheckResult(name, worst, per, tol)


def diffcore_suite(instances: int = 20, seed: int = 0) -> list[GradCheckResult]:
    return [check_op(name, instances, seed) for name in OP_CASES]


# ---------------------------------------------------------------- memory and agents

def memory_suite(instances: int = 20, seed: int = 0) -> list[GradCheckResult]:
    from .memory import EgoMapState, GlobalRead, attention_read, egocentric_view

    def read_case(rng):
        view = _p(rng, 2, 18, 5, 5)
        metric = ("cosine", "l1")[int(rng.integers(2))]
        return (lambda v, q, b: attention_read(v, q, b, metric=metric).context), \
            [view, _p(rng, 2, 16), _p(rng, 2)]

    def view_case(rng):
        poses = np.column_stack([rng.uniform(2, 5, 2), rng.uniform(2, 5, 2), rng.uniform(-np.pi, np.pi, 2)])

        def fn(feats):
            state = EgoMapState(feats, np.ones((2, 8, 8), dtype=np.int64), np.full((2, 2), 3.5), 0.6)
            return egocentric_view(state, poses, 8)
        return fn, [_p(rng, 2, 16, 8, 8)]

    def global_case(rng):
        reader = GlobalRead(rng)
        return (lambda v: reader(v)), [_p(rng, 1, 18, 24, 24)]

    cases = {"attention_read": read_case, "egocentric_view": view_case, "global_read": global_case}
    out = []
    for name, make in cases.items():
        worst, per = 0.0, []
        for i in range(instances):
            rng = np.random.default_rng([seed, i, 7])
            with dc.precision("high"):
                fn, inputs = make(rng)
            res = finite_diff_check(fn, inputs, rng=rng, max_entries=24, name=name)
            per.append(res.max_rel_err)
            worst = max(worst, res.max_rel_err)
        out.append(GradCheckResult(name, worst, per, OP_TOL))
    return out


END_TO_END_PARAMS = {
    "baseline": ("perception.conv0.w", "perception.conv2.b", "reduce.w", "gru.w_hh", "policy.w", "value.b"),
    "egomap": ("perception.conv0.w", "perception.conv2.w", "global_read.conv0.w", "global_read.fc1.w",
               "reduce.w", "gru.w_ih", "query.w", "query.b", "policy.w", "value.w"),
    "neuralmap": ("perception.conv1.w", "global_read.conv1.w", "write_head.w", "gru.w_hh", "query.w",
                  "policy.b"),
}


def end_to_end_check(kind: str, seed: int = 0, steps: int = 2, max_entries: int = 6,
                     tol: float = END_TO_END_TOL) -> GradCheckResult:
    """Loss over a short simulated episode versus central differences on probe parameters.

    The episode (frames, depth, reported motion) comes from the simulator;
    the loss projects every step's logits and value onto fixed random
    directions so all outputs participate.
    """
    from .agents import AgentConfig, Agent
    from .env import Simulator, generate

    rng = np.random.default_rng([seed, 11])
    config = generate(int(rng.integers(1 << 20)), "find_return")
    sim = Simulator(config, noise_sigma=0.05, noise_seed=seed)
    start = sim.pose.copy()
    frames, deltas = [sim.render()], [np.zeros(3)]
    for _ in range(steps - 1):
        sim.advance(int(rng.integers(5)))
        frames.append(sim.render())
        deltas.append(sim.last_reported_delta.copy())
    with dc.precision("high"):
        agent = Agent(AgentConfig(kind=kind, init_seed=seed))
    proj = rng.standard_normal((steps, 6))
    names = END_TO_END_PARAMS[kind]

    def loss(*tensors):
        for n, t in zip(names, tensors):
            agent.set_param(n, t)
        state = agent.initial_state(start[None], sim.anchor[None], config.params.extent)
        total = None
        for t in range(steps):
            out, state = agent.forward(frames[t][None].astype(np.float64), deltas[t][None], state)
            term = dc.add(dc.sum_(dc.mul(out.logits, proj[t, :5][None])), dc.mul(dc.sum_(out.value), proj[t, 5]))
            total = term if total is None else dc.add(total, term)
        return total

    inputs = [agent.params[n] for n in names]
    for t in inputs:
        t.requires_grad = True
    return finite_diff_check(loss, inputs, rng=rng, tol=tol, max_entries=max_entries, name=f"end2end/{kind}")


def end_to_end_suite(instances: int = 20, kinds=("baseline", "egomap", "neuralmap")) -> list[GradCheckResult]:
    out = []
    for kind in kinds:
        results = [end_to_end_check(kind, seed=i) for i in range(instances)]
        out.append(GradCheckResult(f"end2end/{kind}", max(r.max_rel_err for r in results),
                                   [r.max_rel_err for r in results], END_TO_END_TOL))
    return out


def format_report(results: list[GradCheckResult]) -> str:
    lines = [f"{'check':32s} {'max rel err':>12s} {'tol':>8s}  result"]
    for r in results:
        lines.append(f"{r.name:32s} {r.max_rel_err:12.3e} {r.tol:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


__all__ = ["OP_CASES", "check_op", "diffcore_suite", "memory_suite", "end_to_end_check", "end_to_end_suite",
           "format_report", "CameraIntrinsics", "Tensor"]
