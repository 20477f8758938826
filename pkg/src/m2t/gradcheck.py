"""Gradient-oracle suites: autodiff vs central finite differences.

Each suite draws random inputs in [-2, 2] (shifted positive where the op's
domain demands it) and compares every parameter gradient against central
differences at h=1e-5, relative tolerance 1e-4. The composite suite runs
the full two-view prediction loss of a small BN MLP, which exercises the
whole backward path the trainer uses.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import constant, finite_diff_check, parameter
from .model import MlpSpec, build_pair, mlp_spec
from .normalization import WorkerLayout
from .objectives import byol_loss, symmetrized_loss

DEFAULT_TRIALS = 100
DEFAULT_TOL = 1e-4
DEFAULT_H = 1e-5


def _case_binary(op):
    def build(rng):
        x = parameter(rng.uniform(-2, 2, size=(3, 4)))
        y = parameter(rng.uniform(0.2, 2.0, size=(3, 4)))
        return lambda: engine.sum(engine.elementwise(op, x, y)), [("x", x), ("y", y)]
    return build


def _case_unary(op, positive=False):
    def build(rng):
        lo, hi = (0.2, 2.0) if positive else (-2.0, 2.0)
        x = parameter(rng.uniform(lo, hi, size=(3, 4)))
        return lambda: engine.sum(engine.elementwise(op, x)), [("x", x)]
    return build


def _case_matmul(rng):
    a = parameter(rng.uniform(-2, 2, size=(3, 4)))
    b = parameter(rng.uniform(-2, 2, size=(4, 2)))

    def f():
        out = engine.matmul(a, b)
        return engine.sum(engine.mul(out, out))

    return f, [("a", a), ("b", b)]


def _case_reduce(op):
    def build(rng):
        x = parameter(rng.uniform(-2, 2, size=(4, 3)))

        def f():
            r = engine.reduce(op, x, axis=0)
            return engine.sum(engine.mul(r, r))

        return f, [("x", x)]
    return build


def _randomize_student(pair, rng):
    # Perturb every block (biases and BN affines included) away from the
    # symmetric init: keeps the check off measure-zero kinks such as
    # all-zero prediction rows, and exercises every gradient path.
    for _, t, _ in pair.student_params():
        t.values = t.values + 0.3 * rng.standard_normal(t.values.shape)


def _case_byol_mlp(rng):
    spec = MlpSpec(widths=(3, 4, 2), bn=(True, False), relu=(True, False))
    pair = build_pair(spec, mlp_spec((2, 3, 2)), mlp_spec((2, 2, 2)), rng)
    _randomize_student(pair, rng)
    batch = rng.uniform(-2, 2, size=(6, 3))
    target = rng.uniform(-2, 2, size=(6, 2))
    layout = WorkerLayout(6, 2)

    def f():
        from .model import forward_student
        _, p = forward_student(pair, batch, layout)
        return byol_loss(p, constant(target))

    return f, [(name, t) for name, t, _ in pair.student_params()]


def _case_symmetrized(rng):
    spec = MlpSpec(widths=(3, 4, 4), bn=(True, True), relu=(True, True))
    pair = build_pair(spec, mlp_spec((4, 4, 3)), mlp_spec((3, 3, 3)), rng)
    _randomize_student(pair, rng)
    v1 = rng.uniform(-2, 2, size=(6, 3))
    v2 = rng.uniform(-2, 2, size=(6, 3))
    layout = WorkerLayout(6, 2)

    def f():
        for state in pair.teacher_bn_states():
            state.pending.clear()
        out = symmetrized_loss(pair, v1, v2, layout, alpha=1.0)
        return out.loss

    return f, [(name, t) for name, t, _ in pair.student_params()]


SUITES = {
    "add": _case_binary("add"),
    "sub": _case_binary("sub"),
    "mul": _case_binary("mul"),
    "div": _case_binary("div"),
    "relu": _case_unary("relu"),
    "sqrt": _case_unary("sqrt", positive=True),
    "exp": _case_unary("exp"),
    "log": _case_unary("log", positive=True),
    "neg": _case_unary("neg"),
    "matmul": _case_matmul,
    "mean": _case_reduce("mean"),
    "sum": _case_reduce("sum"),
    "var": _case_reduce("var"),
    "byol_mlp": _case_byol_mlp,
    "symmetrized_loss": _case_symmetrized,
}

# The composite suites cost more per trial; fewer draws keep the gate quick
# without losing coverage of the full backward path.
_COMPOSITE_TRIALS = {"byol_mlp": 10, "symmetrized_loss": 5}


def run_suite(name: str, trials: int = DEFAULT_TRIALS, h: float = DEFAULT_H,
              tol: float = DEFAULT_TOL, seed: int = 0) -> float:
    """Worst relative error over all trials of one suite."""
    build = SUITES[name]
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        f, params = build(rng)
        report = finite_diff_check(f, params, h=h, tol=tol)
        err = report.max_rel_error
        if not np.isfinite(err):
            return float("nan")
        worst = max(worst, err)
    return worst


def run_all(trials: int = DEFAULT_TRIALS, h: float = DEFAULT_H,
            tol: float = DEFAULT_TOL, seed: int = 0) -> dict:
    """All suites; returns {name: worst_error} plus a 'passed' flag entry."""
    results = {}
    ok = True
    for name in SUITES:
        n = min(trials, _COMPOSITE_TRIALS.get(name, trials))
        worst = run_suite(name, trials=n, h=h, tol=tol, seed=seed)
        results[name] = worst
        if not (np.isfinite(worst) and worst <= tol):
            ok = False
    results["passed"] = ok
    return results
