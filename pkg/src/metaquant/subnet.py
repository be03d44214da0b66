"""Layer sensitivities from Hessian top eigenvalues, and budgeted sub-net search.

Second derivatives go through the quantizers' straight-through masks, which
are held fixed, so the curvature is that of the surrogate loss.  Batch norm
runs with its running statistics, which keeps the whole graph twice
differentiable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import InfeasibleBudgetError, InputError, NumericError, StageOrderError
from .metanet import MetaNet
from .tensor import Tape, Tensor

# -- Hessian-vector products ----------------------------------------------------


class HessianOperator:
    """``v -> H v`` for the Hessian block of ``params``.

    The forward graph and the differentiable gradient are recorded once on a
    private tape; every product then replays that tape.
    """

    def __init__(self, loss_fn: Callable[[], Tensor], params: Sequence[Tensor], label: str = ""):
        self.params = list(params)
        self.label = label
        self.tape = Tape()
        with T.use_tape(self.tape), T.grad_mode(True):
            self.loss = loss_fn()
            self.grads = T.grad(self.loss, self.params, create_graph=True)

    @property
    def shapes(self):
        return [p.shape for p in self.params]

    def __call__(self, vs: Sequence[np.ndarray]) -> list[np.ndarray]:
        vs = [np.asarray(v, dtype=p.dtype).reshape(p.shape) for v, p in zip(vs, self.params)]
        with T.use_tape(self.tape):
            out = T.grad(self.grads, self.params, grad_outputs=vs)
        res = [o.data for o in out]
        if not all(np.all(np.isfinite(r)) for r in res):
            raise NumericError(f"non-finite Hessian-vector product for {self.label or 'layer'}")
        return res

    def release(self):
        self.tape.clear()
        self.grads = None


def hessian_vector_product(loss_fn: Callable[[], Tensor], params, vs) -> list[np.ndarray]:
    """One-shot ``H v``; prefer :class:`HessianOperator` for repeated products."""
    single = isinstance(params, Tensor)
    op = HessianOperator(loss_fn, [params] if single else params)
    out = op([vs] if single else vs)
    op.release()
    return out[0] if single else out


# -- power iteration ------------------------------------------------------------


@dataclass
class PowerResult:
    value: float
    converged: bool
    iterations: int


def power_iteration(matvec: Callable, shapes, iters: int = 50, tol: float = 1e-4, seed: int = 0) -> PowerResult:
    """Dominant eigenvalue (signed Rayleigh quotient) of a symmetric operator.

    ``matvec`` maps a list of arrays with ``shapes`` to a list of the same.
    Stops when successive estimates differ by less than ``tol`` relative.
    """
    if iters < 1:
        raise InputError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    shapes = [tuple(s) for s in shapes]

    def norm(vs):
        return math.sqrt(sum(float(np.vdot(v, v)) for v in vs))

    for _ in range(100):
        v = [rng.standard_normal(s) for s in shapes]
        nv = norm(v)
        if nv > 0:
            break
    else:
        raise NumericError("could not draw a non-zero start vector")
    v = [x / nv for x in v]
    lam_prev = None
    lam = 0.0
    for i in range(1, iters + 1):
        hv = [np.asarray(h, dtype=np.float64) for h in matvec(v)]
        lam = sum(float(np.vdot(a, b)) for a, b in zip(v, hv))
        nh = norm(hv)
        if nh == 0.0:
            return PowerResult(0.0, True, i)
        v = [h / nh for h in hv]
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(abs(lam), 1e-30):
            return PowerResult(lam, True, i)
        lam_prev = lam
    return PowerResult(lam, False, iters)


def hessian_batch(data: Dataset, size: int = 512, seed: int = 0):
    """Fixed seeded subset of the training split used for curvature estimates."""
    n = len(data.y_train)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=min(size, n), replace=False))
    return data.x_train[idx], data.y_train[idx]


def _unit_params(net: MetaNet, unit: int) -> list[Tensor]:
    return [layer.weight for layer in net.unit_layers()[unit]]


def top_eigenvalue(net: MetaNet, x, y, unit: int, iters: int = 50, tol: float = 1e-4, seed: int = 0,
                   assignment=None) -> PowerResult:
    """Top Hessian eigenvalue for one unit's weights at a fixed assignment (default all-max)."""
    a = net.constant(max(net.bits)) if assignment is None else assignment
    params = _unit_params(net, unit)
    if any(p is None for p in params):
        raise InputError("curvature needs real weights; deployed networks have none")

    def loss_fn():
        logits = net.forward(Tensor._wrap(x), a, training=False)
        return T.softmax_cross_entropy(logits, y)

    op = HessianOperator(loss_fn, params, label=f"unit {unit}")
    try:
        return power_iteration(op, op.shapes, iters, tol, seed)
    finally:
        op.release()


def layer_sensitivities(net: MetaNet, x, y, iters: int = 50, tol: float = 1e-4, seed: int = 0):
    """Per-unit top eigenvalues at the all-max assignment; returns ``(values, converged flags)``."""
    vals, flags = [], []
    for u in range(net.num_units):
        r = top_eigenvalue(net, x, y, u, iters, tol, seed + u)
        vals.append(r.value)
        flags.append(r.converged)
    return np.array(vals), flags


# -- budget enumeration ---------------------------------------------------------


def budget_total(n_units: int, b_avg: float) -> int:
    """``round(N * b_avg)`` with halves rounded up."""
    return math.floor(n_units * Fraction(str(b_avg)) + Fraction(1, 2))


def count_table(n_units: int, bit_set, total_max: int) -> list[list[int]]:
    """``table[i][s]``: number of length-``i`` assignments summing to ``s``."""
    bits = sorted(set(bit_set))
    table = [[0] * (total_max + 1) for _ in range(n_units + 1)]
    table[0][0] = 1
    for i in range(1, n_units + 1):
        prev, cur = table[i - 1], table[i]
        for s in range(total_max + 1):
            cur[s] = sum(prev[s - b] for b in bits if s - b >= 0)
    return table


def count_budget(n_units: int, bit_set, b_avg: float) -> int:
    c = budget_total(n_units, b_avg)
    if c < 0:
        return 0
    return count_table(n_units, bit_set, c)[n_units][c]


def enumerate_budget(n_units: int, bit_set, b_avg: float, cap: int = 200_000, samples: int = 100_000,
                     seed: int = 0) -> list[tuple]:
    """Assignments with ``sum(b) == round(N * b_avg)``, sorted lexicographically.

    Exact when there are at most ``cap`` of them; otherwise ``samples`` uniform
    draws from the budget set (deduplicated).
    """
    if n_units < 1:
        raise InputError("need at least one unit")
    bits = sorted(set(bit_set))
    if not bits:
        raise InputError("empty bit set")
    c = budget_total(n_units, b_avg)
    if c < 0 or c > n_units * bits[-1]:
        raise InfeasibleBudgetError(f"budget {c} bits is not reachable with {n_units} units of {bits}")
    table = count_table(n_units, bits, c)
    total = table[n_units][c]
    if total == 0:
        raise InfeasibleBudgetError(f"no assignment of {n_units} units from {bits} sums to {c} bits")
    if total <= cap:
        out: list[tuple] = []
        prefix: list[int] = []

        def walk(rem, s):
            if rem == 0:
                out.append(tuple(prefix))
                return
            for b in bits:
                if s - b >= 0 and table[rem - 1][s - b]:
                    prefix.append(b)
                    walk(rem - 1, s - b)
                    prefix.pop()

        walk(n_units, c)
        return out
    return _sample_budget(table, n_units, bits, c, samples, seed)


def _draw_budget(table, n_units, bits, c, samples, rng):
    """``samples`` i.i.d. uniform draws (with repeats) from the assignments summing to ``c``."""
    # Choosing each bit with probability proportional to the number of valid
    # completions makes every budget-feasible assignment equally likely.
    ftab = np.array([[float(v) for v in row] for row in table])
    s = np.full(samples, c, dtype=np.int64)
    out = np.empty((samples, n_units), dtype=np.int64)
    barr = np.array(bits)
    for pos in range(n_units):
        rem = n_units - pos
        w = np.stack([np.where(s - b >= 0, ftab[rem - 1][np.maximum(s - b, 0)], 0.0) for b in bits], axis=1)
        cdf = np.cumsum(w, axis=1)
        u = rng.random(samples) * cdf[:, -1]
        choice = np.minimum((u[:, None] >= cdf).sum(axis=1), len(bits) - 1)
        out[:, pos] = barr[choice]
        s -= barr[choice]
    return out


def _sample_budget(table, n_units, bits, c, samples, seed):
    out = _draw_budget(table, n_units, bits, c, samples, np.random.default_rng(seed))
    uniq = np.unique(out, axis=0)
    return [tuple(int(b) for b in row) for row in uniq]


# -- ranking --------------------------------------------------------------------


@dataclass(frozen=True)
class SubnetCandidate:
    assignment: tuple
    total_bits: int
    score: float


def _score_key(score: float) -> float:
    # 12 significant digits: summation-order noise must not break exact ties.
    return float(f"{score:.12g}")


def rank_candidates(candidates, v_c, top_k: int | None = None, descending: bool = True) -> list[SubnetCandidate]:
    """Score ``sum(b_i * v_i)``, sort (descending by default), ties lexicographic."""
    cands = [tuple(int(b) for b in a) for a in candidates]
    if not cands:
        raise InputError("no candidates to rank")
    v = [float(x) for x in v_c]
    scored = []
    for a in cands:
        if len(a) != len(v):
            raise InputError(f"assignment length {len(a)} != sensitivity length {len(v)}")
        s = math.fsum(b * w for b, w in zip(a, v))
        scored.append(SubnetCandidate(a, sum(a), s))
    sign = -1.0 if descending else 1.0
    scored.sort(key=lambda c: (sign * _score_key(c.score), c.assignment))
    return scored if top_k is None else scored[:top_k]


# -- full search ----------------------------------------------------------------


@dataclass
class SearchRecord:
    assignment: tuple
    total_bits: int
    b_avg: float
    score: float
    top1_accuracy: float

    @property
    def assignment_str(self):
        return "-".join(str(b) for b in self.assignment)


def search(net: MetaNet, data: Dataset, b_avg: float, top_k: int = 5, sensitivities=None,
           descending: bool = True, cap: int = 200_000, samples: int = 100_000, seed: int = 0,
           hessian_size: int = 512, iters: int = 50, tol: float = 1e-4, batch_size: int = 500) -> list[SearchRecord]:
    """Rank budget-feasible assignments by sensitivity and evaluate the top ``top_k``."""
    from .trainer import evaluate_assignment

    if net.stage_completed < 3:
        raise StageOrderError("search needs a network that completed stage 3 (mixed-bit training)")
    if top_k < 1:
        raise InputError("top_k must be >= 1")
    if sensitivities is None:
        x, y = hessian_batch(data, hessian_size, seed)
        sensitivities, _ = layer_sensitivities(net, x, y, iters, tol, seed)
    bits = [b for b in net.bits]
    cands = enumerate_budget(net.num_units, bits, b_avg, cap, samples, seed)
    ranked = rank_candidates(cands, sensitivities, top_k, descending)
    out = []
    for c in ranked:
        acc = evaluate_assignment(net, data, c.assignment, batch_size)
        out.append(SearchRecord(c.assignment, c.total_bits, b_avg, c.score, acc))
    return out


CSV_COLUMNS = ("assignment", "total_bits", "b_avg", "score", "top1_accuracy")


def write_candidates_csv(path, records: Sequence[SearchRecord]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.assignment_str, r.total_bits, repr(r.b_avg), repr(r.score), repr(r.top1_accuracy)])
