"""Full-batch nonlinear conjugate gradient training and cascade-mask selection.

The optimiser uses the Polak-Ribiere direction update with an optional
non-negativity clamp, periodic and non-descent restarts, and a line search
that brackets the minimiser along the ray and then interpolates.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cfnn import CfnnNet, CfnnTopology, blocks_mask, count_mask
from .metrics import confusion

log = logging.getLogger(__name__)

LOG_HEADER = "k loss grad_norm beta step restart"


class TrainingDivergence(FloatingPointError):
    def __init__(self, iteration, message="objective became non-finite"):
        super().__init__(f"{message} at iterate {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 300
    grad_tol: float = 1e-6
    loss_tol: float = 1e-8
    restart_period: int | None = None  # None: min(parameter count, 200)
    initial_step: float = 1.0
    c1: float = 1e-4
    max_expansions: int = 20
    max_contractions: int = 30
    pr_clamp: bool = True
    weight_decay: float = 0.0  # L2 penalty 0.5 * decay * |theta|^2 added to the loss
    seed: int = 0

    def __post_init__(self):
        if not (self.grad_tol > 0 and self.loss_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.restart_period is not None and self.restart_period < 1:
            raise ValueError("restart period must be >= 1")
        if not 0 < self.c1 < 1:
            raise ValueError("sufficient-decrease constant must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.max_iter < 0 or self.initial_step <= 0:
            raise ValueError("max_iter must be >= 0 and initial_step > 0")

    def period(self, n_params: int) -> int:
        return self.restart_period or max(1, min(n_params, 200))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class CgState:
    k: int
    x: np.ndarray
    grad: np.ndarray
    grad_prev: np.ndarray | None
    direction: np.ndarray | None
    beta: float
    step: float
    f: float


@dataclass
class TrainReport:
    iterations: int
    final_loss: float
    grad_norm: float
    wall_time: float
    losses: list
    restarts: int
    line_search_failures: int
    stop_reason: str
    records: list = field(default_factory=list, repr=False)

    def log_lines(self) -> list[str]:
        """Training log, one line per iteration (timing excluded)."""
        out = [LOG_HEADER]
        for k, f, g, b, s, r in self.records:
            out.append(f"{k} {float(f)!r} {float(g)!r} {float(b)!r} {float(s)!r} {int(r)}")
        return out


# -- direction update ---------------------------------------------------------

def pr_beta(grad, grad_prev, clamp: bool = True) -> float:
    """Polak-Ribiere coefficient, optionally clamped at zero."""
    grad = np.asarray(grad, dtype=np.float64)
    grad_prev = np.asarray(grad_prev, dtype=np.float64)
    denom = float(grad_prev @ grad_prev)
    if denom == 0.0:
        raise ZeroDivisionError("previous gradient is zero; the iteration has converged")
    beta = float(grad @ (grad - grad_prev)) / denom
    return max(beta, 0.0) if clamp else beta


def cg_direction(grad, direction_prev, beta: float):
    """``-grad + beta * direction_prev``; returns (direction, restarted).

    A direction that is not strictly downhill is replaced by ``-grad``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if direction_prev is None:
        return -grad, True
    d = -grad + beta * np.asarray(direction_prev, dtype=np.float64)
    if not float(d @ grad) < 0.0:
        return -grad, True
    return d, False


# -- line search ----------------------------------------------------------------

@dataclass(frozen=True)
class LineSearchResult:
    step: float
    f: float
    grad: np.ndarray | None
    evaluations: int
    failed: bool


def _interpolate(a_lo, f_lo, s_lo, a_hi, f_hi, s_hi, shrink=False):
    """Minimiser estimate inside [a_lo, a_hi] from two evaluated points.

    With ``shrink`` the estimate stays in the nearer 60% of the interval so
    repeated calls contract it geometrically.
    """
    h = a_hi - a_lo
    if s_lo < 0.0 <= s_hi:
        # the slope changes sign: secant on the slope, exact for quadratics
        a = a_lo - s_lo * h / (s_hi - s_lo)
    else:
        # quadratic through f_lo, s_lo and f_hi
        curv = f_hi - f_lo - s_lo * h
        a = a_lo - s_lo * h * h / (2.0 * curv) if curv > 0 else a_lo + 0.5 * h
    lo = a_lo + 0.01 * h
    hi = a_lo + (0.6 if shrink else 0.99) * h
    return float(np.clip(a, min(lo, hi), max(lo, hi)))


def line_search(fun_grad, x, direction, f0: float, slope0: float,
                config: TrainConfig = TrainConfig(), step0: float | None = None,
                flat_tol: float = 0.1) -> LineSearchResult:
    """Approximate minimiser of ``f(x + a d)`` over ``a > 0`` with sufficient decrease.

    ``fun_grad`` returns ``(f, grad)``. The first trial is ``step0``; while
    the sufficient-decrease test holds and the slope is still negative the
    step grows, then the bracket is refined by interpolation until the slope
    has shrunk below ``flat_tol`` times its starting magnitude. The best
    point satisfying sufficient decrease is returned. If none is found the
    smallest trial is returned when it does not raise the objective,
    otherwise a zero step; either way ``failed`` is set.
    """
    if not slope0 < 0.0:
        raise ValueError(f"direction is not a descent direction (slope {slope0:.3e})")
    if not np.isfinite(f0):
        raise ValueError("objective at the start point is not finite")
    direction = np.asarray(direction, dtype=np.float64)
    evals = 0
    tried = []  # (a, f, g)

    def probe(a):
        nonlocal evals
        evals += 1
        f, g = fun_grad(x + a * direction)
        s = float(g @ direction) if np.isfinite(f) else np.nan
        tried.append((a, f, g))
        return f, s

    def armijo(a, f):
        return np.isfinite(f) and f <= f0 + config.c1 * a * slope0

    a = float(step0 if step0 is not None else config.initial_step)
    best = None
    lo = (0.0, f0, slope0)
    hi = None
    f, s = probe(a)
    # expand while the function keeps dropping along the ray
    for _ in range(config.max_expansions):
        if not (armijo(a, f) and s < 0):
            break
        best = (a, f) if best is None or f < best[1] else best
        if abs(s) <= flat_tol * abs(slope0):
            break
        lo = (a, f, s)
        # secant extrapolation from the origin, kept within [2a, 8a]
        a_next = a * slope0 / (slope0 - s) if s > slope0 else 4.0 * a
        a = float(np.clip(a_next, 2.0 * a, 8.0 * a))
        f, s = probe(a)
    if armijo(a, f):
        best = (a, f) if best is None or f < best[1] else best
    if not (armijo(a, f) and s < 0 and abs(s) > flat_tol * abs(slope0)):
        hi = (a, f, s)

    # refine inside [lo, hi]
    if hi is not None and not (armijo(*hi[:2]) and abs(hi[2]) <= flat_tol * abs(slope0)):
        for _ in range(config.max_contractions):
            s_hi = hi[2] if np.isfinite(hi[2]) else np.inf
            f_hi = hi[1] if np.isfinite(hi[1]) else np.inf
            if np.isfinite(f_hi) and np.isfinite(s_hi):
                a = _interpolate(lo[0], lo[1], lo[2], hi[0], f_hi, s_hi,
                                 shrink=not armijo(hi[0], f_hi))
            else:
                a = lo[0] + 0.1 * (hi[0] - lo[0])
            f, s = probe(a)
            ok = armijo(a, f)
            if ok:
                best = (a, f) if best is None or f < best[1] else best
                if abs(s) <= flat_tol * abs(slope0):
                    break
            if ok and s < 0 and f <= lo[1]:
                lo = (a, f, s)
            else:
                hi = (a, f, s)
            if abs(hi[0] - lo[0]) <= 1e-12 * max(1.0, abs(hi[0])):
                break

    if best is not None:
        a_best = best[0]
        g = next(g for a_, f_, g in tried if a_ == a_best)
        return LineSearchResult(a_best, best[1], g, evals, False)
    a_min, f_min, g_min = min(tried, key=lambda t: t[0])
    if np.isfinite(f_min) and f_min <= f0:
        return LineSearchResult(a_min, f_min, g_min, evals, True)
    return LineSearchResult(0.0, f0, None, evals, True)


# -- CG loop --------------------------------------------------------------------

def minimize_cg(fun_grad, x0, config: TrainConfig = TrainConfig(), line_search_fn=None):
    """Minimise ``fun_grad``'s objective from ``x0``; returns (x, TrainReport).

    ``line_search_fn(fun_grad, x, d, f, slope, step0)`` may replace the
    default line search (used for exact searches on quadratics).
    """
    t_start = time.perf_counter()
    x = np.array(x0, dtype=np.float64, copy=True)
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise TrainingDivergence(0)
    period = config.period(x.size)
    state = CgState(0, x, g, None, None, 0.0, 0.0, float(f))
    losses = [float(f)]
    records = []
    restarts = failures = 0
    since_restart = 0
    force_restart = False
    reason = "max_iter"
    prev_slope = None

    while True:
        gnorm = float(np.linalg.norm(state.grad))
        if gnorm < config.grad_tol:
            reason = "grad_tol"
            break
        # the loss test targets non-negative objectives such as cross-entropy
        if 0.0 <= state.f < config.loss_tol:
            reason = "loss_tol"
            break
        if state.k >= config.max_iter:
            break

        restart = force_restart or state.direction is None or since_restart >= period
        if restart:
            beta, d = 0.0, -state.grad
        else:
            beta = pr_beta(state.grad, state.grad_prev, config.pr_clamp)
            d, restart = cg_direction(state.grad, state.direction, beta)
            if restart:
                beta = 0.0
        force_restart = False
        slope = float(d @ state.grad)

        # first trial: previous step scaled by the slope ratio, else a unit move
        if state.step > 0 and prev_slope is not None:
            step0 = state.step * prev_slope / slope
        else:
            step0 = config.initial_step / max(float(np.linalg.norm(d)), 1e-300)
        search = line_search_fn or (lambda fg, xx, dd, ff, ss, s0:
                                    line_search(fg, xx, dd, ff, ss, config, s0))
        ls = search(fun_grad, state.x, d, state.f, slope, step0)
        if ls.failed:
            failures += 1
        if ls.step == 0.0:
            if restart:
                reason = "line_search"
                break
            force_restart = True
            continue
        if not np.isfinite(ls.f):
            raise TrainingDivergence(state.k + 1)

        if restart:
            restarts += 1
            since_restart = 0
        since_restart += 1
        x_new = state.x + ls.step * d
        grad_new = ls.grad if ls.grad is not None else fun_grad(x_new)[1]
        state = CgState(state.k + 1, x_new, grad_new, state.grad, d, beta, ls.step, float(ls.f))
        prev_slope = slope
        losses.append(state.f)
        records.append((state.k, state.f, float(np.linalg.norm(grad_new)), beta, ls.step, restart))

    report = TrainReport(
        iterations=state.k, final_loss=state.f,
        grad_norm=float(np.linalg.norm(state.grad)),
        wall_time=time.perf_counter() - t_start, losses=losses, restarts=restarts,
        line_search_failures=failures, stop_reason=reason, records=records)
    return state.x, report


def train(net: CfnnNet, X, y, config: TrainConfig = TrainConfig(), theta0=None):
    """Train ``net`` on (X, y) from seeded Glorot initial weights; returns (theta, report)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    theta0 = net.init_params(config.seed) if theta0 is None else np.asarray(theta0, float)
    lam = config.weight_decay
    if lam == 0.0:
        return minimize_cg(lambda th: net.loss_grad(th, X, y), theta0, config)

    def objective(th):
        loss, grad = net.loss_grad(th, X, y)
        return loss + 0.5 * lam * float(th @ th), grad + lam * th

    return minimize_cg(objective, theta0, config)


# -- mask search ----------------------------------------------------------------

def validation_split(n_rows: int, fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle; the last ``fraction`` of the permutation is the validation part."""
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_val = max(1, int(round(fraction * n_rows)))
    if n_val >= n_rows:
        raise ValueError(f"too few rows ({n_rows}) for a validation split")
    return np.sort(perm[:-n_val]), np.sort(perm[-n_val:])


@dataclass(frozen=True)
class Candidate:
    blocks: tuple
    connections: int
    accuracy: float
    fpr: float
    feasible: bool = True
    note: str = ""

    def key(self):
        # higher accuracy, then lower FPR, fewer connections, then block order
        return (self.accuracy, -self.fpr, -self.connections,
                tuple(-b for b in self.blocks))


@dataclass
class MaskSearchResult:
    mask: np.ndarray
    blocks: tuple
    accuracy: float
    fpr: float
    candidates: list
    nodes_expanded: int
    pruned: int
    exhaustive: bool


def _fit_score(topology, blocks, X_tr, y_tr, X_val, y_val, config):
    net = CfnnNet(topology, blocks_mask(topology, blocks))
    theta, _ = train(net, X_tr, y_tr, config)
    pred = np.argmax(net.forward(theta, X_val), axis=1)
    c = confusion(y_val, pred)
    return c.accuracy, c.fpr


def make_evaluator(topology: CfnnTopology, X, y, config: TrainConfig = TrainConfig(),
                   val_fraction: float = 0.2):
    """Score a block set by training on the training part and scoring the validation part."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    tr, val = validation_split(len(y), val_fraction, config.seed)

    def evaluate(blocks):
        return _fit_score(topology, blocks, X[tr], y[tr], X[val], y[val], config)
    return evaluate


def search_mask(topology: CfnnTopology, evaluate, budget: int | None = None, *,
                exhaustive_limit: int = 12, margin: float = 0.0,
                max_evaluations: int | None = None) -> MaskSearchResult:
    """Choose the set of cascade blocks with the best validation score.

    ``evaluate(blocks) -> (accuracy, fpr)``. With at most
    ``exhaustive_limit`` blocks every feasible subset is scored. Otherwise a
    best-first branch-and-bound decides blocks in order; a node's bound is
    the score of its relaxation (every undecided block switched on) and the
    node is pruned when that bound plus ``margin`` falls below the incumbent.
    Masks whose connection count exceeds ``budget`` are infeasible.
    """
    n_blocks = topology.n_blocks
    sizes = [topology.block_size(b) for b in range(n_blocks)]
    budget = topology.max_connections if budget is None else int(budget)
    if budget < 0:
        raise ValueError("connection budget must be >= 0")
    cache: dict = {}
    log_entries: list = []

    def score(blocks) -> Candidate:
        blocks = tuple(sorted(blocks))
        if blocks not in cache:
            n_conn = sum(sizes[b] for b in blocks)
            if max_evaluations is not None and len(cache) >= max_evaluations:
                raise _Budget
            try:
                acc, fpr = evaluate(blocks)
                cand = Candidate(blocks, n_conn, float(acc), float(fpr), n_conn <= budget)
            except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
                log.warning("candidate %s failed: %s", blocks, exc)
                cand = Candidate(blocks, n_conn, -np.inf, np.inf, False, f"failed: {exc}")
            cache[blocks] = cand
            log_entries.append(cand)
        return cache[blocks]

    expanded = pruned = 0
    exhaustive = n_blocks <= exhaustive_limit
    try:
        if exhaustive:
            for r in range(n_blocks + 1):
                for blocks in itertools.combinations(range(n_blocks), r):
                    if sum(sizes[b] for b in blocks) <= budget:
                        score(blocks)
                        expanded += 1
        else:
            expanded, pruned = _branch_and_bound(n_blocks, sizes, budget, score, margin)
    except _Budget:
        log.warning("mask search stopped after %d evaluations", len(cache))

    feasible = [c for c in log_entries if c.feasible]
    if not feasible:
        feasible = [score(())]
    best = max(feasible, key=Candidate.key)
    return MaskSearchResult(
        mask=blocks_mask(topology, best.blocks), blocks=best.blocks, accuracy=best.accuracy,
        fpr=best.fpr, candidates=log_entries, nodes_expanded=expanded, pruned=pruned,
        exhaustive=exhaustive)


class _Budget(Exception):
    pass


def _branch_and_bound(n_blocks, sizes, budget, score, margin):
    expanded = pruned = 0
    incumbent = -np.inf
    counter = itertools.count()

    def relaxed(decisions):
        return [b for b, on in enumerate(decisions) if on] + list(range(len(decisions), n_blocks))

    def note(cand):
        nonlocal incumbent
        if cand.feasible:
            incumbent = max(incumbent, cand.accuracy)

    root = ()
    cand = score(relaxed(root))
    note(cand)
    heap = [(-cand.accuracy, next(counter), root)]
    while heap:
        neg_bound, _, decisions = heapq.heappop(heap)
        if -neg_bound + margin < incumbent:
            pruned += 1
            continue
        expanded += 1
        if len(decisions) == n_blocks:
            continue
        for on in (True, False):
            child = decisions + (on,)
            fixed = sum(sizes[b] for b, o in enumerate(child) if o)
            if fixed > budget:
                pruned += 1
                continue
            c = score(relaxed(child))
            note(c)
            if len(child) == n_blocks:
                continue
            if c.accuracy + margin < incumbent:
                pruned += 1
                continue
            heapq.heappush(heap, (-c.accuracy, next(counter), child))
    return expanded, pruned


# -- sweep ------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    connections: int
    accuracy: float
    fpr: float
    train_loss: float
    iterations: int


def sweep(topology: CfnnTopology, X, y, counts, config: TrainConfig = TrainConfig(),
          val_fraction: float = 0.2) -> list[SweepRow]:
    """Validation accuracy and FPR for masks of each connection count.

    Blocks are filled shallow to deep; each count trains from the same seed.
    """
    counts = [int(c) for c in counts]
    for c in counts:
        if c > topology.max_connections:
            raise ValueError(f"count {c} exceeds the maximum of {topology.max_connections}")
        count_mask(topology, c)  # validates block multiples up front
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    tr, val = validation_split(len(y), val_fraction, config.seed)
    rows = []
    for c in counts:
        net = CfnnNet(topology, count_mask(topology, c))
        theta, rep = train(net, X[tr], y[tr], config)
        pred = np.argmax(net.forward(theta, X[val]), axis=1)
        conf = confusion(y[val], pred)
        rows.append(SweepRow(c, conf.accuracy, conf.fpr, rep.final_loss, rep.iterations))
        log.info("sweep count=%d accuracy=%.4f fpr=%.4f", c, conf.accuracy, conf.fpr)
    return rows


def interior_maximum(rows) -> SweepRow | None:
    """The best row when it lies strictly between the first and last counts, else None."""
    if len(rows) < 3:
        return None
    best = max(range(len(rows)), key=lambda i: (rows[i].accuracy, -rows[i].fpr))
    return rows[best] if 0 < best < len(rows) - 1 else None


__all__ = ["TrainConfig", "TrainReport", "CgState", "TrainingDivergence", "pr_beta",
           "cg_direction", "line_search", "LineSearchResult", "minimize_cg", "train",
           "validation_split", "make_evaluator", "search_mask", "MaskSearchResult",
           "Candidate", "sweep", "SweepRow", "interior_maximum"]
