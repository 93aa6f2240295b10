"""``gridpulse`` command line: simulate, gen-data, train, eval, sweep, predict.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import collections
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cfnn import (CascadeFFNClassifier, CfnnModel, CfnnTopology, HeadDecision, blocks_mask,
                   load_model, predict_heads, save_model)
from .grid import FaultScenario, FaultType, GridError, PowerFlowError, ieee39
from .grid import load as load_grid
from .metrics import confusion
from .scenario_data import (Dataset, ScenarioConfig, WindowSpec, build_dataset, load_dataset,
                            save_dataset, spec_step, write_scenario_table)
from .trainer import TrainConfig, TrainingDivergence, interior_maximum, sweep
from .transim import SimulationError, TraceSet, read_traces, run_scenario, write_traces

log = logging.getLogger("gridpulse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# reference figures printed next to our results, never compared against
REFERENCE = {"accuracy": 0.978, "pair_accuracy": 0.975, "best_fpr": 0.019,
             "best_fpr_connections": 630}

TRAIN_FILE, TEST_FILE = "train.tsad", "test.tsad"
MODEL_FILES = {"stability": "stability.cfnn", "pair": "pair.cfnn"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ------------------------------------------------------------------

def _floats(v):
    return tuple(float(x) for x in _items(v))


def _ints(v):
    return tuple(int(x) for x in _items(v))


def _items(v):
    return [x for x in str(v).replace(",", " ").split() if x]


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if str(v).strip().lower() in ("", "none", "auto") else int(v)


@dataclass
class RunConfig:
    """Every setting a command reads; config-file keys use these field names."""

    grid: str | None = None
    out: str = "run"
    data_dir: str | None = None
    model_dir: str | None = None
    seed: int = 0
    # window
    fs: float = 500.0
    window_length: float = 0.5
    features: tuple = ("pe", "vt", "omega")
    # scenarios
    n_train: int = 300
    n_test: int = 150
    faults: tuple = ("3pg", "ll", "llg", "slg")
    duration_min: float = 0.06
    duration_max: float = 0.40
    load_min: float = 0.70
    load_max: float = 1.40
    onset: float = 2.0
    branches: tuple = ()
    horizon: float = 5.0
    dt: float = 1e-3
    # networks and training
    hidden: tuple = (3,) * 17
    activation: str = "tanh"
    connections: int = 630
    pair_connections: int = 0
    pair_blocks: tuple = (14, 15)  # overrides pair_connections when non-empty
    pair_restarts: int = 1
    max_iter: int = 300
    pair_max_iter: int = 500
    weight_decay: float = 0.0
    pair_weight_decay: float = 1e-2
    grad_tol: float = 1e-6
    loss_tol: float = 1e-8
    restart_period: int | None = None
    pr_clamp: bool = True
    # sweep and evaluation
    counts: tuple = tuple(range(90, 1441, 90))
    val_fraction: float = 0.2
    latency_passes: int = 1000

    PARSERS = {
        "seed": int, "fs": float, "window_length": float, "features": lambda v: tuple(_items(v)),
        "n_train": int, "n_test": int, "faults": lambda v: tuple(_items(v)),
        "duration_min": float, "duration_max": float, "load_min": float, "load_max": float,
        "onset": float, "branches": _ints, "horizon": float, "dt": float, "hidden": _ints,
        "activation": str, "connections": int, "pair_connections": int, "pair_blocks": _ints,
        "weight_decay": float, "pair_weight_decay": float,
        "pair_restarts": int, "max_iter": int, "pair_max_iter": int, "grad_tol": float,
        "loss_tol": float, "restart_period": _opt_int, "pr_clamp": _bool, "counts": _ints,
        "val_fraction": float, "latency_passes": int, "grid": str, "out": str,
        "data_dir": str, "model_dir": str,
    }

    def update(self, key: str, value) -> None:
        key = key.strip().replace("-", "_")
        if key not in self.PARSERS:
            raise UsageError(f"unknown config key {key!r}")
        try:
            setattr(self, key, self.PARSERS[key](value) if isinstance(value, str) else value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir or self.out)

    @property
    def model_path(self) -> Path:
        return Path(self.model_dir or self.out)

    def window(self, n_gen: int = 10) -> WindowSpec:
        return WindowSpec(self.fs, self.window_length, self.features, n_gen)

    def scenarios(self) -> ScenarioConfig:
        return ScenarioConfig(
            fault_types=self.faults, duration_range=(self.duration_min, self.duration_max),
            load_range=(self.load_min, self.load_max), onset=self.onset,
            branches=self.branches or None, n_train=self.n_train, n_test=self.n_test,
            seed=self.seed, horizon=self.horizon, dt=self.dt)

    def train_config(self, max_iter=None) -> TrainConfig:
        return TrainConfig(max_iter=self.max_iter if max_iter is None else max_iter,
                           grad_tol=self.grad_tol, loss_tol=self.loss_tol,
                           restart_period=self.restart_period, pr_clamp=self.pr_clamp,
                           weight_decay=self.weight_decay, seed=self.seed)

    def estimator(self, connections: int, max_iter: int, seed: int, weight_decay: float = 0.0,
                  mask=None) -> CascadeFFNClassifier:
        return CascadeFFNClassifier(
            n_channels=len(self.features) * 10, hidden=tuple(self.hidden),
            connections=connections, mask=mask, activation=self.activation,
            max_iter=max_iter, grad_tol=self.grad_tol, restart_period=self.restart_period,
            pr_clamp=self.pr_clamp, weight_decay=weight_decay, random_state=seed)

    def pair_mask(self, n_samples: int, n_classes: int):
        if not self.pair_blocks:
            return None
        top = CfnnTopology(len(self.features) * 10, n_samples, tuple(self.hidden), n_classes,
                           self.activation)
        try:
            return blocks_mask(top, self.pair_blocks)
        except (ValueError, IndexError) as exc:
            raise UsageError(f"bad pair_blocks {self.pair_blocks}: {exc}") from None


def read_config(path, cfg: RunConfig | None = None) -> RunConfig:
    """Apply a ``key = value`` file (``#`` starts a comment) on top of ``cfg``."""
    cfg = cfg or RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        cfg.update(key, value.strip())
    return cfg


def _grid(cfg: RunConfig):
    if not cfg.grid:
        return ieee39()
    try:
        return load_grid(cfg.grid)
    except OSError as exc:
        raise DataError(f"cannot read grid file {cfg.grid}: {exc}") from None


def _load(path: Path) -> Dataset:
    if not path.exists():
        raise DataError(f"dataset {path} not found; run gen-data first")
    return load_dataset(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    model = _grid(cfg)
    branch = args.branch if args.branch is not None else model.removable_branches()[0]
    sc = FaultScenario(FaultType.parse(args.fault), branch, args.location, cfg.onset,
                       args.duration, args.load_scale, cfg.seed)
    traces = run_scenario(model, sc, horizon=cfg.horizon, dt=cfg.dt)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_traces(traces, out / (args.name or "trace.csv"))
    verdict = "stable" if traces.stable else (
        f"unstable pair={traces.critical_pair} at t={traces.crossing_time:.3f} s")
    print(f"{path}: {verdict}")
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig, args) -> int:
    model = _grid(cfg)
    spec = cfg.window(model.n_gen)
    scen = cfg.scenarios()

    def progress(stream, i, n):
        if (i + 1) % 50 == 0 or i + 1 == n:
            log.info("%s: %d/%d scenarios", stream, i + 1, n)

    train, test = build_dataset(model, scen, spec, progress)
    out = cfg.data_path
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / TRAIN_FILE)
    save_dataset(test, out / TEST_FILE)
    write_scenario_table(train, out / "scenarios_train.csv")
    write_scenario_table(test, out / "scenarios_test.csv")
    _write_json(out / "provenance.json", {
        "grid": model.name, "scenario_config": scen.to_dict(), "window": spec.to_dict(),
        "config_hash": scen.digest(), "train_digest": train.digest(),
        "test_digest": test.digest(), "train_unstable": int(train.unstable.sum()),
        "test_unstable": int(test.unstable.sum())})
    print(f"train {train.n_rows} rows ({int(train.unstable.sum())} unstable), "
          f"test {test.n_rows} rows ({int(test.unstable.sum())} unstable) -> {out}")
    return EXIT_OK


def fit_pair_head(cfg: RunConfig, X, y):
    """Best of ``pair_restarts`` seeded runs by final training loss."""
    n_channels = len(cfg.features) * 10
    mask = cfg.pair_mask(X.shape[1] // n_channels, len(np.unique(y)))
    best = None
    for r in range(max(1, cfg.pair_restarts)):
        est = cfg.estimator(cfg.pair_connections, cfg.pair_max_iter, cfg.seed + r,
                            cfg.pair_weight_decay, mask).fit(X, y)
        log.info("pair head start %d: loss %.6f", r, est.report_.final_loss)
        if best is None or est.report_.final_loss < best.report_.final_loss:
            best = est
    return best


def cmd_train(cfg: RunConfig, args) -> int:
    train = _load(cfg.data_path / TRAIN_FILE)
    heads = ("stability", "pair") if args.head == "both" else (args.head,)
    out = cfg.model_path
    out.mkdir(parents=True, exist_ok=True)
    norm = train.normalizer
    for head in heads:
        if head == "stability":
            if len(np.unique(train.unstable)) < 2:
                raise DataError("training set has a single stability class")
            est = cfg.estimator(cfg.connections, cfg.max_iter, cfg.seed,
                                cfg.weight_decay).fit(
                train.X, train.unstable)
        else:
            rows = train.unstable_rows()
            if rows.size == 0:
                log.warning("no unstable training rows; pair head skipped")
                continue
            est = fit_pair_head(cfg, train.X[rows], train.pair[rows])
        save_model(CfnnModel(head, est, train.spec, norm), out / MODEL_FILES[head])
        (out / f"{head}.log").write_text("\n".join(est.report_.log_lines()) + "\n")
        r = est.report_
        print(f"{head}: {r.iterations} iterations, loss {r.final_loss:.6g}, "
              f"stop={r.stop_reason} -> {out / MODEL_FILES[head]}")
    return EXIT_OK


@dataclass
class EvalReport:
    confusion: list
    accuracy: float
    fpr: float
    pair_accuracy: float | None
    pair_rows: int
    latency_median_ms: float | None = None
    latency_p99_ms: float | None = None
    dataset: str = ""
    reference: dict = field(default_factory=lambda: dict(REFERENCE))

    def metrics(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("latency_median_ms")
        d.pop("latency_p99_ms")
        return d


def evaluate(stability: CfnnModel, pair: CfnnModel | None, test: Dataset,
             latency_passes: int = 1000) -> EvalReport:
    for m in (stability, pair):
        if m is not None and m.spec != test.spec:
            raise DataError(f"model window {m.spec} does not match dataset window {test.spec}")
    pred = stability.estimator.predict(test.X)
    conf = confusion(test.unstable, pred)
    pair_acc, rows = None, test.unstable_rows()
    if pair is not None and rows.size:
        pair_acc = float(np.mean(pair.estimator.predict(test.X[rows]) == test.pair[rows]))
    report = EvalReport(conf.as_matrix().tolist(), conf.accuracy, conf.fpr, pair_acc,
                        int(rows.size), dataset=test.digest())
    if latency_passes:
        report.latency_median_ms, report.latency_p99_ms = measure_latency(
            stability, pair, test.X, latency_passes)
    return report


def measure_latency(stability, pair, X, passes=1000):
    """Median and 99th percentile wall time (ms) of one dual-head decision."""
    times = np.empty(passes)
    with threadpool_limits(1):
        for k in range(passes):
            row = X[k % len(X)]
            t0 = time.perf_counter()
            predict_heads(stability, pair, row, normalized=True)
            times[k] = time.perf_counter() - t0
    return float(np.median(times) * 1e3), float(np.percentile(times, 99) * 1e3)


def _models(cfg: RunConfig, need_pair=False):
    paths = {h: cfg.model_path / f for h, f in MODEL_FILES.items()}
    if not paths["stability"].exists():
        raise DataError(f"model {paths['stability']} not found; run train first")
    stab = load_model(paths["stability"])
    pair = load_model(paths["pair"]) if paths["pair"].exists() else None
    if need_pair and pair is None:
        log.warning("no pair model; pair decisions unavailable")
    return stab, pair


def cmd_eval(cfg: RunConfig, args) -> int:
    stab, pair = _models(cfg)
    test = _load(cfg.data_path / TEST_FILE)
    rep = evaluate(stab, pair, test, cfg.latency_passes)
    out = cfg.model_path
    _write_json(out / "eval.json", rep.metrics())
    _write_json(out / "latency.json", {"median_ms": rep.latency_median_ms,
                                       "p99_ms": rep.latency_p99_ms,
                                       "passes": cfg.latency_passes})
    (tn, fp), (fn, tp) = rep.confusion
    print(f"confusion (positive = unstable): TP={tp} TN={tn} FP={fp} FN={fn}")
    print(f"accuracy {rep.accuracy:.4f}  (reference {REFERENCE['accuracy']:.3f})")
    print(f"FPR      {rep.fpr:.4f}  (reference best {REFERENCE['best_fpr']} at "
          f"{REFERENCE['best_fpr_connections']} connections)")
    if rep.pair_accuracy is not None:
        print(f"pair accuracy {rep.pair_accuracy:.4f} on {rep.pair_rows} unstable rows "
              f"(reference {REFERENCE['pair_accuracy']:.3f})")
    if rep.latency_median_ms is not None:
        print(f"latency median {rep.latency_median_ms:.4f} ms, "
              f"p99 {rep.latency_p99_ms:.4f} ms over {cfg.latency_passes} passes")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    train = _load(cfg.data_path / TRAIN_FILE)
    est = cfg.estimator(0, cfg.max_iter, cfg.seed)
    top = est._topology(train.X.shape[1], 2)
    bad = [c for c in cfg.counts if c > top.max_connections or c < 0]
    if bad:
        raise UsageError(f"counts {bad} outside [0, {top.max_connections}]")
    rows = sweep(top, train.X, train.unstable, cfg.counts, cfg.train_config(),
                 cfg.val_fraction)
    out = cfg.model_path
    out.mkdir(parents=True, exist_ok=True)
    lines = ["connections,accuracy,fpr,train_loss,iterations"]
    lines += [f"{r.connections},{float(r.accuracy)!r},{float(r.fpr)!r},{float(r.train_loss)!r},"
              f"{r.iterations}"
              for r in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    peak = interior_maximum(rows)
    if peak is None:
        print("no interior maximum: the best count is at an end of the grid")
    else:
        print(f"interior maximum at {peak.connections} connections "
              f"(accuracy {peak.accuracy:.4f}, FPR {peak.fpr:.4f}); "
              f"reference optimum {REFERENCE['best_fpr_connections']}")
    return EXIT_OK


class LatchedWindow:
    """Ring buffer of raw samples that freezes into one input vector on demand.

    Samples arrive at the acquisition step ``dt``; the buffer keeps just
    enough of them to decimate ``n_samples`` values at ``fs`` ending at the
    newest sample.
    """

    def __init__(self, spec: WindowSpec, dt: float):
        self.spec = spec
        ratio = 1.0 / (spec.fs * dt)
        self.step = int(round(ratio))
        if self.step < 1 or abs(ratio - self.step) > 1e-6:
            raise ValueError(f"acquisition step {dt} does not divide 1/{spec.fs} s")
        self.buffer = collections.deque(maxlen=self.step * (spec.n_samples - 1) + 1)

    def push(self, sample) -> None:
        sample = np.asarray(sample, dtype=np.float64)
        if sample.shape != (self.spec.n_channels,):
            raise ValueError(f"sample has {sample.size} channels, expected "
                             f"{self.spec.n_channels}")
        self.buffer.append(sample)

    @property
    def ready(self) -> bool:
        return len(self.buffer) == self.buffer.maxlen

    def freeze(self) -> np.ndarray:
        if not self.ready:
            raise ValueError(f"insufficient history: {len(self.buffer)} samples buffered, "
                             f"window needs {self.buffer.maxlen}")
        frame = np.stack(self.buffer)[::self.step]  # (n_samples, channels)
        return frame.T.reshape(-1)


def latch_from_traces(traces: TraceSet, spec: WindowSpec, clear_time: float) -> np.ndarray:
    """Stream ``traces`` through a latched window and freeze it at ``clear_time``."""
    if traces.n_gen != spec.n_gen:
        raise ValueError(f"trace has {traces.n_gen} generators, model expects {spec.n_gen}")
    spec_step(traces, spec)
    end = traces.index_of(clear_time)
    latch = LatchedWindow(spec, traces.dt)
    signals = [np.asarray(traces.signal(f)) for f in spec.features]
    for k in range(end + 1):
        latch.push(np.concatenate([s[k] for s in signals]))
    return latch.freeze()


def cmd_predict(cfg: RunConfig, args) -> int:
    if not args.trace:
        raise UsageError("predict needs --trace")
    stab, pair = _models(cfg, need_pair=True)
    try:
        traces = read_traces(args.trace)
    except OSError as exc:
        raise DataError(f"cannot read trace {args.trace}: {exc}") from None
    clear = args.clear_time if args.clear_time is not None else traces.t_clear
    if not np.isfinite(clear):
        raise UsageError("clear time unknown; pass --clear-time")
    try:
        window = latch_from_traces(traces, stab.spec, clear)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    with threadpool_limits(1):
        t0 = time.perf_counter()
        decision: HeadDecision = predict_heads(stab, pair, window)
        elapsed = time.perf_counter() - t0
    record = {"clear_time": clear, "decision_time": clear + elapsed,
              "label": decision.label,
              "pair": None if decision.pair is None else list(decision.pair),
              "p_stability": decision.p_stability.tolist(),
              "p_pair": None if decision.p_pair is None else decision.p_pair.tolist(),
              "inference_ms": round(elapsed * 1e3, 3)}
    print(json.dumps(record))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "gen-data": cmd_gen_data, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "predict": cmd_predict}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridpulse", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--grid", help="grid file (default: bundled IEEE 39-bus)")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--faults", help="comma-separated fault types: 3pg,ll,llg,slg")
    p.add_argument("--head", choices=("stability", "pair", "both"), default="both")
    p.add_argument("--counts", help="comma-separated cascade connection counts")
    p.add_argument("--trace", help="trace CSV for predict")
    p.add_argument("--clear-time", type=float, help="clearance instant for predict (s)")
    p.add_argument("--fault", default="3pg", help="simulate: fault type")
    p.add_argument("--branch", type=int, help="simulate: faulted branch id")
    p.add_argument("--location", type=float, default=0.5, help="simulate: fraction along branch")
    p.add_argument("--duration", type=float, default=0.1, help="simulate: fault duration (s)")
    p.add_argument("--load-scale", type=float, default=1.0)
    p.add_argument("--name", help="simulate: trace file name")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = read_config(args.config) if args.config else RunConfig()
        for key in ("grid", "seed", "out", "faults", "counts"):
            value = getattr(args, key)
            if value is not None:
                cfg.update(key, str(value))
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"gridpulse: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PowerFlowError, SimulationError, TrainingDivergence, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"gridpulse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GridError, ValueError, OSError, RuntimeError) as exc:
        print(f"gridpulse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
