"""Randomised fault scenarios, latched measurement windows, normalisation and dataset files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import FaultScenario, FaultType, GridError, GridModel, PowerFlowError
from .transim import (POST_FAULT_HORIZON, STEP, SimulationError, TraceSet, pair_to_class,
                      run_scenario)

log = logging.getLogger(__name__)

DATA_TAG = b"tsadata-v1"
NO_PAIR = 255
STD_FLOOR = 1e-9
FEATURES = ("pe", "vt", "omega", "delta")
DEFAULT_FEATURES = ("pe", "vt", "omega")
STREAMS = {"train": 0, "test": 1}
MAX_REDRAWS = 50


@dataclass(frozen=True)
class ScenarioConfig:
    fault_types: tuple = tuple(FaultType)
    duration_range: tuple = (0.060, 0.400)
    load_range: tuple = (0.70, 1.40)
    onset: float = 2.0
    branches: tuple | None = None
    location_range: tuple = (0.0, 1.0)
    n_train: int = 300
    n_test: int = 150
    seed: int = 0
    horizon: float = POST_FAULT_HORIZON
    dt: float = STEP

    def __post_init__(self):
        object.__setattr__(self, "fault_types",
                           tuple(FaultType.parse(f) for f in self.fault_types))
        lo, hi = self.duration_range
        if not 0 < lo <= hi < self.horizon:
            raise ValueError(f"duration range {self.duration_range} must lie in (0, horizon)")
        if not 0 < self.load_range[0] <= self.load_range[1]:
            raise ValueError(f"load range {self.load_range} must be positive")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("scenario counts must be positive")
        if not self.fault_types:
            raise ValueError("at least one fault type is required")

    def candidate_branches(self, model: GridModel) -> tuple:
        return tuple(self.branches) if self.branches else tuple(model.removable_branches())

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fault_types"] = [f.value for f in self.fault_types]
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sample_count(fs: float, length: float) -> int:
    """Samples in a window of ``length`` seconds at ``fs`` samples per second."""
    if fs <= 0 or length <= 0:
        raise ValueError("sampling frequency and window length must be positive")
    n = fs * length
    k = round(n)
    if abs(n - k) > 1e-9 * max(1.0, abs(n)):
        raise ValueError(f"F_s * LTW = {n} is not an integer sample count")
    return int(k)


@dataclass(frozen=True)
class WindowSpec:
    """Sampling rate, window length and channel layout of one input vector.

    Channel ``c = feature_index * n_gen + generator`` carries ``n_samples``
    consecutive samples ending at the clearance instant.
    """

    fs: float = 500.0
    length: float = 0.5
    features: tuple = DEFAULT_FEATURES
    n_gen: int = 10

    def __post_init__(self):
        object.__setattr__(self, "fs", float(self.fs))
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "n_gen", int(self.n_gen))
        object.__setattr__(self, "features", tuple(self.features))
        unknown = set(self.features) - set(FEATURES)
        if unknown:
            raise ValueError(f"unknown features {sorted(unknown)}; choose from {FEATURES}")
        sample_count(self.fs, self.length)

    @property
    def n_samples(self) -> int:
        return sample_count(self.fs, self.length)

    @property
    def n_channels(self) -> int:
        return len(self.features) * self.n_gen

    @property
    def width(self) -> int:
        return self.n_channels * self.n_samples

    def channel(self, feature: str, gen: int) -> int:
        return self.features.index(feature) * self.n_gen + gen

    def to_dict(self) -> dict:
        return {"fs": self.fs, "length": self.length, "features": list(self.features),
                "n_gen": self.n_gen}

    @classmethod
    def from_dict(cls, d) -> "WindowSpec":
        return cls(float(d["fs"]), float(d["length"]), tuple(d["features"]), int(d["n_gen"]))


def _rng(seed: int, stream: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index, attempt]))


def draw_scenario(config: ScenarioConfig, index: int, model: GridModel | None = None,
                  stream: str = "train", attempt: int = 0) -> FaultScenario:
    """Scenario ``index`` of ``stream``; a pure function of (seed, stream, index, attempt).

    Durations are rounded to the integration step so onset and clearance
    fall on simulation samples.
    """
    total = config.n_train if stream == "train" else config.n_test
    if not 0 <= index < total:
        raise IndexError(f"scenario index {index} outside [0, {total})")
    if config.branches:
        branches = tuple(config.branches)
    elif model is not None:
        branches = config.candidate_branches(model)
    else:
        raise ValueError("need a model or an explicit branch set")
    rng = _rng(config.seed, STREAMS[stream], index, attempt)
    fault = config.fault_types[int(rng.integers(len(config.fault_types)))]
    branch = branches[int(rng.integers(len(branches)))]
    location = float(rng.uniform(*config.location_range))
    dur = float(rng.uniform(*config.duration_range))
    steps = min(max(round(dur / config.dt), math.ceil(config.duration_range[0] / config.dt - 1e-9)),
                math.floor(config.duration_range[1] / config.dt + 1e-9))
    load = float(rng.uniform(*config.load_range))
    sub_seed = int(rng.integers(2**63 - 1))
    return FaultScenario(fault, int(branch), location, config.onset, steps * config.dt,
                         load, sub_seed)


def extract_window(traces: TraceSet, spec: WindowSpec, clear_time: float) -> np.ndarray:
    """Raw input vector whose last sample per channel is the clearance sample."""
    dec = spec_step(traces, spec)
    end = traces.index_of(clear_time)
    start = end - dec * (spec.n_samples - 1)
    if start < 0:
        have = end * traces.dt
        need = (spec.n_samples - 1) / spec.fs
        raise ValueError(f"insufficient history: {have:.4f} s available before "
                         f"t={clear_time}, window needs {need:.4f} s")
    if traces.n_gen != spec.n_gen:
        raise ValueError(f"trace has {traces.n_gen} generators, window expects {spec.n_gen}")
    idx = np.arange(start, end + 1, dec)
    blocks = [np.asarray(traces.signal(f))[idx].T for f in spec.features]
    return np.concatenate(blocks, axis=0).reshape(-1)


def spec_step(traces: TraceSet, spec: WindowSpec) -> int:
    ratio = 1.0 / (spec.fs * traces.dt)
    dec = int(round(ratio))
    if dec < 1 or abs(ratio - dec) > 1e-6:
        raise ValueError(f"trace step {traces.dt} s does not divide the sampling "
                         f"interval {1 / spec.fs} s")
    return dec


class WindowNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel z-score over all samples of a channel in the fitted rows.

    Parameters
    ----------
    n_channels : int
        Number of equal-width channels each row is split into.
    std_floor : float
        Lower clamp on the standard deviation; clamped channels are listed in
        ``clamped_channels_`` after fitting.
    """

    def __init__(self, n_channels=30, std_floor=STD_FLOOR):
        self.n_channels = n_channels
        self.std_floor = std_floor

    def _split(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] % self.n_channels:
            raise ValueError(f"row width {X.shape[1]} is not a multiple of "
                             f"{self.n_channels} channels")
        return X.reshape(X.shape[0], self.n_channels, -1)

    def fit(self, X, y=None):
        blocks = self._split(X)
        if blocks.shape[0] < 2:
            raise ValueError("need at least two rows to fit a normaliser")
        self.mean_ = blocks.mean(axis=(0, 2))
        std = blocks.std(axis=(0, 2))
        self.clamped_channels_ = np.flatnonzero(std < self.std_floor)
        if self.clamped_channels_.size:
            log.warning("zero-variance channels clamped to std %g: %s",
                        self.std_floor, self.clamped_channels_.tolist())
        self.scale_ = np.maximum(std, self.std_floor)
        self.n_features_in_ = blocks.shape[1] * blocks.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        blocks = self._split(X)
        out = (blocks - self.mean_[None, :, None]) / self.scale_[None, :, None]
        return out.reshape(blocks.shape[0], -1)

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        blocks = self._split(X)
        return (blocks * self.scale_[None, :, None] + self.mean_[None, :, None]).reshape(
            blocks.shape[0], -1)

    @classmethod
    def from_stats(cls, mean, scale, std_floor=STD_FLOOR) -> "WindowNormalizer":
        norm = cls(n_channels=len(mean), std_floor=std_floor)
        norm.mean_ = np.asarray(mean, dtype=np.float64)
        norm.scale_ = np.asarray(scale, dtype=np.float64)
        norm.clamped_channels_ = np.flatnonzero(norm.scale_ <= std_floor)
        return norm


def fit_normalizer(rows, n_channels: int) -> WindowNormalizer:
    return WindowNormalizer(n_channels).fit(rows)


def apply_normalizer(norm: WindowNormalizer, rows) -> np.ndarray:
    single = np.ndim(rows) == 1
    out = norm.transform(np.atleast_2d(rows))
    return out[0] if single else out


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    """Normalised windows with stability (1 = unstable) and pair-class labels."""

    X: np.ndarray
    unstable: np.ndarray
    pair: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    spec: WindowSpec
    provenance: dict = field(default_factory=dict)
    scenarios: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype="<f8")
        self.unstable = np.asarray(self.unstable, dtype=np.uint8)
        self.pair = np.asarray(self.pair, dtype=np.uint8)
        if self.X.shape[1] != self.spec.width:
            raise ValueError(f"matrix width {self.X.shape[1]} != {self.spec.width}")
        bad = (self.unstable == 1) & (self.pair == NO_PAIR)
        if bad.any():
            raise ValueError(f"unstable rows without pair label: {np.flatnonzero(bad)[:10]}")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def normalizer(self) -> WindowNormalizer:
        return WindowNormalizer.from_stats(self.mean, self.scale)

    def unstable_rows(self) -> np.ndarray:
        return np.flatnonzero(self.unstable == 1)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.X.tobytes())
        h.update(self.unstable.tobytes())
        h.update(self.pair.tobytes())
        return h.hexdigest()[:16]


def save_dataset(ds: Dataset, path) -> Path:
    """Write the ``tsadata-v1`` binary layout (see README, "Dataset files")."""
    path = Path(path)
    meta = dict(ds.provenance)
    meta.update(rows=ds.n_rows, width=ds.spec.width, channels=ds.spec.n_channels,
                samples=ds.spec.n_samples, spec=ds.spec.to_dict())
    with open(path, "wb") as fh:
        fh.write(DATA_TAG + b"\n")
        fh.write(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fh.write(ds.X.astype("<f8").tobytes())
        fh.write(ds.unstable.astype(np.uint8).tobytes())
        fh.write(ds.pair.astype(np.uint8).tobytes())
        fh.write(np.asarray(ds.mean, "<f8").tobytes())
        fh.write(np.asarray(ds.scale, "<f8").tobytes())
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        tag = fh.readline().rstrip(b"\n")
        if tag != DATA_TAG:
            raise ValueError(f"{path}: not a {DATA_TAG.decode()} file")
        return json.loads(fh.readline())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    first = raw.index(b"\n")
    if raw[:first] != DATA_TAG:
        raise ValueError(f"{path}: not a {DATA_TAG.decode()} file")
    second = raw.index(b"\n", first + 1)
    meta = json.loads(raw[first + 1:second])
    rows, width, ch = meta.pop("rows"), meta.pop("width"), meta.pop("channels")
    meta.pop("samples")
    spec = WindowSpec.from_dict(meta.pop("spec"))
    off = second + 1
    expected = off + rows * width * 8 + 2 * rows + 2 * ch * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} != expected {expected}")

    def take(n, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off)
        off += n * np.dtype(dtype).itemsize
        return arr.copy()

    X = take(rows * width, "<f8").reshape(rows, width)
    unstable, pair = take(rows, np.uint8), take(rows, np.uint8)
    mean, scale = take(ch, "<f8"), take(ch, "<f8")
    return Dataset(X, unstable, pair, mean, scale, spec, meta)


def simulate_rows(model: GridModel, config: ScenarioConfig, spec: WindowSpec, stream: str,
                  progress=None):
    """Raw windows, labels and scenario records for every scenario of ``stream``.

    A scenario that fails (power flow, islanding, numerical blow-up) is
    redrawn with the next attempt number; the count is returned.
    """
    n = config.n_train if stream == "train" else config.n_test
    rows = np.empty((n, spec.width))
    unstable = np.zeros(n, np.uint8)
    pair = np.full(n, NO_PAIR, np.uint8)
    records, redraws = [], 0
    branches = config.candidate_branches(model)
    cfg = dataclasses.replace(config, branches=branches)
    for i in range(n):
        for attempt in range(MAX_REDRAWS):
            sc = draw_scenario(cfg, i, stream=stream, attempt=attempt)
            try:
                tr = run_scenario(model, sc, horizon=config.horizon, dt=config.dt)
                rows[i] = extract_window(tr, spec, tr.t_clear)
            except (PowerFlowError, GridError, SimulationError) as exc:
                log.warning("%s scenario %d attempt %d failed: %s", stream, i, attempt, exc)
                redraws += 1
                continue
            break
        else:
            raise RuntimeError(f"{stream} scenario {i}: no feasible draw in {MAX_REDRAWS} attempts")
        if not tr.stable:
            unstable[i] = 1
            pair[i] = pair_to_class(tr.critical_pair, model.n_gen)
        records.append({"index": i, "attempt": attempt, "scenario": sc,
                        "stable": tr.stable, "critical_pair": tr.critical_pair,
                        "crossing_time": tr.crossing_time})
        if progress:
            progress(stream, i, n)
    return rows, unstable, pair, records, redraws


def build_dataset(model: GridModel, config: ScenarioConfig = ScenarioConfig(),
                  spec: WindowSpec = WindowSpec(), progress=None):
    """Simulate, label and window every scenario; returns ``(train, test)``.

    The normaliser is fitted on the training rows and applied to both sets.
    """
    if spec.n_gen != model.n_gen:
        spec = dataclasses.replace(spec, n_gen=model.n_gen)
    out = {}
    for stream in ("train", "test"):
        out[stream] = simulate_rows(model, config, spec, stream, progress)
    norm = WindowNormalizer(spec.n_channels).fit(out["train"][0])
    result = []
    for stream in ("train", "test"):
        raw, unstable, pair, records, redraws = out[stream]
        prov = {"split": stream, "seed": config.seed, "config_hash": config.digest(),
                "redraws": redraws, "grid": model.name,
                "clamped_channels": norm.clamped_channels_.tolist()}
        result.append(Dataset(norm.transform(raw), unstable, pair, norm.mean_, norm.scale_,
                              spec, prov, records))
    return tuple(result)


def write_scenario_table(ds: Dataset, path) -> Path:
    """Provenance CSV: one line per row with the drawn scenario and its label."""
    lines = ["index,attempt,fault_type,branch,location,onset,duration,load_scale,seed,"
             "stable,critical_pair,crossing_time"]
    for r in ds.scenarios:
        sc = r["scenario"]
        cp = "" if r["critical_pair"] is None else f"{r['critical_pair'][0]}-{r['critical_pair'][1]}"
        ct = "" if r["crossing_time"] is None else repr(float(r["crossing_time"]))
        num = [repr(float(v)) for v in (sc.location, sc.onset, sc.duration, sc.load_scale)]
        lines.append(f"{r['index']},{r['attempt']},{sc.fault_type.value},{sc.branch},"
                     f"{','.join(num)},"
                     f"{sc.seed},{int(r['stable'])},{cp},{ct}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def compare_feature_sets(model: GridModel, config: ScenarioConfig, candidate_sets,
                         estimator, base_spec: WindowSpec = WindowSpec(), cv: int = 3):
    """Cross-validated stability accuracy of ``estimator`` per candidate feature set.

    Windows for the union of all candidate features are simulated once from
    the training stream, then each candidate's channels are sliced out and
    scored with ``sklearn.model_selection.cross_val_score``.
    """
    from sklearn.base import clone
    from sklearn.model_selection import cross_val_score
    from sklearn.pipeline import make_pipeline

    union = tuple(f for f in FEATURES if any(f in c for c in candidate_sets))
    spec = dataclasses.replace(base_spec, features=union, n_gen=model.n_gen)
    raw, unstable, *_ = simulate_rows(model, config, spec, "train")
    blocks = raw.reshape(raw.shape[0], len(union), -1)
    scores = {}
    for cand in candidate_sets:
        cand = tuple(cand)
        X = blocks[:, [union.index(f) for f in cand], :].reshape(raw.shape[0], -1)
        pipe = make_pipeline(WindowNormalizer(len(cand) * model.n_gen), clone(estimator))
        scores[cand] = float(np.mean(cross_val_score(pipe, X, unstable, cv=cv)))
    return scores
