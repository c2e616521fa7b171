"""Training and evaluation of forecasters over interaction-strength grids.

Windows slide over the continuous grid with a configurable stride. Each
example asks for the next five continuous samples, the type of the first event
after the window and the time until it. Training minimizes a per-task loss
sum weighted by dynamic weight averaging; the ``corr`` fusion method
additionally subtracts ``lam`` times the cross-modal correlation.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gradcore as G
from .core import Dataset, MttsRecord
from .fusion import (
    HORIZON,
    Batch,
    FusionModel,
    FusionSpec,
    InputWindow,
    ModelConfig,
    Normalizer,
    build_model,
    corr_penalty,
    encode_batch,
    take_batch,
)
from .synthgen import ConfigError

log = logging.getLogger(__name__)

TASKS = ("cont", "dt", "event")
METRICS = ("rmse_cont", "rmse_dt", "f1_event")


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step} (epoch {epoch}){': ' + detail if detail else ''}")
        self.step = step
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    cont_window_len: int = 20
    event_window_len: int = 8
    stride: int = 1
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    dwa_temperature: float = 2.0
    grad_clip: float = 5.0

    def __post_init__(self):
        problems = []
        if self.cont_window_len < 5:
            problems.append("cont_window_len must be >= 5")
        if self.event_window_len < 1:
            problems.append("event_window_len must be >= 1")
        if self.stride < 1:
            problems.append("stride must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            problems.append("optimizer must be 'adam' or 'sgd'")
        if not self.dwa_temperature > 0:
            problems.append("dwa_temperature must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True, eq=False)
class Target:
    cont_next: np.ndarray
    event_type: int
    dt_next: float


@dataclass(frozen=True)
class MetricsReport:
    rmse_cont: float
    rmse_dt: float
    f1_event: float
    n_examples: int


def make_examples(record: MttsRecord, cfg: TrainConfig) -> list[tuple[InputWindow, Target]]:
    """Sliding windows over ``record`` with their forecasting targets.

    A window ending at sample ``e`` needs five later samples and at least
    one event strictly after ``t_e``; windows without a future event are
    dropped. The event part holds the last ``event_window_len`` events at or
    before ``t_e``; each event's gap is measured to the previous event of the
    record (0 for the first one).
    """
    values = record.cont.array
    times = record.cont.times
    ev_t = record.events.times
    ev_k = record.events.types
    gaps = np.diff(ev_t, prepend=ev_t[0]) if len(ev_t) else ev_t
    L = cfg.cont_window_len
    out = []
    for e in range(L - 1, len(values) - HORIZON, cfg.stride):
        t_end = float(times[e])
        j = int(np.searchsorted(ev_t, t_end, side="right"))
        if j >= len(ev_t):
            continue
        lo = max(0, j - cfg.event_window_len)
        window = InputWindow(
            cont_times=times[e - L + 1 : e + 1],
            cont_values=values[e - L + 1 : e + 1],
            ev_times=ev_t[lo:j],
            ev_types=ev_k[lo:j],
            ev_dts=gaps[lo:j],
            window_end=t_end,
        )
        target = Target(values[e + 1 : e + 1 + HORIZON], int(ev_k[j]), float(ev_t[j] - t_end))
        out.append((window, target))
    return out


def examples_for(records: Iterable[MttsRecord], cfg: TrainConfig):
    out = []
    for rec in records:
        out.extend(make_examples(rec, cfg))
    return out


def _std(x: np.ndarray) -> float:
    s = float(np.std(x)) if len(x) else 0.0
    return s if s > 0 else 1.0


def fit_normalizer(records: Sequence[MttsRecord], examples) -> Normalizer:
    cont = np.concatenate([r.cont.array for r in records])
    gaps = np.concatenate([np.diff(r.events.times) for r in records])
    dts = np.array([t.dt_next for _, t in examples])
    return Normalizer(
        cont_mean=float(cont.mean()),
        cont_std=_std(cont),
        gap_mean=float(gaps.mean()) if len(gaps) else 0.0,
        gap_std=_std(gaps),
        dt_mean=float(dts.mean()) if len(dts) else 0.0,
        dt_std=_std(dts),
    )


def dwa_weights(loss_history: Sequence[Sequence[float]], k_tasks: int = 3,
                temperature: float = 2.0) -> np.ndarray:
    """Dynamic weight averaging from the per-task losses of past epochs.

    ``w_k = L_k(t-1) / L_k(t-2)`` and the weights are ``k_tasks *
    softmax(w / temperature)``. Until two epochs exist all weights are 1;
    a zero denominator gives a ratio of 1.
    """
    if k_tasks < 1:
        raise ValueError("need at least one task")
    if len(loss_history) < 2:
        return np.ones(k_tasks)
    last = np.asarray(loss_history[-1], dtype=np.float64)
    prev = np.asarray(loss_history[-2], dtype=np.float64)
    if last.shape != (k_tasks,) or prev.shape != (k_tasks,):
        raise ValueError(f"expected {k_tasks} task losses per epoch")
    safe = np.where(prev == 0, 1.0, prev)
    ratio = np.where(prev == 0, 1.0, last / safe)
    z = ratio / temperature
    # floor keeps every weight representable (> 0) at extreme loss ratios
    e = np.exp(np.maximum(z - z.max(), -700.0))
    return k_tasks * e / e.sum()


@dataclass
class EpochLog:
    epoch: int
    weights: list[float]
    tasks: list[float]
    total: float
    corr: float | None = None


@dataclass
class EncodedSet:
    batch: Batch
    cont: np.ndarray  # standardized (n, 5)
    dt: np.ndarray  # standardized (n,)
    types: np.ndarray  # (n,)

    @property
    def size(self) -> int:
        return len(self.types)


def encode_examples(examples, norm: Normalizer, k: int) -> EncodedSet:
    batch = encode_batch([w for w, _ in examples], norm, k)
    cont = np.stack([t.cont_next for _, t in examples])
    dt = np.array([t.dt_next for _, t in examples])
    types = np.array([t.event_type for _, t in examples], dtype=np.int64)
    return EncodedSet(
        batch,
        (cont - norm.cont_mean) / norm.cont_std,
        (dt - norm.dt_mean) / norm.dt_std,
        types,
    )


def train_model(
    spec: FusionSpec,
    records: Sequence[MttsRecord],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> tuple[FusionModel, list[EpochLog]]:
    """Train one model on all windows of ``records``.

    Deterministic given the arguments: parameter init uses
    ``model_cfg.seed`` and minibatch shuffling uses ``cfg.seed``.
    """
    model = build_model(spec, model_cfg)
    examples = examples_for(records, cfg)
    if not examples:
        raise ValueError("no training examples; records too short for the window")
    model.norm = fit_normalizer(records, examples)
    data = encode_examples(examples, model.norm, model_cfg.k)
    params = model.parameters()
    opt = G.Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else G.SGD(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    use_corr = spec.method == "corr"

    history: list[EpochLog] = []
    task_hist: list[list[float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        w = dwa_weights(task_hist, len(TASKS), cfg.dwa_temperature)
        perm = rng.permutation(data.size)
        sums = np.zeros(len(TASKS))
        total_sum = corr_sum = 0.0
        corr_n = 0
        for start in range(0, data.size, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = take_batch(data.batch, idx)
            with G.Tape() as tape:
                out = model.run(batch)
                losses = (
                    G.mse(out.cont, G.Tensor(data.cont[idx])),
                    G.mse(out.dt, G.Tensor(data.dt[idx])),
                    G.cross_entropy(out.logits, data.types[idx]),
                )
                total = losses[0] * w[0] + losses[1] * w[1] + losses[2] * w[2]
                pen = None
                if use_corr and len(idx) >= 2:
                    pen = corr_penalty(*out.corr_pair)
                    total = total - pen * spec.lam
            step += 1
            vals = [float(l.data) for l in losses]
            if not all(math.isfinite(v) for v in vals) or not math.isfinite(float(total.data)):
                raise TrainingDiverged(step, epoch, f"task losses {vals}")
            grads = G.backward(tape, total)
            if cfg.grad_clip > 0:
                G.clip_grad_norm(grads, cfg.grad_clip)
            opt.step(grads)
            sums += np.array(vals) * len(idx)
            total_sum += float(total.data) * len(idx)
            if pen is not None:
                corr_sum += float(pen.data) * len(idx)
                corr_n += len(idx)
        tasks = (sums / data.size).tolist()
        task_hist.append(tasks)
        history.append(
            EpochLog(
                epoch=epoch,
                weights=w.tolist(),
                tasks=tasks,
                total=total_sum / data.size,
                corr=corr_sum / corr_n if corr_n else None,
            )
        )
        log.debug("%s epoch %d tasks=%s", spec.key, epoch, tasks)
    return model, history


@dataclass
class Errors:
    """Per-example errors in signal units and seconds."""

    cont_sq: np.ndarray  # (n, 5) squared errors
    dt_err: np.ndarray  # (n,)
    y_true: np.ndarray
    y_pred: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y_true)


def predict(model: FusionModel, data: EncodedSet, batch_size: int = 256):
    conts, dts, logits = [], [], []
    for start in range(0, data.size, batch_size):
        idx = np.arange(start, min(start + batch_size, data.size))
        out = model.run(take_batch(data.batch, idx))
        conts.append(out.cont.data)
        dts.append(out.dt.data)
        logits.append(out.logits.data)
    return np.concatenate(conts), np.concatenate(dts), np.concatenate(logits)


def collect_errors(model: FusionModel, records: Sequence[MttsRecord], cfg: TrainConfig) -> Errors:
    examples = examples_for(records, cfg)
    if not examples:
        raise ValueError("no evaluation examples")
    n = model.norm
    data = encode_examples(examples, n, model.cfg.k)
    cont, dt, logits = predict(model, data)
    true_cont = np.stack([t.cont_next for _, t in examples])
    true_dt = np.array([t.dt_next for _, t in examples])
    return Errors(
        cont_sq=(cont * n.cont_std + n.cont_mean - true_cont) ** 2,
        dt_err=dt * n.dt_std + n.dt_mean - true_dt,
        y_true=data.types,
        y_pred=np.argmax(logits, axis=1),
    )


def macro_f1(y_true, y_pred) -> float:
    """Macro F1 over classes that occur in the truth or the predictions."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    classes = np.union1d(y_true, y_pred)
    scores = []
    for c in classes:
        tp = int(np.sum((y_true == c) & (y_pred == c)))
        fp = int(np.sum((y_true != c) & (y_pred == c)))
        fn = int(np.sum((y_true == c) & (y_pred != c)))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return math.fsum(scores) / len(scores)


def metrics_from_errors(err: Errors) -> MetricsReport:
    if err.n == 0:
        raise ValueError("no examples")
    return MetricsReport(
        rmse_cont=math.sqrt(math.fsum(err.cont_sq.ravel().tolist()) / err.cont_sq.size),
        rmse_dt=math.sqrt(math.fsum((err.dt_err**2).tolist()) / err.n),
        f1_event=macro_f1(err.y_true, err.y_pred),
        n_examples=err.n,
    )


def evaluate(model: FusionModel, records: Sequence[MttsRecord], cfg: TrainConfig) -> MetricsReport:
    return metrics_from_errors(collect_errors(model, records, cfg))


@dataclass
class GridResult:
    """Metrics per model spec (keyed ``<type>_<method>``) and test cell."""

    specs: list[FusionSpec]
    cells: list[tuple[float, float]]
    reports: dict[str, dict[tuple[float, float], MetricsReport]]
    errors: dict[str, dict[tuple[float, float], Errors]] = field(default_factory=dict)


def _train_job(args):
    spec, records, cfg, model_cfg = args
    return train_model(spec, records, cfg, model_cfg)


def train_all(specs, records, cfg, model_cfg, workers: int = 1):
    """Train one model per spec; results are in spec order for any ``workers``."""
    jobs = [(s, records, cfg, model_cfg) for s in specs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def grid_cells(dataset: Dataset) -> dict[tuple[float, float], list[MttsRecord]]:
    cells = dataset.cells()
    rows, cols = dataset.manifest.grid_shape
    if len(cells) != rows * cols:
        raise ValueError(
            f"dataset has {len(cells)} interaction cells, manifest grid is {rows}x{cols}"
        )
    return dict(sorted(cells.items()))


def evaluate_grid(models: Sequence[FusionModel], test: Dataset, cfg: TrainConfig,
                  keep_errors: bool = False) -> GridResult:
    cells = grid_cells(test)
    result = GridResult([m.spec for m in models], list(cells), {})
    for model in models:
        key = model.spec.key
        result.reports[key] = {}
        if keep_errors:
            result.errors[key] = {}
        for cell, recs in cells.items():
            err = collect_errors(model, recs, cfg)
            result.reports[key][cell] = metrics_from_errors(err)
            if keep_errors:
                result.errors[key][cell] = err
    return result


def run_grid(specs, train: Dataset, test: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
             workers: int = 1, keep_errors: bool = False):
    """Train every spec on the pooled training grid and evaluate per test cell.

    Returns ``(grid_result, models, histories)``.
    """
    grid_cells(test)
    trained = train_all(specs, list(train.records), cfg, model_cfg, workers)
    models = [m for m, _ in trained]
    histories = [h for _, h in trained]
    return evaluate_grid(models, test, cfg, keep_errors), models, histories


def _weighted(reports: Sequence[MetricsReport]) -> MetricsReport:
    n = sum(r.n_examples for r in reports)
    if n == 0:
        raise ValueError("cannot average reports with no examples")
    vals = {
        m: math.fsum(getattr(r, m) * r.n_examples for r in reports) / n for m in METRICS
    }
    return MetricsReport(n_examples=n, **vals)


def marginalize(grid: GridResult, axis: str) -> dict[str, list[tuple[float, MetricsReport]]]:
    """Per spec, metrics along one interaction axis (``"ec"`` or ``"ce"``),
    averaged over the other axis with ``n_examples`` weights."""
    if axis not in ("ec", "ce"):
        raise ValueError("axis must be 'ec' or 'ce'")
    pos = 0 if axis == "ec" else 1
    out = {}
    for key, per_cell in grid.reports.items():
        groups: dict[float, list[MetricsReport]] = defaultdict(list)
        for cell in grid.cells:
            groups[cell[pos]].append(per_cell[cell])
        out[key] = [(v, _weighted(groups[v])) for v in sorted(groups)]
    return out


def heatmap(grid: GridResult) -> dict[str, dict[str, tuple[list[float], list[float], np.ndarray]]]:
    """Per spec and metric: ``(i_ec values, i_ce values, table[i_ec, i_ce])``."""
    ecs = sorted({c[0] for c in grid.cells})
    ces = sorted({c[1] for c in grid.cells})
    out = {}
    for key, per_cell in grid.reports.items():
        tables = {}
        for metric in METRICS:
            tab = np.full((len(ecs), len(ces)), np.nan)
            for (ec, ce), rep in per_cell.items():
                tab[ecs.index(ec), ces.index(ce)] = getattr(rep, metric)
            tables[metric] = (ecs, ces, tab)
        out[key] = tables
    return out


# -- CSV ----------------------------------------------------------------------

METRICS_COLUMNS = ("spec_type", "spec_method", "i_ec", "i_ce", *METRICS, "n_examples")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _split_key(key: str, specs: Sequence[FusionSpec]) -> tuple[str, str]:
    for s in specs:
        if s.key == key:
            return s.ftype, s.method
    ftype, _, method = key.rpartition("_")
    return ftype, method


def metrics_csv(grid: GridResult) -> str:
    rows = []
    for key, per_cell in grid.reports.items():
        ftype, method = _split_key(key, grid.specs)
        for cell in grid.cells:
            r = per_cell[cell]
            rows.append([ftype, method, _fmt(cell[0]), _fmt(cell[1]), _fmt(r.rmse_cont),
                         _fmt(r.rmse_dt), _fmt(r.f1_event), _fmt(r.n_examples)])
    return _csv_text(METRICS_COLUMNS, rows)


def marginal_csv(grid: GridResult, axis: str) -> str:
    col = "i_ec" if axis == "ec" else "i_ce"
    rows = []
    for key, curve in marginalize(grid, axis).items():
        ftype, method = _split_key(key, grid.specs)
        for v, r in curve:
            rows.append([ftype, method, _fmt(v), _fmt(r.rmse_cont), _fmt(r.rmse_dt),
                         _fmt(r.f1_event), _fmt(r.n_examples)])
    return _csv_text(("spec_type", "spec_method", col, *METRICS, "n_examples"), rows)


def heatmap_csvs(grid: GridResult) -> dict[str, str]:
    """One table per metric; rows are (spec, i_ec), columns the i_ce values."""
    maps = heatmap(grid)
    ces = sorted({c[1] for c in grid.cells})
    out = {}
    for metric in METRICS:
        rows = []
        for key, tables in maps.items():
            ftype, method = _split_key(key, grid.specs)
            ecs, _, tab = tables[metric]
            for i, ec in enumerate(ecs):
                rows.append([ftype, method, _fmt(ec), *(_fmt(v) for v in tab[i])])
        header = ("spec_type", "spec_method", "i_ec", *(f"i_ce={_fmt(c)}" for c in ces))
        out[metric] = _csv_text(header, rows)
    return out


def read_metrics_csv(path) -> GridResult:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRICS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        specs: list[FusionSpec] = []
        cells: list[tuple[float, float]] = []
        reports: dict[str, dict] = {}
        for row in reader:
            spec = FusionSpec(row["spec_type"], row["spec_method"])
            if spec.key not in reports:
                specs.append(spec)
                reports[spec.key] = {}
            cell = (float(row["i_ec"]), float(row["i_ce"]))
            if cell not in cells:
                cells.append(cell)
            reports[spec.key][cell] = MetricsReport(
                float(row["rmse_cont"]), float(row["rmse_dt"]), float(row["f1_event"]),
                int(row["n_examples"]),
            )
    for key, per_cell in reports.items():
        if len(per_cell) != len(cells):
            raise ValueError(f"{path}: spec {key} does not cover every cell")
    return GridResult(specs, sorted(cells), reports)


def write_report(grid: GridResult, out_dir) -> list[Path]:
    """Write ``marginal_ec.csv``, ``marginal_ce.csv`` and ``heatmap_<metric>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for axis in ("ec", "ce"):
        p = out / f"marginal_{axis}.csv"
        _write(p, marginal_csv(grid, axis))
        written.append(p)
    for metric, text in heatmap_csvs(grid).items():
        p = out / f"heatmap_{metric}.csv"
        _write(p, text)
        written.append(p)
    return written


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def history_csv(history: Sequence[EpochLog]) -> str:
    header = ("epoch", "total", *(f"loss_{t}" for t in TASKS), *(f"weight_{t}" for t in TASKS), "corr")
    rows = [
        [h.epoch, _fmt(h.total), *(_fmt(v) for v in h.tasks), *(_fmt(v) for v in h.weights),
         "" if h.corr is None else _fmt(h.corr)]
        for h in history
    ]
    return _csv_text(header, rows)


def train_config_from_dict(obj: dict) -> TrainConfig:
    try:
        return TrainConfig(**obj)
    except TypeError as exc:
        raise ConfigError(f"invalid train config: {exc}") from None


def model_config_from_dict(obj: dict, k: int) -> ModelConfig:
    try:
        return ModelConfig(k=k, **obj)
    except TypeError as exc:
        raise ConfigError(f"invalid model config: {exc}") from None

