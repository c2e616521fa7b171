"""Synthetic mixed-type time series with tunable intermodal interaction.

The continuous channel is an Ornstein-Uhlenbeck process, integrated with
Euler-Maruyama, whose target mean blends a sinusoidal trajectory with a
value derived from recent events. The event channel is a Markov chain over
``k`` types whose inter-event times are fixed per (previous, next) pair and
whose transition probabilities can be pulled toward the current value of the
continuous channel.

Transition matrices are indexed ``m[prev, next]``: rows are the previous
event type, columns the next one.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import (
    ContinuousSeries,
    Dataset,
    DatasetManifest,
    EventSequence,
    MttsRecord,
    MANIFEST_VERSION,
)

_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SineComponent:
    amplitude: float
    frequency: float
    phase: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.amplitude):
            raise ConfigError("sine amplitude must be finite")
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise ConfigError("sine frequency must be positive")


DEFAULT_COMPONENTS = (
    SineComponent(0.5, 0.05),
    SineComponent(0.3, 0.1),
    SineComponent(0.2, 0.2),
)


@dataclass(frozen=True, eq=False)
class GeneratorConfig:
    """All parameters of one generated sequence.

    ``decay=None`` means ``ln 2 / mean(t_mat)``: an event's weight in the
    event-derived mean halves after one mean transition time.
    ``mean_offset`` is a constant added to the sinusoidal trajectory.
    """

    m: np.ndarray
    t_mat: np.ndarray
    theta: float = 1.0
    sigma: float = 0.1
    dt: float = 0.1
    horizon: float = 20.0
    mean_components: tuple[SineComponent, ...] = DEFAULT_COMPONENTS
    i_ec: float = 0.0
    i_ce: float = 0.0
    decay: float | None = None
    seed: int = 0
    mean_offset: float = 0.0

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        t_mat = np.array(self.t_mat, dtype=np.float64)
        m.setflags(write=False)
        t_mat.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "t_mat", t_mat)
        object.__setattr__(self, "mean_components", tuple(self.mean_components))
        self.validate()

    @property
    def k(self) -> int:
        return self.m.shape[0]

    @property
    def decay_rate(self) -> float:
        if self.decay is not None:
            return float(self.decay)
        return math.log(2.0) / float(self.t_mat.mean())

    def validate(self) -> None:
        problems = []
        if not self.theta > 0:
            problems.append("theta must be > 0")
        if not self.sigma >= 0:
            problems.append("sigma must be >= 0")
        if not self.dt > 0:
            problems.append("dt must be > 0")
        if not self.horizon >= self.dt:
            problems.append("horizon must be >= dt")
        if not self.mean_components:
            problems.append("mean_components must be non-empty")
        m, t_mat = self.m, self.t_mat
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
            problems.append("m must be a KxK matrix with K >= 2")
        else:
            if np.any(~np.isfinite(m)) or np.any(m < 0):
                problems.append("m entries must be finite and >= 0")
            elif np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
                problems.append("every row of m must sum to 1")
            if t_mat.shape != m.shape:
                problems.append("t_mat must have the same shape as m")
            elif np.any(~np.isfinite(t_mat)) or np.any(t_mat <= 0):
                problems.append("t_mat entries must be > 0")
        for name in ("i_ec", "i_ce"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                problems.append(f"{name} must lie in [0,1]")
        if self.decay is not None and not self.decay > 0:
            problems.append("decay must be > 0")
        if not 0 <= int(self.seed) <= _MASK64:
            problems.append("seed must be a 64-bit unsigned integer")
        if problems:
            raise ConfigError("; ".join(problems))

    def with_(self, **changes) -> "GeneratorConfig":
        return replace(self, **changes)


def mean_trajectory(
    t: float, components: Sequence[SineComponent], shift: float = 0.0
) -> float:
    """Sum of sines evaluated at ``t + shift`` (``shift`` in seconds)."""
    if not components:
        raise ConfigError("mean trajectory needs at least one sine component")
    tt = t + shift
    return sum(
        c.amplitude * math.sin(2.0 * math.pi * c.frequency * tt + c.phase)
        for c in components
    )


def draw_phase_shift(components: Sequence[SineComponent], rng: np.random.Generator) -> float:
    """Random time offset in ``[0, 1/f_min)`` seconds, at most one period of
    the slowest component."""
    if not components:
        raise ConfigError("mean trajectory needs at least one sine component")
    f_min = min(c.frequency for c in components)
    return float(rng.random()) / f_min


def ou_step(x: float, m: float, cfg: GeneratorConfig, noise: float) -> float:
    """One Euler-Maruyama step of ``dc = theta (m - c) dt + sigma dW``."""
    if not (math.isfinite(x) and math.isfinite(m) and math.isfinite(noise)):
        raise NumericError(f"non-finite OU input x={x} m={m} noise={noise}")
    dt = cfg.dt
    return x + cfg.theta * (m - x) * dt + cfg.sigma * math.sqrt(dt) * noise


def event_values(k: int) -> np.ndarray:
    """Values ``-1 + 2j/(k-1)`` assigned to event types ``j = 0..k-1``."""
    if k < 2:
        raise ConfigError("need at least two event types")
    values = -1.0 + 2.0 * np.arange(k) / (k - 1)
    values[-1] = 1.0
    values.setflags(write=False)
    return values


def intermodal_mean(events, cmap: np.ndarray, decay: float, t: float) -> float:
    """Exponentially time-weighted mean of the values of events at or before ``t``.

    ``events`` is an :class:`EventSequence` or an iterable of ``(time, type)``.
    Returns 0.0 (the middle of the value range) when no event has happened yet.
    """
    if isinstance(events, EventSequence):
        times, types = events.times, events.types
    else:
        pairs = list(events)
        times = np.array([p[0] for p in pairs], dtype=np.float64)
        types = np.array([p[1] for p in pairs], dtype=np.int64)
    past = times <= t
    if not past.any():
        return 0.0
    times, types = times[past], types[past]
    # weights relative to the newest event; the common factor cancels
    w = np.exp(-decay * (times.max() - times))
    return float(np.dot(w, cmap[types]) / w.sum())


def blended_mean(m_c: float, m_e: float, i_ec: float) -> float:
    return m_c * (1.0 - i_ec) + m_e * i_ec


def transition_distribution(
    prev: int, c_t: float, cfg: GeneratorConfig, cmap: np.ndarray
) -> np.ndarray:
    """Next-type probabilities given the previous type and the continuous value.

    Blends the normalized squared distances ``(C - c_t)^2`` with the Markov
    row ``m[prev]`` by ``i_ce`` and renormalizes.
    """
    if not 0 <= prev < cfg.k:
        raise ConfigError(f"previous type {prev} outside [0, {cfg.k})")
    if not math.isfinite(c_t):
        raise NumericError(f"non-finite continuous value {c_t}")
    row = cfg.m[prev]
    if cfg.i_ce == 0.0:
        return row.copy()
    d = (cmap - c_t) ** 2
    p = d / d.sum() * cfg.i_ce + row * (1.0 - cfg.i_ce)
    return p / p.sum()


def _entropy_bits(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _tempered(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def random_transition_model(
    k: int, target_entropy: float, mean_dt: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random ``(m, t_mat)`` whose rows of ``m`` all have the given entropy in bits.

    Each row is a tempered softmax of fixed random logits; the temperature is
    found by bisection in log space. ``t_mat`` entries are uniform in
    ``[0.5, 1.5] * mean_dt`` and then rescaled to have exactly that mean.
    """
    if k < 2:
        raise ConfigError("need at least two event types")
    h_max = math.log2(k)
    if not (0.0 <= target_entropy <= h_max + 1e-12):
        raise ConfigError(f"entropy {target_entropy} bits unreachable for k={k}")
    if not mean_dt > 0:
        raise ConfigError("mean_dt must be > 0")

    m = np.empty((k, k))
    for row in range(k):
        logits = rng.standard_normal(k)
        if target_entropy <= 0.0:
            p = np.zeros(k)
            p[int(np.argmax(logits))] = 1.0
        elif target_entropy >= h_max - 1e-12:
            p = np.full(k, 1.0 / k)
        else:
            lo, hi = -12.0, 12.0
            p = _tempered(logits, math.exp(hi))
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                p = _tempered(logits, math.exp(mid))
                h = _entropy_bits(p)
                if abs(h - target_entropy) < 1e-6:
                    break
                if h < target_entropy:
                    lo = mid
                else:
                    hi = mid
            if abs(_entropy_bits(p) - target_entropy) > 1e-3:
                raise ConfigError(f"could not reach entropy {target_entropy} bits")
        m[row] = p
    t_mat = rng.uniform(0.5, 1.5, size=(k, k)) * mean_dt
    t_mat *= mean_dt / t_mat.mean()
    return m, t_mat


def _n_samples(cfg: GeneratorConfig) -> int:
    return int(math.floor(cfg.horizon / cfg.dt + 1e-9)) + 1


def generate_sequence(
    cfg: GeneratorConfig, rng: np.random.Generator | None = None, record_id: str = ""
) -> MttsRecord:
    """Co-simulate both channels up to ``cfg.horizon``.

    Randomness is split into three independent streams (phase shift, OU
    noise, event sampling) spawned from ``cfg.seed`` unless ``rng`` is given,
    so the event stream does not depend on the continuous channel when
    ``i_ce = 0``.

    The next event type is drawn when the previous event fires, from the
    continuous value held at that moment (last sample at or before the event
    time), and scheduled ``t_mat[prev, next]`` seconds later.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    phase_rng, noise_rng, event_rng = rng.spawn(3)

    n = _n_samples(cfg)
    dt = cfg.dt
    t_last = (n - 1) * dt
    cmap = event_values(cfg.k)
    decay = cfg.decay_rate
    comps = cfg.mean_components
    offset = cfg.mean_offset
    shift = draw_phase_shift(comps, phase_rng)
    noise = noise_rng.standard_normal(n)

    ev_times: list[float] = []
    ev_types: list[int] = []
    # running weighted sums relative to the newest event, see intermodal_mean
    num = den = 0.0
    m_e = 0.0

    def fire(tau: float, typ: int) -> None:
        nonlocal num, den, m_e
        if ev_times:
            f = math.exp(-decay * (tau - ev_times[-1]))
            num, den = num * f, den * f
        num += cmap[typ]
        den += 1.0
        m_e = num / den
        ev_times.append(float(tau))
        ev_types.append(typ)

    def draw_next(prev: int, c_hold: float) -> int:
        p = transition_distribution(prev, c_hold, cfg, cmap)
        cum = np.cumsum(p)
        idx = int(np.searchsorted(cum, event_rng.random() * cum[-1], side="right"))
        return min(idx, cfg.k - 1)

    first = int(event_rng.integers(cfg.k))
    fire(0.0, first)
    pending: tuple[float, int] | None = None

    values = np.empty(n)
    x = 0.0
    m_prev = 0.0
    for i in range(n):
        t = i * dt
        if i == 0:
            x = blended_mean(offset + mean_trajectory(0.0, comps, shift), m_e, cfg.i_ec)
        else:
            x = ou_step(x, m_prev, cfg, noise[i])
        values[i] = x
        # events in [t_i, t_{i+1}) see x_i as the held continuous value;
        # only those at exactly t_i enter the target mean at t_i
        if pending is None:
            nxt = draw_next(ev_types[-1], x)
            pending = (ev_times[-1] + cfg.t_mat[ev_types[-1], nxt], nxt)
        while pending[0] <= t and pending[0] <= t_last:
            fire(*pending)
            nxt = draw_next(ev_types[-1], x)
            pending = (ev_times[-1] + cfg.t_mat[ev_types[-1], nxt], nxt)
        m_prev = blended_mean(offset + mean_trajectory(t, comps, shift), m_e, cfg.i_ec)
        t_next = (i + 1) * dt
        while pending[0] < t_next and pending[0] <= t_last:
            fire(*pending)
            nxt = draw_next(ev_types[-1], x)
            pending = (ev_times[-1] + cfg.t_mat[ev_types[-1], nxt], nxt)

    return MttsRecord(
        id=record_id,
        cont=ContinuousSeries(0.0, float(dt), tuple(values.tolist())),
        events=EventSequence(tuple(zip(ev_times, ev_types))),
        i_ec=float(cfg.i_ec),
        i_ce=float(cfg.i_ce),
        seed=int(cfg.seed),
    )


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash64(*parts: int) -> int:
    """Mix integers into one 64-bit seed by chained splitmix64."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _MASK64))
    return h


SPLIT_TAGS = {"train": 0, "test": 1}


def grid_values(res: int) -> list[float]:
    if res < 1:
        raise ConfigError("grid resolution must be >= 1")
    if res == 1:
        return [0.0]
    return [j / (res - 1) for j in range(res)]


def _cell_records(args) -> list[MttsRecord]:
    base_cfg, split, row, col, i_ec, i_ce, per_cell = args
    out = []
    for rep in range(per_cell):
        seed = hash64(base_cfg.seed, SPLIT_TAGS[split], row, col, rep)
        cfg = base_cfg.with_(i_ec=i_ec, i_ce=i_ce, seed=seed)
        out.append(generate_sequence(cfg, record_id=f"{split}-{row:03d}-{col:03d}-{rep:04d}"))
    return out


def generate_split(
    base_cfg: GeneratorConfig, split: str, res: int, per_cell: int, workers: int = 1
) -> Dataset:
    """One dataset over a ``res x res`` grid of ``(i_ec, i_ce)`` values.

    Records are ordered by (i_ec index, i_ce index, replicate) whatever the
    number of workers.
    """
    if split not in SPLIT_TAGS:
        raise ConfigError(f"unknown split {split!r}")
    if per_cell < 1:
        raise ConfigError("sequences per cell must be >= 1")
    vals = grid_values(res)
    jobs = [
        (base_cfg, split, r, c, vals[r], vals[c], per_cell)
        for r in range(res)
        for c in range(res)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_cell_records, jobs))
    else:
        chunks = [_cell_records(j) for j in jobs]
    records = tuple(rec for chunk in chunks for rec in chunk)
    manifest = DatasetManifest(MANIFEST_VERSION, split, base_cfg.k, len(records), (res, res))
    return Dataset(manifest, records)


def generate_grid(
    train_res: int,
    train_per_cell: int,
    test_res: int,
    test_per_cell: int,
    base_cfg: GeneratorConfig,
    workers: int = 1,
) -> tuple[Dataset, Dataset]:
    train = generate_split(base_cfg, "train", train_res, train_per_cell, workers)
    test = generate_split(base_cfg, "test", test_res, test_per_cell, workers)
    return train, test


@dataclass
class GridSpec:
    train_res: int = 5
    train_per_cell: int = 2
    test_res: int = 5
    test_per_cell: int = 2


@dataclass
class GenerationPlan:
    base: GeneratorConfig
    grid: GridSpec = field(default_factory=GridSpec)


def config_from_dict(obj: dict) -> GenerationPlan:
    """Build a generator config (and grid parameters) from a parsed JSON object.

    The transition model is either given explicitly as ``m`` and ``t_mat`` or
    drawn at random from a ``transition`` block
    ``{"entropy_bits", "mean_dt", "seed"}``.
    """
    if not isinstance(obj, dict):
        raise ConfigError("generator config must be a JSON object")
    obj = dict(obj)
    grid = obj.pop("grid", {}) or {}
    transition = obj.pop("transition", None)
    k = obj.pop("k", None)
    comps = obj.pop("mean_components", None)
    known = {
        "m", "t_mat", "theta", "sigma", "dt", "horizon", "i_ec", "i_ce",
        "decay", "seed", "mean_offset",
    }
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
    try:
        if comps is not None:
            obj["mean_components"] = tuple(
                SineComponent(float(c["amplitude"]), float(c["frequency"]), float(c.get("phase", 0.0)))
                for c in comps
            )
        if "m" not in obj:
            if transition is None or k is None:
                raise ConfigError("give either m and t_mat, or k and a transition block")
            rng = np.random.default_rng(int(transition.get("seed", obj.get("seed", 0))))
            m, t_mat = random_transition_model(
                int(k), float(transition["entropy_bits"]), float(transition["mean_dt"]), rng
            )
            obj["m"], obj["t_mat"] = m, t_mat
        elif "t_mat" not in obj:
            raise ConfigError("m given without t_mat")
        base = GeneratorConfig(**obj)
        if k is not None and int(k) != base.k:
            raise ConfigError(f"k={k} does not match the {base.k}x{base.k} transition matrix")
        gs = GridSpec(**{key: int(v) for key, v in grid.items()})
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid generator config: {exc}") from None
    for name in ("train_res", "test_res", "train_per_cell", "test_per_cell"):
        if getattr(gs, name) < 1:
            raise ConfigError(f"grid.{name} must be >= 1")
    return GenerationPlan(base, gs)


def load_config(path) -> GenerationPlan:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))
