"""Fusion operators and the early / intermediate / late / unimodal forecasters.

Every model maps a window of the continuous signal plus the recent events to
three forecasts: the next five continuous samples, logits over the next event
type, and the time until that event. Continuous values and times are
standardized inside the models; :func:`forward` converts back to signal units
and seconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import gradcore as G
from .gradcore import DimensionError, Linear, LSTMCell, Module, Tensor
from .gradcore.tensor import _new, _record
from .synthgen import ConfigError

FTYPES = ("early", "intermediate", "late", "unimodal_cont", "unimodal_event")
METHODS = ("concat", "mean", "corr", "gating", "share", "none")
FEATURE_METHODS = ("concat", "mean", "corr", "gating", "share")
LATE_METHODS = ("mean", "corr")
HORIZON = 5


@dataclass(frozen=True)
class FusionSpec:
    """Fusion type and method plus the method's hyperparameters.

    ``beta`` weights the event side in weighted means (``beta * x_e +
    (1 - beta) * x_c``), ``lam`` scales the correlation reward of the
    ``corr`` method, ``r`` is the shared width of ``share`` (``None`` means
    half the branch width) and ``late_betas`` are the per-output weights
    (continuous, time-to-event, event type) used by late fusion.
    """

    ftype: str
    method: str = "none"
    beta: float = 0.5
    lam: float = 0.1
    r: int | None = None
    late_betas: tuple[float, float, float] = (0.5, 0.5, 0.5)

    @property
    def key(self) -> str:
        return f"{self.ftype}_{self.method}"

    def problems(self) -> list[str]:
        out = []
        if self.ftype not in FTYPES:
            out.append(f"unknown fusion type {self.ftype!r}")
        if self.method not in METHODS:
            out.append(f"unknown fusion method {self.method!r}")
        if self.ftype.startswith("unimodal") and self.method != "none":
            out.append("unimodal models take method 'none'")
        if self.ftype == "late" and self.method not in LATE_METHODS:
            out.append("late fusion supports only 'mean' and 'corr'")
        if self.ftype in ("early", "intermediate") and self.method not in FEATURE_METHODS:
            out.append(f"{self.ftype} fusion needs one of {FEATURE_METHODS}")
        if not 0.0 <= self.beta <= 1.0:
            out.append("beta must lie in [0,1]")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            out.append("lambda must be >= 0")
        if self.r is not None and self.r < 1:
            out.append("r must be >= 1")
        if len(self.late_betas) != 3 or not all(0.0 <= b <= 1.0 for b in self.late_betas):
            out.append("late_betas must be three values in [0,1]")
        return out

    def validate(self) -> "FusionSpec":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["late_betas"] = list(self.late_betas)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "FusionSpec":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        if "late_betas" in obj:
            obj["late_betas"] = tuple(float(b) for b in obj["late_betas"])
        try:
            return cls(**obj).validate()
        except TypeError as exc:
            raise ConfigError(f"invalid fusion spec: {exc}") from None


def valid_combinations() -> list[FusionSpec]:
    """The fourteen type/method families, with default hyperparameters."""
    specs = [FusionSpec("early", m) for m in FEATURE_METHODS]
    specs += [FusionSpec("intermediate", m) for m in FEATURE_METHODS]
    specs += [FusionSpec("late", m) for m in LATE_METHODS]
    specs += [FusionSpec("unimodal_cont"), FusionSpec("unimodal_event")]
    return specs


# -- fusion operators ---------------------------------------------------------


def fuse_concat(xc, xe) -> Tensor:
    return G.concat([xc, xe], axis=-1)


def fuse_mean(xc, xe, beta: float) -> Tensor:
    xc, xe = G.tensor.as_tensor(xc), G.tensor.as_tensor(xe)
    if xc.shape != xe.shape:
        raise DimensionError(f"fuse_mean: shapes {xc.shape} and {xe.shape} differ")
    return xe * beta + xc * (1.0 - beta)


def fuse_share(xc, xe, beta: float, r: int) -> Tensor:
    """Average the first ``r`` features, keep the rest of each side:
    ``[beta*xe[:r] + (1-beta)*xc[:r], xe[r:], xc[r:]]``."""
    xc, xe = G.tensor.as_tensor(xc), G.tensor.as_tensor(xe)
    l_c, l_e = xc.shape[-1], xe.shape[-1]
    if not 0 < r < min(l_c, l_e):
        raise ConfigError(f"share width r={r} must satisfy 0 < r < min({l_c}, {l_e})")
    shared = G.slice_(xe, 0, r) * beta + G.slice_(xc, 0, r) * (1.0 - beta)
    return G.concat([shared, G.slice_(xe, r, l_e), G.slice_(xc, r, l_c)], axis=-1)


class GatingParams(Module):
    """``w_c``: (l_c, width), ``w_e``: (l_e, width), ``w_f``: (2*width, width)."""

    def __init__(self, l_c: int, l_e: int, width: int, rng: np.random.Generator):
        self.w_c = G.nn.uniform_param(rng, (l_c, width), l_c)
        self.w_e = G.nn.uniform_param(rng, (l_e, width), l_e)
        self.w_f = G.nn.uniform_param(rng, (2 * width, width), 2 * width)


def fuse_gating(xc, xe, params: GatingParams) -> Tensor:
    h_e = G.tanh(G.matmul(xe, params.w_e))
    h_c = G.tanh(G.matmul(xc, params.w_c))
    z = G.sigmoid(G.matmul(G.concat([h_e, h_c], axis=-1), params.w_f))
    return z * h_e + (1.0 - z) * h_c


def corr_penalty(xc_batch, xe_batch) -> Tensor:
    """Mean over feature dimensions of the Pearson correlation across the batch.

    Dimensions where either side has zero variance contribute 0.
    """
    xc, xe = G.tensor.as_tensor(xc_batch), G.tensor.as_tensor(xe_batch)
    if xc.shape != xe.shape or xc.ndim != 2:
        raise DimensionError(f"corr_penalty: shapes {xc.shape} and {xe.shape}")
    n, d = xc.shape
    if n < 2:
        raise ValueError("corr_penalty needs at least two samples")
    a = xc.data - xc.data.mean(axis=0)
    b = xe.data - xe.data.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    r = np.where(ok, (a * b).sum(axis=0) / denom, 0.0)
    out = _new(r.mean())

    def fn(g):
        # d r / d a = b/(|a||b|) - r a/|a|^2; centring drops out because a, b
        # are already centred
        sa = np.where(ok, na * na, 1.0)
        sb = np.where(ok, nb * nb, 1.0)
        ga = np.where(ok, b / denom - r * a / sa, 0.0) * (g / d)
        gb = np.where(ok, a / denom - r * b / sb, 0.0) * (g / d)
        return ga, gb

    return _record(out, (xc, xe), fn)


class Fuser(Module):
    """Applies one fusion method to a pair of equal-rank feature tensors."""

    def __init__(self, method: str, l_c: int, l_e: int, spec: FusionSpec, rng, gate_width: int):
        self.method = method
        self.beta = spec.beta
        self.r = None
        if method in ("mean", "corr"):
            if l_c != l_e:
                raise ConfigError(f"{method} fusion needs equal widths, got {l_c} and {l_e}")
            self.out_dim = l_c
        elif method == "concat":
            self.out_dim = l_c + l_e
        elif method == "share":
            self.r = spec.r if spec.r is not None else min(l_c, l_e) // 2
            if not 0 < self.r < min(l_c, l_e):
                raise ConfigError(f"share width r={self.r} must satisfy 0 < r < {min(l_c, l_e)}")
            self.out_dim = l_c + l_e - self.r
        elif method == "gating":
            self.gate = GatingParams(l_c, l_e, gate_width, rng)
            self.out_dim = gate_width
        else:
            raise ConfigError(f"no feature fusion for method {method!r}")

    def __call__(self, xc, xe) -> Tensor:
        if self.method == "concat":
            return fuse_concat(xc, xe)
        if self.method in ("mean", "corr"):
            return fuse_mean(xc, xe, self.beta)
        if self.method == "share":
            return fuse_share(xc, xe, self.beta, self.r)
        return fuse_gating(xc, xe, self.gate)


# -- temporal alignment -------------------------------------------------------


def align_indices(cont_times, event_times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index form of :func:`align_latest` for one window.

    Returns ``(cont_pair, event_pair, order)``. ``cont_pair[i]`` is ``1 +``
    the index of the latest event at or before cont item ``i`` (0 when there
    is none); ``event_pair[j]`` likewise points into the continuous items.
    ``order`` lists the merged stream, continuous items as ``0..n_c-1`` and
    events as ``n_c..n_c+n_e-1``; at equal times the continuous item comes
    first.
    """
    ct = np.asarray(cont_times, dtype=np.float64)
    et = np.asarray(event_times, dtype=np.float64)
    cont_pair = np.searchsorted(et, ct, side="right")
    event_pair = np.searchsorted(ct, et, side="right")
    times = np.concatenate([ct, et])
    kind = np.concatenate([np.zeros(len(ct), int), np.ones(len(et), int)])
    order = np.lexsort((kind, times))
    return cont_pair, event_pair, order


def align_latest(cont_timeline, event_timeline, cont_width: int | None = None,
                 event_width: int | None = None):
    """Pair every feature with the latest feature of the other modality.

    Timelines are time-ordered sequences of ``(time, feature_vector)``. The
    result is the merged, time-ordered list of ``(time, modality, x_c,
    x_e)`` where ``modality`` is ``"cont"`` or ``"event"``; a zero vector
    stands in when the other modality has nothing at or before that time.
    """
    cont_timeline, event_timeline = list(cont_timeline), list(event_timeline)
    if cont_width is None:
        cont_width = len(cont_timeline[0][1]) if cont_timeline else 0
    if event_width is None:
        event_width = len(event_timeline[0][1]) if event_timeline else 0
    zc, ze = np.zeros(cont_width), np.zeros(event_width)
    cont_pair, event_pair, order = align_indices(
        [t for t, _ in cont_timeline], [t for t, _ in event_timeline]
    )
    n_c = len(cont_timeline)
    out = []
    for idx in order:
        if idx < n_c:
            t, xc = cont_timeline[idx]
            p = cont_pair[idx]
            out.append((t, "cont", xc, event_timeline[p - 1][1] if p else ze))
        else:
            t, xe = event_timeline[idx - n_c]
            p = event_pair[idx - n_c]
            out.append((t, "event", cont_timeline[p - 1][1] if p else zc, xe))
    return out


# -- model inputs -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InputWindow:
    """Model input: the continuous window and the most recent events.

    ``ev_dts`` holds each event's gap to the event before it in the record.
    """

    cont_times: np.ndarray
    cont_values: np.ndarray
    ev_times: np.ndarray
    ev_types: np.ndarray
    ev_dts: np.ndarray
    window_end: float


@dataclass(frozen=True)
class ForecastOutput:
    cont_next: np.ndarray
    event_logits: np.ndarray
    dt_next: float


@dataclass
class Normalizer:
    """Standardization statistics fitted on training data."""

    cont_mean: float = 0.0
    cont_std: float = 1.0
    gap_mean: float = 0.0
    gap_std: float = 1.0
    dt_mean: float = 0.0
    dt_std: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "Normalizer":
        return cls(**{k: float(v) for k, v in obj.items()})


@dataclass
class Batch:
    cont: np.ndarray  # (B, Lc) standardized values
    cont_times: np.ndarray  # (B, Lc)
    ev_x: np.ndarray  # (B, Le, K+2) one-hot type, standardized gap, standardized age
    ev_times: np.ndarray  # (B, Le), -inf where padded
    ev_mask: np.ndarray  # (B, Le) bool, padding on the left

    @property
    def size(self) -> int:
        return self.cont.shape[0]


def encode_batch(windows: Sequence[InputWindow], norm: Normalizer, k: int) -> Batch:
    """Stack windows into padded arrays. All windows must share the
    continuous window length."""
    if not windows:
        raise ValueError("empty batch")
    lc = len(windows[0].cont_values)
    le = max(1, max(len(w.ev_types) for w in windows))
    b = len(windows)
    cont = np.empty((b, lc))
    cont_times = np.empty((b, lc))
    ev_x = np.zeros((b, le, k + 2))
    ev_times = np.full((b, le), -np.inf)
    ev_mask = np.zeros((b, le), dtype=bool)
    for i, w in enumerate(windows):
        if len(w.cont_values) != lc:
            raise DimensionError("all windows in a batch need the same continuous length")
        cont[i] = (w.cont_values - norm.cont_mean) / norm.cont_std
        cont_times[i] = w.cont_times
        n = len(w.ev_types)
        if n:
            if np.any(w.ev_types >= k) or np.any(w.ev_types < 0):
                raise ValueError(f"event type outside [0, {k})")
            s = le - n
            ev_x[i, np.arange(s, le), w.ev_types] = 1.0
            ev_x[i, s:, k] = (w.ev_dts - norm.gap_mean) / norm.gap_std
            ev_x[i, s:, k + 1] = (w.window_end - w.ev_times - norm.gap_mean) / norm.gap_std
            ev_times[i, s:] = w.ev_times
            ev_mask[i, s:] = True
    return Batch(cont, cont_times, ev_x, ev_times, ev_mask)


def take_batch(batch: Batch, index) -> Batch:
    """Sub-batch by row index, trimming left padding shared by every row."""
    mask = batch.ev_mask[index]
    keep = int(mask.sum(axis=1).max()) if mask.size else 0
    start = batch.ev_mask.shape[1] - max(1, keep)
    return Batch(
        batch.cont[index],
        batch.cont_times[index],
        batch.ev_x[index, start:],
        batch.ev_times[index, start:],
        mask[:, start:],
    )


# -- architectures ------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    k: int
    hidden: int = 16
    fused_hidden: int = 16
    gate_width: int | None = None
    dec_hidden: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    """Standardized forecasts for a batch, plus the two representations the
    correlation reward is computed on (``None`` for models without one)."""

    cont: Tensor  # (B, 5)
    logits: Tensor  # (B, K)
    dt: Tensor  # (B,)
    corr_pair: tuple[Tensor, Tensor] | None = None


def _run_lstm(cell: LSTMCell, xs: Sequence, mask: np.ndarray | None = None) -> list[Tensor]:
    """Hidden states for every step. Masked-out steps carry the state over
    unchanged."""
    batch = xs[0].shape[0]
    h, c = cell.zero_state(batch)
    hs = []
    for s, x in enumerate(xs):
        h_new, c_new = cell(x, h, c)
        if mask is None or mask[:, s].all():
            h, c = h_new, c_new
        else:
            m = mask[:, s, None]
            h, c = G.blend(m, h_new, h), G.blend(m, c_new, c)
        hs.append(h)
    return hs


class ContEncoder(Module):
    def __init__(self, hidden: int, rng):
        self.cell = LSTMCell(1, hidden, rng)

    def __call__(self, batch: Batch) -> list[Tensor]:
        x = batch.cont
        return _run_lstm(self.cell, [Tensor(x[:, s : s + 1]) for s in range(x.shape[1])])


class EventEncoder(Module):
    def __init__(self, k: int, hidden: int, rng):
        self.cell = LSTMCell(k + 2, hidden, rng)

    def __call__(self, batch: Batch) -> list[Tensor]:
        x = batch.ev_x
        return _run_lstm(self.cell, [Tensor(x[:, s]) for s in range(x.shape[1])], batch.ev_mask)


class Head(Module):
    """Linear layers for event logits and time-to-event, and a small recurrent
    decoder that emits the five continuous forecasts autoregressively."""

    def __init__(self, n_in: int, k: int, dec_hidden: int, rng):
        self.event = Linear(n_in, k, rng)
        self.dt = Linear(n_in, 1, rng)
        self.init = Linear(n_in, dec_hidden, rng)
        self.dec = LSTMCell(1, dec_hidden, rng)
        self.out = Linear(dec_hidden, 1, rng)

    def __call__(self, rep: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        batch = rep.shape[0]
        h = G.tanh(self.init(rep))
        c = Tensor(np.zeros(h.shape))
        y = Tensor(np.zeros((batch, 1)))
        ys = []
        for _ in range(HORIZON):
            h, c = self.dec(y, h, c)
            y = self.out(h)
            ys.append(y)
        dt = G.reshape(self.dt(rep), (batch,))
        return G.concat(ys, axis=-1), self.event(rep), dt


class FusionModel(Module):
    """Base class; subclasses implement :meth:`run` on encoded batches."""

    def __init__(self, spec: FusionSpec, cfg: ModelConfig):
        spec.validate()
        self.spec = spec
        self.cfg = cfg
        self.norm = Normalizer()

    def run(self, batch: Batch) -> ModelOutput:
        raise NotImplementedError


class UnimodalModel(FusionModel):
    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        rng = np.random.default_rng(cfg.seed)
        if spec.ftype == "unimodal_cont":
            self.encoder = ContEncoder(cfg.hidden, rng)
        else:
            self.encoder = EventEncoder(cfg.k, cfg.hidden, rng)
        self.head = Head(cfg.hidden, cfg.k, cfg.dec_hidden, rng)

    def representation(self, batch: Batch) -> Tensor:
        return self.encoder(batch)[-1]

    def run(self, batch):
        cont, logits, dt = self.head(self.representation(batch))
        return ModelOutput(cont, logits, dt)


class IntermediateModel(FusionModel):
    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        rng = np.random.default_rng(cfg.seed)
        self.cont_enc = ContEncoder(cfg.hidden, rng)
        self.event_enc = EventEncoder(cfg.k, cfg.hidden, rng)
        self.fuser = Fuser(spec.method, cfg.hidden, cfg.hidden, spec, rng,
                           cfg.gate_width or cfg.hidden)
        self.head = Head(self.fuser.out_dim, cfg.k, cfg.dec_hidden, rng)

    def run(self, batch):
        hc = self.cont_enc(batch)[-1]
        he = self.event_enc(batch)[-1]
        cont, logits, dt = self.head(self.fuser(hc, he))
        return ModelOutput(cont, logits, dt, (hc, he) if self.spec.method == "corr" else None)


class EarlyModel(FusionModel):
    """Unimodal LSTMs, then every step of either modality is fused with the
    latest features of the other and the merged stream is read by a
    multimodal LSTM."""

    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        rng = np.random.default_rng(cfg.seed)
        self.cont_enc = ContEncoder(cfg.hidden, rng)
        self.event_enc = EventEncoder(cfg.k, cfg.hidden, rng)
        self.fuser = Fuser(spec.method, cfg.hidden, cfg.hidden, spec, rng,
                           cfg.gate_width or cfg.hidden)
        self.mm = LSTMCell(self.fuser.out_dim, cfg.fused_hidden, rng)
        self.head = Head(cfg.fused_hidden, cfg.k, cfg.dec_hidden, rng)

    def run(self, batch):
        b, lc = batch.cont.shape
        le = batch.ev_mask.shape[1]
        hc = G.stack(self.cont_enc(batch), axis=1)  # (B, Lc, H)
        he = G.stack(self.event_enc(batch), axis=1)  # (B, Le, H)

        c_pair = np.zeros((b, lc), dtype=np.int64)
        e_pair = np.zeros((b, le), dtype=np.int64)
        order = np.empty((b, lc + le), dtype=np.int64)
        step_mask = np.zeros((b, lc + le), dtype=bool)
        for i in range(b):
            real = batch.ev_mask[i]
            pad = le - int(real.sum())
            cp, ep, od = align_indices(batch.cont_times[i], batch.ev_times[i, pad:])
            # event pair indices count real events only; shift past the padding
            c_pair[i] = np.where(cp > 0, cp + pad, 0)
            e_pair[i, pad:] = ep
            od = np.where(od >= lc, od + pad, od)
            order[i] = np.concatenate([lc + np.arange(pad), od])
            step_mask[i, pad:] = True

        zeros = Tensor(np.zeros((b, 1, hc.shape[2])))
        he_pad = G.concat([zeros, he], axis=1)
        hc_pad = G.concat([zeros, hc], axis=1)
        xe_for_c = G.gather(he_pad, c_pair)
        xc_for_e = G.gather(hc_pad, e_pair)
        fused_c = self.fuser(hc, xe_for_c)
        fused_e = self.fuser(xc_for_e, he)
        stream = G.gather(G.concat([fused_c, fused_e], axis=1), order)

        xs = [G.slice_(stream, s, s + 1, axis=1) for s in range(lc + le)]
        xs = [G.reshape(x, (b, x.shape[2])) for x in xs]
        h = _run_lstm(self.mm, xs, step_mask)[-1]
        cont, logits, dt = self.head(h)

        corr = None
        if self.spec.method == "corr":
            # time-averaged pre-fusion inputs over the valid merged steps
            pair_c = G.gather(G.concat([hc, xc_for_e], axis=1), order)
            pair_e = G.gather(G.concat([xe_for_c, he], axis=1), order)
            w = step_mask / step_mask.sum(axis=1, keepdims=True)
            w = w[:, :, None]
            corr = (G.sum(pair_c * w, axis=1), G.sum(pair_e * w, axis=1))
        return ModelOutput(cont, logits, dt, corr)


class LateModel(FusionModel):
    """Two complete unimodal forecasters whose outputs are averaged with the
    per-output weights in ``spec.late_betas``; event forecasts are averaged
    as probabilities and returned as log-probabilities."""

    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        self.cont_model = UnimodalModel(FusionSpec("unimodal_cont"), cfg)
        ev_cfg = ModelConfig(**{**cfg.to_dict(), "seed": cfg.seed + 1})
        self.event_model = UnimodalModel(FusionSpec("unimodal_event"), ev_cfg)

    def run(self, batch):
        rc = self.cont_model.representation(batch)
        re = self.event_model.representation(batch)
        cc, lc, dc = self.cont_model.head(rc)
        ce, le, de = self.event_model.head(re)
        b_cont, b_dt, b_ev = self.spec.late_betas
        cont = ce * b_cont + cc * (1.0 - b_cont)
        dt = de * b_dt + dc * (1.0 - b_dt)
        prob = G.softmax(le) * b_ev + G.softmax(lc) * (1.0 - b_ev)
        logits = G.log(prob)
        corr = (rc, re) if self.spec.method == "corr" else None
        return ModelOutput(cont, logits, dt, corr)


_ARCHS = {
    "early": EarlyModel,
    "intermediate": IntermediateModel,
    "late": LateModel,
    "unimodal_cont": UnimodalModel,
    "unimodal_event": UnimodalModel,
}


def build_model(spec: FusionSpec, cfg: ModelConfig) -> FusionModel:
    """Construct the architecture for ``spec``; invalid specs raise
    :class:`ConfigError` before any parameter is created."""
    spec.validate()
    if cfg.k < 2:
        raise ConfigError("need at least two event types")
    return _ARCHS[spec.ftype](spec, cfg)


def forward(model: FusionModel, window: InputWindow) -> ForecastOutput:
    """Forecast for a single window, in signal units and seconds."""
    out = model.run(encode_batch([window], model.norm, model.cfg.k))
    n = model.norm
    return ForecastOutput(
        cont_next=out.cont.data[0] * n.cont_std + n.cont_mean,
        event_logits=out.logits.data[0].copy(),
        dt_next=float(out.dt.data[0] * n.dt_std + n.dt_mean),
    )
