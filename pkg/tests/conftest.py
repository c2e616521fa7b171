import math

import numpy as np
import pytest

from mtts_fusion.synthgen import GeneratorConfig, random_transition_model


def numeric_grad(f, arrays, step=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array, in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + step
            fp = f()
            a[i] = orig - step
            fm = f()
            a[i] = orig
            g[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def rel_error(analytic, numeric, floor=1e-6):
    """Largest element-wise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@pytest.fixture(scope="session")
def transition4():
    return random_transition_model(4, 1.0, 1.0, np.random.default_rng(1))


@pytest.fixture(scope="session")
def base_cfg(transition4):
    m, t_mat = transition4
    return GeneratorConfig(m=m, t_mat=t_mat, seed=7, horizon=12.0)


def grad_error(loss_fn, leaves, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``loss_fn()`` builds a scalar Tensor from ``leaves`` (Tensors that require
    gradients); leaves the tape does not reach count as zero gradient.
    """
    from mtts_fusion.gradcore import Tape, backward

    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    analytic = [grads.get(t, np.zeros_like(t.data)) for t in leaves]
    numeric = numeric_grad(lambda: loss_fn().item(), [t.data for t in leaves], step)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


# -- brute-force oracles ------------------------------------------------------


def brute_align(cont, events, wc, we):
    items = [(t, 0, i) for i, (t, _) in enumerate(cont)] + [(t, 1, j) for j, (t, _) in enumerate(events)]
    out = []
    for t, kind, idx in sorted(items):
        if kind == 0:
            latest = None
            for s, x in events:
                if s <= t:
                    latest = x
            out.append((t, "cont", cont[idx][1], np.zeros(we) if latest is None else latest))
        else:
            latest = None
            for s, x in cont:
                if s <= t:
                    latest = x
            out.append((t, "event", np.zeros(wc) if latest is None else latest, events[idx][1]))
    return out


def brute_cell_metrics(err):
    sq = [float(v) for v in err.cont_sq.ravel()]
    dt = [float(v) ** 2 for v in err.dt_err]
    classes = sorted(set(err.y_true.tolist()) | set(err.y_pred.tolist()))
    f1s = []
    for c in classes:
        pairs = list(zip(err.y_true.tolist(), err.y_pred.tolist()))
        tp = sum(1 for t, p in pairs if t == c and p == c)
        fp = sum(1 for t, p in pairs if t != c and p == c)
        fn = sum(1 for t, p in pairs if t == c and p != c)
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return {
        "rmse_cont": math.sqrt(math.fsum(sq) / len(sq)),
        "rmse_dt": math.sqrt(math.fsum(dt) / len(dt)),
        "f1_event": math.fsum(f1s) / len(f1s),
        "n": len(dt),
    }


def brute_marginal(errors, axis_pos):
    out = {}
    for key, per_cell in errors.items():
        values = sorted({cell[axis_pos] for cell in per_cell})
        curve = []
        for v in values:
            cells = [brute_cell_metrics(e) for c, e in per_cell.items() if c[axis_pos] == v]
            n = sum(c["n"] for c in cells)
            curve.append((v, {m: math.fsum(c[m] * c["n"] for c in cells) / n
                              for m in ("rmse_cont", "rmse_dt", "f1_event")}, n))
        out[key] = curve
    return out


# -- acceptance reporting ---------------------------------------------------

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _ACCEPTANCE.append((number, title, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE):
        line = f"{'PASS' if ok else 'FAIL'}  {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
