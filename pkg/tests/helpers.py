"""Finite-difference gradient oracle and small fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from metaepi.autodiff import Tape, Tensor, backward
from metaepi.metamodels import Backbone, MetaModel, classifier_logits, episode_loss, fomaml_adapt
from metaepi.taskgen import EpisodeSpec, RngStream, make_gaussian_pool, sample_episode

FD_STEP = 1e-5
FD_RTOL = 1e-4
# coordinates whose true gradient is this small are compared in absolute terms;
# central differences at h=1e-5 carry ~1e-10 of round-off
FD_FLOOR = 1e-5


def numeric_grads(f, arrays, h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of the scalar ``f(*arrays)`` w.r.t. every entry."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            hi = f(*arrays)
            a[i] = old - h
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor: float = FD_FLOOR) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return worst


def autodiff_grads(build, arrays) -> tuple[float, list[np.ndarray]]:
    """Run ``build(tape, *leaves)`` and return (loss, leaf grads)."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    tape = Tape(debug=True)
    loss = build(tape, *leaves)
    backward(tape, loss)
    return loss.item(), [np.zeros_like(a) if t.grad is None else t.grad for t, a in zip(leaves, arrays)]


def check_build(build, arrays) -> float:
    """Relative error between autodiff and finite differences for ``build``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    _, analytic = autodiff_grads(build, arrays)

    def f(*xs):
        return build(Tape(), *[Tensor(x) for x in xs]).item()

    return max_rel_error(analytic, numeric_grads(f, arrays))


def easy_pool(seed: int = 0, classes: int = 10, dim: int = 4, n: int = 30, ratio: float = 20.0):
    # unit class spread keeps features O(1) so FO-MAML inner steps stay stable
    return make_gaussian_pool(classes, dim, n, 1.0, 1.0 / ratio, RngStream(seed))


def small_episode(seed: int = 0, ways: int = 3, shots: int = 2, val: int = 3, dim: int = 4):
    pool = make_gaussian_pool(ways + 2, dim, shots + val + 2, 1.5, 1.0, RngStream(seed).child("pool"))
    return sample_episode(pool, EpisodeSpec(ways, shots, val), RngStream(seed).child("episode"))


# -- gradient cases shared with the acceptance suite


def _away_from_zero(g, shape, lo=0.05):
    x = g.standard_normal(shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)


def _project(tape, out, r):
    """Scalar ``sum(out * r)``: checks the full vector-Jacobian product."""
    return tape.sum(tape.mul(out, Tensor(r)))


def primitive_case(name, g):
    """One random ``(build, inputs)`` instance exercising primitive ``name``."""
    n, m, k = g.integers(1, 5, size=3)
    if name == "matmul":
        a, b = g.standard_normal((n, k)), g.standard_normal((k, m))
        r = g.standard_normal((n, m))
        return lambda t, x, y: _project(t, t.matmul(x, y), r), [a, b]
    if name in ("add", "sub", "mul"):
        a, b = g.standard_normal((n, m)), g.standard_normal((n, m))
        r = g.standard_normal((n, m))
        return lambda t, x, y: _project(t, t.apply(name, x, y), r), [a, b]
    if name == "scale":
        c = float(g.standard_normal())
        r = g.standard_normal((n, m))
        return lambda t, x: _project(t, t.scale(x, c), r), [g.standard_normal((n, m))]
    if name == "relu":
        r = g.standard_normal((n, m))
        return lambda t, x: _project(t, t.relu(x), r), [_away_from_zero(g, (n, m))]
    if name in ("mean", "sum"):
        return lambda t, x: t.scale(t.apply(name, x), 1.7), [g.standard_normal((n, m))]
    if name == "sqdist":
        a, b = g.standard_normal((n, k)), g.standard_normal((m, k))
        r = g.standard_normal((n, m))
        return lambda t, x, y: _project(t, t.sqdist(x, y), r), [a, b]
    if name == "softmax_xent":
        c = int(g.integers(2, 6))
        labels = g.integers(0, c, size=n)
        return lambda t, x: t.softmax_xent(x, labels), [g.standard_normal((n, c)) * 2]
    if name == "log":
        r = g.standard_normal((n, m))
        return lambda t, x: _project(t, t.log(x), r), [g.uniform(0.5, 3.0, (n, m))]
    if name == "exp":
        r = g.standard_normal((n, m))
        return lambda t, x: _project(t, t.exp(x), r), [g.standard_normal((n, m))]
    if name == "concat_rows":
        a, b = g.standard_normal((n, k)), g.standard_normal((m, k))
        r = g.standard_normal((n + m, k))
        return lambda t, x, y: _project(t, t.concat_rows(x, y), r), [a, b]
    if name == "transpose":
        r = g.standard_normal((m, n))
        return lambda t, x: _project(t, t.transpose(x), r), [g.standard_normal((n, m))]
    if name in ("normalize_rows", "softmax_rows"):
        r = g.standard_normal((n, m))
        return lambda t, x: _project(t, t.apply(name, x), r), [g.standard_normal((n, m)) + 0.5]
    if name == "take_rows":
        total = n + m
        start = int(g.integers(0, total))
        stop = int(g.integers(start + 1, total + 1))
        r = g.standard_normal((stop - start, k))
        return lambda t, x: _project(t, t.take_rows(x, start, stop), r), [g.standard_normal((total, k))]
    if name == "class_means":
        ways = int(g.integers(1, 4))
        labels = np.concatenate([np.arange(ways), g.integers(0, ways, size=n)])
        r = g.standard_normal((ways, k))
        return lambda t, x: _project(t, t.class_means(x, labels, ways), r), [g.standard_normal((len(labels), k))]
    raise AssertionError(f"no test case for primitive {name}")


MODEL_WIDTHS = (4, 5, 3)


def make_model(variant: str, seed: int, **hyper) -> MetaModel:
    """Random 3-way model with nonzero biases so no embedding row is exactly zero."""
    m = MetaModel.create(variant, MODEL_WIDTHS, RngStream(seed), ways=3, **hyper)
    g = RngStream(seed).child("bias").generator()
    for b in m.backbone.biases:
        b.data = g.standard_normal(b.shape) * 0.5
    return m


def model_from_leaves(variant: str, leaves, alpha: float = 0.4) -> MetaModel:
    if variant == "fomaml":
        trunk = leaves[:-2]
        return MetaModel(variant, Backbone(list(trunk[0::2]), list(trunk[1::2])), leaves[-2], leaves[-1],
                         alpha=alpha)
    return MetaModel(variant, Backbone(list(leaves[0::2]), list(leaves[1::2])), tau=0.5)


def episode_fd_error(variant: str, seed: int, alpha: float = 0.4) -> float:
    """Relative error of the episode-loss gradient against central differences.

    For FO-MAML with ``alpha > 0`` the reference is the validation loss at
    ``init + delta`` with the inner-loop ``delta`` held fixed, which is the
    function the first-order gradient differentiates exactly.
    """
    ep = small_episode(seed, ways=3, shots=2, val=2)
    arrays = [p.data.copy() for p in make_model(variant, seed).params()]

    def build(tape, *leaves):
        return episode_loss(model_from_leaves(variant, leaves, alpha), ep, tape)

    _, analytic = autodiff_grads(build, arrays)
    if variant == "fomaml" and alpha > 0:
        adapted = fomaml_adapt(arrays, ep.support_x, ep.support_y, alpha, 1)
        delta = [a - p for a, p in zip(adapted, arrays)]

        def f(*a):
            tape = Tape()
            params = [Tensor(x + d) for x, d in zip(a, delta)]
            return tape.softmax_xent(classifier_logits(tape, params, ep.val_x), ep.val_y).item()
    else:
        def f(*a):
            return build(Tape(), *[Tensor(v) for v in a]).item()
    return max_rel_error(analytic, numeric_grads(f, arrays))
