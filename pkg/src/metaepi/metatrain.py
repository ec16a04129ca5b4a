"""Episodic meta-ERM training, meta-validation model selection and meta-test evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .autodiff import OptimizerState, Tape, backward, optimizer_step, zero_grads
from .metamodels import MetaModel, accuracy, episode_forward, predict
from .taskgen import EpisodeSpec, MetaExample, RngStream, sample_task

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    spec: EpisodeSpec
    epochs: int = 10
    episodes_per_epoch: int = 200
    episodes_per_meta_batch: int = 4
    lr: float = 2e-3
    optimizer: str = "adam"
    seed: int = 0
    by_sub: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.episodes_per_meta_batch < 1:
            raise ValueError("epochs >= 0, episodes_per_epoch >= 1, episodes_per_meta_batch >= 1 required")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


@dataclass
class CurvePoint:
    epoch: int
    meta_train_loss: float
    meta_train_acc: float
    meta_val_acc: float | None = None


class AuxObjective(Protocol):
    """Extra loss term added to every meta-batch (multi-objective training)."""

    def params(self) -> list: ...

    def loss(self, tape: Tape, model: MetaModel, rng: RngStream): ...


EpisodeHook = Callable[[MetaExample], None]


def meta_train(model: MetaModel, pool, config: TrainConfig, *, val_pool=None, val_episodes: int = 100,
               aux: AuxObjective | None = None, on_episode: EpisodeHook | None = None
               ) -> tuple[MetaModel, list[CurvePoint]]:
    """Minimise the mean validation loss over sampled episodes.

    The input model is left untouched; a trained copy is returned with the
    per-epoch curve. Episode ``i`` of epoch ``e`` draws from
    ``RngStream(seed).child("train", e, i)``, so runs are reproducible.
    A learning rate of zero freezes the parameters (the curve is still
    computed). ``on_episode`` sees every sampled training episode.
    """
    model = model.copy()
    params = model.params() + (aux.params() if aux is not None else [])
    zero_grads(params)
    opt = OptimizerState(lr=config.lr, mode=config.optimizer) if config.lr > 0 else None
    root = RngStream(config.seed)
    curve: list[CurvePoint] = []
    B = config.episodes_per_meta_batch
    for epoch in range(config.epochs):
        losses, accs = [], []
        for start in range(0, config.episodes_per_epoch, B):
            idxs = range(start, min(start + B, config.episodes_per_epoch))
            tape = Tape()
            terms = []
            for i in idxs:
                ep = sample_task(pool, config.spec, root.child("train", epoch, i), config.by_sub)
                if on_episode is not None:
                    on_episode(ep)
                out = episode_forward(model, ep, tape)
                terms.append(out.loss)
                losses.append(out.loss.item())
                accs.append(accuracy(out.predictions, ep.val_y))
            total = terms[0]
            for t in terms[1:]:
                total = tape.add(total, t)
            total = tape.scale(total, 1.0 / len(terms))
            if aux is not None:
                total = tape.add(total, aux.loss(tape, model, root.child("aux", epoch, start)))
            if not np.isfinite(total.data).all():
                raise TrainingError(f"meta-training loss diverged in epoch {epoch}")
            if opt is not None:
                backward(tape, total)
                optimizer_step(params, opt)
        for p in params:
            if not np.isfinite(p.data).all():
                raise TrainingError(f"parameters became non-finite in epoch {epoch}")
        point = CurvePoint(epoch, float(np.mean(losses)), float(np.mean(accs)))
        if val_pool is not None:
            point.meta_val_acc = evaluate_meta_model(model, val_pool, config.spec, val_episodes,
                                                     seed=config.seed, by_sub=config.by_sub).mean
        curve.append(point)
        logger.debug("epoch %d loss %.4f acc %.4f", epoch, point.meta_train_loss, point.meta_train_acc)
    return model, curve


def curve_to_csv(curve: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "meta_train_loss", "meta_train_acc", "meta_val_acc"])
    for p in curve:
        w.writerow([p.epoch, repr(p.meta_train_loss), repr(p.meta_train_acc),
                    "" if p.meta_val_acc is None else repr(p.meta_val_acc)])
    return buf.getvalue()


def write_curve(curve: Sequence[CurvePoint], path) -> None:
    Path(path).write_text(curve_to_csv(curve))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mean: float
    std_error: float
    ci95: float
    episodes: int
    accuracies: np.ndarray = field(repr=False)

    @classmethod
    def from_accuracies(cls, accs) -> "EvalReport":
        """Population std; a single episode has std 0 by convention."""
        a = np.asarray(accs, dtype=np.float64)
        if a.size == 0:
            raise ValueError("no episodes evaluated")
        T = a.size
        if np.all(a == a[0]):
            # zero variance is reported exactly, not as float round-off
            return cls(float(a[0]), 0.0, 0.0, T, a)
        mean = math.fsum(a) / T
        std = math.sqrt(math.fsum((a - mean) ** 2) / T)
        se = std / math.sqrt(T)
        return cls(mean, se, 1.96 * se, T, a)


def worker_threads(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("METAEPI_THREADS")
    return max(1, int(env)) if env else 1


Predictor = Callable[[MetaExample], np.ndarray]


def evaluate_predictor(predict_fn: Predictor, pool, spec: EpisodeSpec, episodes: int, seed: int, *,
                       threads: int | None = None, by_sub: bool = False,
                       on_episode: EpisodeHook | None = None) -> EvalReport:
    """Accuracy over ``episodes`` fresh episodes; episode ``t`` uses ``child("eval", t)``.

    Results are merged in episode order, so they do not depend on ``threads``.
    ``by_sub`` confines each episode to one sub-distribution of the pool.
    ``on_episode`` may be called from worker threads.
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    root = RngStream(seed)

    def one(t: int) -> float:
        ep = sample_task(pool, spec, root.child("eval", t), by_sub)
        if on_episode is not None:
            on_episode(ep)
        return accuracy(predict_fn(ep), ep.val_y)

    n = worker_threads(threads)
    if n == 1:
        accs = [one(t) for t in range(episodes)]
    else:
        with ThreadPoolExecutor(max_workers=n) as ex:
            accs = list(ex.map(one, range(episodes)))
    return EvalReport.from_accuracies(accs)


def evaluate_meta_model(model: MetaModel, pool, spec: EpisodeSpec, episodes: int, seed: int, *,
                        threads: int | None = None, by_sub: bool = False,
                        on_episode: EpisodeHook | None = None) -> EvalReport:
    return evaluate_predictor(lambda ep: predict(model, ep), pool, spec, episodes, seed,
                              threads=threads, by_sub=by_sub, on_episode=on_episode)


def meta_validate_select(candidates: Sequence, val_pool, episodes: int, *, spec: EpisodeSpec | None = None,
                         seed: int = 0) -> tuple[int, list[float]]:
    """Pick the candidate with the best mean accuracy on shared meta-val episodes.

    ``candidates`` holds ``(model, TrainConfig)`` pairs or bare models (then
    ``spec`` is required). Ties go to the lowest index.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    scores = []
    for cand in candidates:
        model, cfg = cand if isinstance(cand, tuple) else (cand, None)
        ep_spec = spec if spec is not None else cfg.spec
        scores.append(evaluate_meta_model(model, val_pool, ep_spec, episodes, seed).mean)
    return int(np.argmax(scores)), scores
