"""Supervised-learning techniques lifted to the task level.

* pre-training: an all-classes classifier initialises the backbone
* multi-objective learning: an all-classes auxiliary loss shares the backbone
* bagging: meta models trained on class-subsampled pools, averaged (Bag1/Bag2)
* K-means task augmentation: split each class into sub-categories
* meta-KNN: fine-tune a trained meta model on the stored tasks nearest to a test task
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import OptimizerState, Tape, Tensor, backward, optimizer_step, zero_grads
from .metamodels import (Backbone, MetaModel, ModelError, argmax_lowest, backbone_forward, embed,
                         episode_forward)
from .metatrain import CurvePoint, TrainConfig, TrainingError, meta_train
from .taskgen import (ClassPool, EpisodeSpec, MetaExample, PoolError, RngStream, TrialPool, sample_task,
                      subsample_pool)

INDEX_MAGIC = "metaepi-index"
INDEX_VERSION = "v1"


def _base_pool(pool) -> ClassPool:
    return pool.trials[0] if isinstance(pool, TrialPool) else pool


def _linear_head(embed_dim: int, classes: int, rng: RngStream) -> tuple[Tensor, Tensor]:
    g = rng.generator()
    w = Tensor(g.standard_normal((embed_dim, classes)) * np.sqrt(1.0 / embed_dim), requires_grad=True)
    return w, Tensor(np.zeros((1, classes)), requires_grad=True)


def _head_logits(tape: Tape, emb: Tensor, w: Tensor, b: Tensor) -> Tensor:
    ones = Tensor(np.ones((emb.shape[0], 1)))
    return tape.add(tape.matmul(emb, w), tape.matmul(ones, b))


# ---------------------------------------------------------------------------
# pre-training


def pretrain_backbone(pool, backbone: Backbone, epochs: int, rng: RngStream, *, lr: float = 2e-3,
                      batch_size: int = 64, optimizer: str = "adam") -> tuple[Backbone, tuple[Tensor, Tensor]]:
    """Train ``backbone`` plus a fresh linear head as a ``C_pool``-way classifier.

    Returns a trained copy of the backbone and the head (callers usually
    drop the head). The input backbone is not modified.
    """
    base = _base_pool(pool)
    C = base.num_classes
    if C < 2:
        raise PoolError("pre-training needs at least two classes")
    backbone = backbone.copy()
    w, b = _linear_head(backbone.embed_dim, C, rng.child("head"))
    params = backbone.params() + [w, b]
    zero_grads(params)
    opt = OptimizerState(lr=lr, mode=optimizer)
    n = len(base)
    for epoch in range(epochs):
        order = rng.child("epoch", epoch).generator().permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            logits = _head_logits(tape, backbone_forward(backbone, base.features[idx], tape), w, b)
            loss = tape.softmax_xent(logits, base.class_ids[idx])
            if not np.isfinite(loss.data).all():
                raise TrainingError(f"pre-training diverged in epoch {epoch}")
            backward(tape, loss)
            optimizer_step(params, opt)
    return backbone, (w, b)


def pool_classification_accuracy(pool, backbone: Backbone, head: tuple[Tensor, Tensor]) -> float:
    base = _base_pool(pool)
    logits = _head_logits(Tape(), backbone_forward(backbone, base.features), *head).data
    return float(np.mean(argmax_lowest(logits) == base.class_ids))


# ---------------------------------------------------------------------------
# multi-objective learning


def multiobjective_loss(model: MetaModel, head: tuple[Tensor, Tensor], episode: MetaExample,
                        pool_batch: tuple[np.ndarray, np.ndarray], lam: float, tape: Tape | None = None) -> Tensor:
    """Episode loss plus ``lam`` times the all-classes cross-entropy on ``pool_batch``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    tape = tape if tape is not None else Tape()
    ep_loss = episode_forward(model, episode, tape).loss
    if lam == 0:
        return ep_loss
    return tape.add(ep_loss, _aux_term(tape, model, head, pool_batch, lam))


def _aux_term(tape, model, head, pool_batch, lam):
    x, y = pool_batch
    logits = _head_logits(tape, backbone_forward(model.backbone, x, tape), *head)
    return tape.scale(tape.softmax_xent(logits, y), lam)


@dataclass
class PoolClassificationObjective:
    """Auxiliary all-classes classifier sharing the meta model's backbone."""

    pool: ClassPool
    head_w: Tensor
    head_b: Tensor
    lam: float = 1.0
    batch_size: int = 64

    @classmethod
    def create(cls, pool, embed_dim: int, rng: RngStream, lam: float = 1.0, batch_size: int = 64):
        base = _base_pool(pool)
        w, b = _linear_head(embed_dim, base.num_classes, rng)
        return cls(base, w, b, lam, batch_size)

    def params(self) -> list[Tensor]:
        return [self.head_w, self.head_b]

    def batch(self, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.generator().choice(len(self.pool), size=min(self.batch_size, len(self.pool)), replace=False)
        return self.pool.features[idx], self.pool.class_ids[idx]

    def loss(self, tape: Tape, model: MetaModel, rng: RngStream) -> Tensor:
        return _aux_term(tape, model, (self.head_w, self.head_b), self.batch(rng), self.lam)


def train_multiobjective(model: MetaModel, pool, config: TrainConfig, rng: RngStream, *, lam: float = 1.0,
                         batch_size: int = 64) -> tuple[MetaModel, list[CurvePoint]]:
    aux = PoolClassificationObjective.create(pool, model.backbone.embed_dim, rng, lam, batch_size)
    return meta_train(model, pool, config, aux=aux)


# ---------------------------------------------------------------------------
# bagging


@dataclass
class BagEnsemble:
    members: list[MetaModel]
    mode: str = "bag2"
    bag_classes: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ModelError("ensemble needs at least one member")
        if self.mode not in ("bag1", "bag2"):
            raise ModelError(f"unknown aggregation mode {self.mode!r}")
        if len({m.variant for m in self.members}) != 1:
            raise ModelError("ensemble members must share one variant")

    def with_mode(self, mode: str) -> "BagEnsemble":
        return replace(self, mode=mode)


def train_bag(pool, B: int, classes_per_bag: int, base_model: MetaModel, config: TrainConfig, rng: RngStream,
              *, mode: str = "bag2", trainer: Callable | None = None) -> BagEnsemble:
    """Train ``B`` copies of ``base_model`` on independent class-subsampled pools.

    Bag ``b`` trains on ``subsample_pool(pool, classes_per_bag, None,
    rng.child("bag", b))`` with ``config.seed + b``. ``base_model`` may carry
    a pre-trained backbone shared by every member.
    """
    if B < 1:
        raise ValueError("need B >= 1")
    if classes_per_bag > _base_pool(pool).num_classes:
        raise PoolError(f"classes_per_bag {classes_per_bag} exceeds pool size {_base_pool(pool).num_classes}")
    trainer = trainer or (lambda m, p, c: meta_train(m, p, c)[0])
    members, classes = [], []
    for b in range(B):
        sub = subsample_pool(pool, classes_per_bag, None, rng.child("bag", b))
        members.append(trainer(base_model, sub, replace(config, seed=config.seed + b)))
        classes.append(list(sub.metadata["class_origin"]))
    return BagEnsemble(members, mode, classes)


def ensemble_predict(ensemble: BagEnsemble, episode: MetaExample) -> tuple[np.ndarray, np.ndarray]:
    """Average member logits (Bag1) or probabilities (Bag2); returns scores and labels."""
    outs = [episode_forward(m, episode) for m in ensemble.members]
    stack = np.stack([o.logits if ensemble.mode == "bag1" else o.probs for o in outs])
    scores = stack[0] if len(outs) == 1 else stack.mean(axis=0)
    return scores, argmax_lowest(scores)


def average_scores(member_scores: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.mean(np.stack([np.asarray(s, dtype=np.float64) for s in member_scores]), axis=0)
    return scores, argmax_lowest(scores)


# ---------------------------------------------------------------------------
# K-means augmentation


def lloyd_kmeans(x: np.ndarray, k: int, g: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    """Lloyd iterations from a random balanced partition.

    Stops at an assignment fixpoint or after ``max_iter`` rounds. An emptied
    cluster takes the point farthest from its own centroid (among clusters
    with more than one point). Cluster labels are renumbered by first
    occurrence.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1 or n < k:
        raise PoolError(f"cannot split {n} points into {k} clusters")
    labels = g.permutation(n) % k
    for _ in range(max_iter):
        cents = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        d = ((x[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        _repair_empty(new, d, k)
        if np.array_equal(new, labels):
            break
        labels = new
    _, first = np.unique(labels, return_index=True)
    rank = np.empty(k, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(k)
    return rank[labels]


def _repair_empty(labels: np.ndarray, d: np.ndarray, k: int) -> None:
    for j in range(k):
        if (labels == j).any():
            continue
        sizes = np.bincount(labels, minlength=k)
        own = d[np.arange(len(labels)), labels]
        own = np.where(sizes[labels] > 1, own, -np.inf)
        labels[int(np.argmax(own))] = j


def kmeans_objective(x: np.ndarray, labels: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(sum(((x[labels == j] - x[labels == j].mean(axis=0)) ** 2).sum() for j in np.unique(labels)))


def kmeans_augment_pool(pool: ClassPool, K: int, feature_map: Callable | Backbone | None, trials: int,
                        rng: RngStream, max_iter: int = 100) -> TrialPool:
    """Split every class into ``K`` K-means sub-categories, ``trials`` times.

    Trial ``r`` relabels instance class ``c`` / cluster ``j`` as ``c*K + j``.
    Clustering happens in ``feature_map`` space (identity when ``None``).
    """
    if K < 1 or trials < 1:
        raise ValueError("need K >= 1 and trials >= 1")
    small = np.flatnonzero(pool.counts().sum(axis=1) < K)
    if len(small):
        raise PoolError(f"class {int(small[0])} has fewer than {K} instances")
    if feature_map is None:
        feats = pool.features
    elif isinstance(feature_map, Backbone):
        feats = embed(feature_map, pool.features)
    else:
        feats = np.asarray(feature_map(pool.features), dtype=np.float64)
    out = []
    for r in range(trials):
        new_ids = np.array(pool.class_ids)
        if K > 1:
            for c in range(pool.num_classes):
                idx = pool.indices(c)
                g = rng.child("trial", r, "class", c).generator()
                new_ids[idx] = c * K + lloyd_kmeans(feats[idx], K, g, max_iter)
        meta = dict(pool.metadata)
        if K > 1:
            meta.update(augment_k=K, trial=r)
            if "class_subs" in meta:
                meta["class_subs"] = np.repeat(meta["class_subs"], K).tolist()
        out.append(ClassPool(pool.features, new_ids, pool.domain_ids, meta) if K > 1 else pool)
    return TrialPool(out, {"augment_k": K, "trials": trials})


# ---------------------------------------------------------------------------
# meta-KNN


@dataclass
class TaskIndex:
    episodes: list[MetaExample]
    embeddings: np.ndarray
    method: str = "support-mean"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.episodes):
            raise ValueError("need one embedding row per stored task")

    def __len__(self) -> int:
        return len(self.episodes)


@dataclass(frozen=True)
class MetaKnnConfig:
    k: int = 100
    epochs: int = 1
    step: float = 2e-4
    meta_batch: int = 10

    def __post_init__(self):
        if self.k < 1 or self.epochs < 0 or not self.step > 0 or self.meta_batch < 1:
            raise ValueError(f"invalid meta-KNN config {self}")


def task_embedding(backbone: Backbone, episode: MetaExample) -> np.ndarray:
    """Mean backbone embedding of the support set."""
    return embed(backbone, episode.support_x).mean(axis=0)


def build_task_index(pool, spec: EpisodeSpec, num_tasks: int, backbone: Backbone, rng: RngStream,
                     *, by_sub: bool = False) -> TaskIndex:
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    eps = [sample_task(pool, spec, rng.child("task", i), by_sub) for i in range(num_tasks)]
    return TaskIndex(eps, np.stack([task_embedding(backbone, ep) for ep in eps]))


def knn_search(index: TaskIndex, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest stored tasks (Euclidean); ties go to the lower index."""
    if k > len(index):
        raise ValueError(f"K={k} exceeds index size {len(index)}")
    diff = index.embeddings - np.asarray(query, dtype=np.float64)[None, :]
    d = (diff * diff).sum(axis=1)
    return np.argsort(d, kind="stable")[:k]


def meta_knn_finetune(model: MetaModel, tasks: Sequence[MetaExample], cfg: MetaKnnConfig) -> MetaModel:
    """Copy ``model`` and run ``cfg.epochs`` passes of plain SGD over ``tasks``."""
    tuned = model.copy()
    if cfg.epochs == 0:
        return tuned
    params = tuned.params()
    zero_grads(params)
    opt = OptimizerState(lr=cfg.step, mode="sgd")
    for _ in range(cfg.epochs):
        for start in range(0, len(tasks), cfg.meta_batch):
            chunk = tasks[start:start + cfg.meta_batch]
            tape = Tape()
            total = None
            for ep in chunk:
                loss = episode_forward(tuned, ep, tape).loss
                total = loss if total is None else tape.add(total, loss)
            total = tape.scale(total, 1.0 / len(chunk))
            backward(tape, total)
            optimizer_step(params, opt)
    return tuned


def meta_knn_adapt(model: MetaModel, index: TaskIndex, episode: MetaExample, cfg: MetaKnnConfig
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Predict ``episode`` with a copy of ``model`` fine-tuned on its nearest stored tasks.

    Returns ``(predictions, neighbor_indices)``; ``model`` is never modified.
    """
    if len(index) == 0:
        raise ValueError("empty task index")
    neighbors = knn_search(index, task_embedding(model.backbone, episode), cfg.k)
    tuned = meta_knn_finetune(model, [index.episodes[i] for i in neighbors], cfg)
    return episode_forward(tuned, episode).predictions, neighbors


# -- persistence ------------------------------------------------------------


def _rows(labels, domain, x) -> list[str]:
    return [f"{int(y)},{domain}," + ",".join(repr(v) for v in row) for y, row in zip(labels, x.tolist())]


def index_to_text(index: TaskIndex) -> str:
    dim = index.embeddings.shape[1]
    lines = [f"{INDEX_MAGIC} {INDEX_VERSION} tasks={len(index)} dim={dim} method={index.method}"]
    for i, (ep, e) in enumerate(zip(index.episodes, index.embeddings)):
        lines.append(f"task {i} classes={','.join(str(int(c)) for c in ep.class_ids)} "
                     f"support={len(ep.support_y)} val={len(ep.val_y)} "
                     f"source={ep.source_domain} target={ep.target_domain}")
        lines.append("embedding " + ",".join(repr(v) for v in e.tolist()))
        lines += _rows(ep.support_y, ep.source_domain, ep.support_x)
        lines += _rows(ep.val_y, ep.target_domain, ep.val_x)
    return "\n".join(lines) + "\n"


def _parse_rows(lines):
    parts = [ln.split(",") for ln in lines]
    return (np.array([int(p[0]) for p in parts], dtype=np.int64),
            np.array([[float(v) for v in p[2:]] for p in parts], dtype=np.float64))


def index_from_text(text: str) -> TaskIndex:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) < 2 or head[0] != INDEX_MAGIC:
        raise ValueError("not a task index file")
    if head[1] != INDEX_VERSION:
        raise ValueError(f"unsupported index version {head[1]!r}")
    fields = dict(tok.split("=", 1) for tok in head[2:])
    pos = 1
    eps, embs = [], []
    for _ in range(int(fields["tasks"])):
        info = dict(tok.split("=", 1) for tok in lines[pos].split()[2:])
        emb = [float(v) for v in lines[pos + 1].split(" ", 1)[1].split(",")]
        ns, nv = int(info["support"]), int(info["val"])
        sy, sx = _parse_rows(lines[pos + 2:pos + 2 + ns])
        vy, vx = _parse_rows(lines[pos + 2 + ns:pos + 2 + ns + nv])
        pos += 2 + ns + nv
        classes = np.array([int(c) for c in info["classes"].split(",")], dtype=np.int64)
        eps.append(MetaExample(sx, sy, vx, vy, classes, np.arange(ns), ns + np.arange(nv),
                               int(info["source"]), int(info["target"])))
        embs.append(emb)
    return TaskIndex(eps, np.array(embs).reshape(len(eps), int(fields["dim"])), fields.get("method", "support-mean"))


def write_index(index: TaskIndex, path) -> None:
    Path(path).write_text(index_to_text(index))


def read_index(path) -> TaskIndex:
    return index_from_text(Path(path).read_text())
