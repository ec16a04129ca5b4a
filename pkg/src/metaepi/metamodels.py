"""Meta models over a shared MLP backbone: ProtoNet, MatchNet and first-order MAML.

Every meta model maps an episode's support set to a classifier and scores the
episode's validation set. :func:`episode_loss` is the mean validation
cross-entropy, differentiable with respect to the meta parameters through the
autodiff tape.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward
from .taskgen import MetaExample, RngStream

VARIANTS = ("protonet", "matchnet", "fomaml")
MODEL_MAGIC = "metaepi-model"
MODEL_VERSION = "v1"


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# backbone


def mlp_forward(tape: Tape, weights: Sequence[Tensor], biases: Sequence[Tensor], x) -> Tensor:
    """ReLU MLP; the last layer is linear."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[1] != weights[0].shape[0]:
        raise ModelError(f"input dim {h.shape[1]} != backbone input dim {weights[0].shape[0]}")
    ones = Tensor(np.ones((h.shape[0], 1)))
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = tape.add(tape.matmul(h, w), tape.matmul(ones, b))
        if i < last:
            h = tape.relu(h)
    return h


@dataclass
class Backbone:
    """MLP feature extractor ``d -> hidden... -> e`` with ReLU between layers."""

    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ModelError("backbone needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (1, w.shape[1]):
                raise ModelError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ModelError(f"layer {i}: input width {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")

    @classmethod
    def init(cls, widths: Sequence[int], rng: RngStream) -> "Backbone":
        if len(widths) < 2 or min(widths) < 1:
            raise ModelError(f"need at least input and output widths >= 1, got {widths}")
        g = rng.generator()
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ws.append(Tensor(g.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in), requires_grad=True))
            bs.append(Tensor(np.zeros((1, fan_out)), requires_grad=True))
        return cls(ws, bs)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def copy(self) -> "Backbone":
        return copy.deepcopy(self)


def backbone_forward(backbone: Backbone, x, tape: Tape | None = None) -> Tensor:
    return mlp_forward(tape if tape is not None else Tape(), backbone.weights, backbone.biases, x)


def embed(backbone: Backbone, x) -> np.ndarray:
    """Plain numpy embeddings (no gradient bookkeeping kept)."""
    return backbone_forward(backbone, np.asarray(x, dtype=np.float64)).data


# ---------------------------------------------------------------------------
# meta model


@dataclass
class MetaModel:
    """A meta model: variant tag, backbone and (FO-MAML only) a linear head.

    ``alpha``/``steps`` are the FO-MAML inner step size and step count,
    ``tau`` the MatchNet softmax temperature.
    """

    variant: str
    backbone: Backbone
    head_w: Tensor | None = None
    head_b: Tensor | None = None
    alpha: float = 0.5
    steps: int = 1
    tau: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.alpha < 0 or self.steps < 1 or not self.tau > 0:
            raise ModelError("need alpha >= 0, steps >= 1, tau > 0")
        if self.variant == "fomaml":
            if self.head_w is None or self.head_b is None:
                raise ModelError("fomaml needs a linear head")
            if self.head_w.shape[0] != self.backbone.embed_dim or self.head_b.shape != (1, self.head_w.shape[1]):
                raise ModelError("head shapes do not match the backbone")

    @classmethod
    def create(cls, variant: str, widths: Sequence[int], rng: RngStream, ways: int = 5, **hyper) -> "MetaModel":
        backbone = Backbone.init(widths, rng.child("backbone"))
        head_w = head_b = None
        if variant == "fomaml":
            e = widths[-1]
            g = rng.child("head").generator()
            head_w = Tensor(g.standard_normal((e, ways)) * np.sqrt(1.0 / e), requires_grad=True)
            head_b = Tensor(np.zeros((1, ways)), requires_grad=True)
        return cls(variant, backbone, head_w, head_b, **hyper)

    def params(self) -> list[Tensor]:
        ps = self.backbone.params()
        if self.variant == "fomaml":
            ps += [self.head_w, self.head_b]
        return ps

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
            out += [(f"backbone.w{i}", w), (f"backbone.b{i}", b)]
        if self.variant == "fomaml":
            out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def copy(self) -> "MetaModel":
        return copy.deepcopy(self)

    def with_backbone(self, backbone: Backbone) -> "MetaModel":
        m = self.copy()
        m.backbone = backbone.copy()
        return m

    @property
    def ways(self) -> int | None:
        return None if self.head_w is None else self.head_w.shape[1]


def flatten_params(model_or_params) -> np.ndarray:
    params = model_or_params.params() if isinstance(model_or_params, MetaModel) else model_or_params
    return np.concatenate([np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64).ravel()
                           for p in params])


def model_space_loss(theta, theta_star) -> float:
    """Squared Euclidean distance between two flattened parameter vectors."""
    a = flatten_params(theta) if not isinstance(theta, np.ndarray) else theta.ravel()
    b = flatten_params(theta_star) if not isinstance(theta_star, np.ndarray) else theta_star.ravel()
    if a.shape != b.shape:
        raise ModelError(f"parameter vectors differ in length: {a.size} vs {b.size}")
    d = a - b
    return float(d @ d)


# ---------------------------------------------------------------------------
# heads


def _check_episode(ep: MetaExample) -> int:
    ways = ep.ways
    if ep.support_x.ndim != 2 or ep.val_x.ndim != 2 or ep.support_x.shape[1] != ep.val_x.shape[1]:
        raise ModelError("episode features must be 2-D with equal width")
    if len(np.unique(ep.support_y)) != ways or ep.support_y.min() < 0 or ep.support_y.max() >= ways:
        raise ModelError(f"support labels must cover 0..{ways - 1}")
    if len(ep.val_y) == 0 or ep.val_y.min() < 0 or ep.val_y.max() >= ways:
        raise ModelError("validation labels out of range")
    return ways


def _onehot(y: np.ndarray, ways: int) -> np.ndarray:
    out = np.zeros((len(y), ways))
    out[np.arange(len(y)), y] = 1.0
    return out


def protonet_scores(tape: Tape, support_emb: Tensor, support_y, query_emb: Tensor, ways: int) -> Tensor:
    """Negative squared distance from each query to each class-mean prototype."""
    protos = tape.class_means(support_emb, support_y, ways)
    return tape.scale(tape.sqdist(query_emb, protos), -1.0)


def matchnet_attention(tape: Tape, support_emb: Tensor, query_emb: Tensor, tau: float) -> Tensor:
    """Cosine similarity of every query to every support item, divided by ``tau``."""
    cos = tape.matmul(tape.normalize_rows(query_emb), tape.transpose(tape.normalize_rows(support_emb)))
    return tape.scale(cos, 1.0 / tau)


def matchnet_class_probs(tape: Tape, scores: Tensor, support_y, ways: int) -> Tensor:
    attn = tape.softmax_rows(scores)
    return tape.matmul(attn, Tensor(_onehot(np.asarray(support_y), ways)))


def _nll_of_probs(tape: Tape, probs: Tensor, y, ways: int) -> Tensor:
    picked = tape.matmul(tape.mul(probs, Tensor(_onehot(np.asarray(y), ways))), Tensor(np.ones((ways, 1))))
    return tape.scale(tape.mean(tape.log(picked)), -1.0)


def classifier_logits(tape: Tape, params: Sequence[Tensor], x) -> Tensor:
    """Backbone followed by a linear head; ``params`` is ``[w0, b0, ..., head_w, head_b]``."""
    trunk = params[:-2]
    emb = mlp_forward(tape, trunk[0::2], trunk[1::2], x)
    ones = Tensor(np.ones((emb.shape[0], 1)))
    return tape.add(tape.matmul(emb, params[-2]), tape.matmul(ones, params[-1]))


def _xent_loss(tape: Tape, params: Sequence[Tensor], x, y) -> Tensor:
    return tape.softmax_xent(classifier_logits(tape, params, x), y)


def fomaml_adapt(theta_init: Sequence, support_x, support_y, alpha: float, steps: int,
                 loss_fn: Callable[[Tape, Sequence[Tensor], np.ndarray, np.ndarray], Tensor] = _xent_loss
                 ) -> list[np.ndarray]:
    """``steps`` full-batch gradient-descent steps on the support loss.

    Returns the adapted parameter values; the caller decides how gradients
    flow through them (first-order: identity Jacobian).
    """
    if alpha < 0:
        raise ModelError(f"inner step size must be >= 0, got {alpha}")
    if steps < 1:
        raise ModelError(f"inner step count must be >= 1, got {steps}")
    theta = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in theta_init]
    for step in range(steps):
        leaves = [Tensor._from_op(t, True) for t in theta]
        tape = Tape()
        loss = loss_fn(tape, leaves, support_x, support_y)
        if not np.isfinite(loss.data).all():
            raise ModelError(f"non-finite support loss at inner step {step}")
        backward(tape, loss)
        theta = [t - alpha * (leaf.grad if leaf.grad is not None else 0.0) for t, leaf in zip(theta, leaves)]
        for t in theta:
            if not np.isfinite(t).all():
                raise ModelError(f"non-finite parameters after inner step {step}")
    return theta


def _fomaml_effective(tape: Tape, model: MetaModel, ep: MetaExample) -> list[Tensor]:
    """Adapted parameters as ``init + constant``: the first-order straight-through."""
    init = model.params()
    adapted = fomaml_adapt(init, ep.support_x, ep.support_y, model.alpha, model.steps)
    return [tape.add(p, Tensor._from_op(a - p.data, False)) for p, a in zip(init, adapted)]


@dataclass
class EpisodeOutput:
    loss: Tensor
    logits: np.ndarray  # raw scores used for Bag1 averaging
    probs: np.ndarray   # normalized class distribution

    @property
    def predictions(self) -> np.ndarray:
        return argmax_lowest(self.probs)


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest column."""
    return np.argmax(scores, axis=1)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def episode_forward(model: MetaModel, ep: MetaExample, tape: Tape | None = None) -> EpisodeOutput:
    tape = tape if tape is not None else Tape()
    ways = _check_episode(ep)
    if model.variant == "fomaml":
        if model.ways != ways:
            raise ModelError(f"fomaml head has {model.ways} outputs but episode is {ways}-way")
        eff = _fomaml_effective(tape, model, ep)
        logits = classifier_logits(tape, eff, ep.val_x)
        loss = tape.softmax_xent(logits, ep.val_y)
        return EpisodeOutput(loss, logits.data, _softmax_np(logits.data))
    n_sup, n_all = len(ep.support_y), len(ep.support_y) + len(ep.val_y)
    emb = backbone_forward(model.backbone, np.concatenate([ep.support_x, ep.val_x]), tape)
    sup = tape.take_rows(emb, 0, n_sup)
    qry = tape.take_rows(emb, n_sup, n_all)
    return _head_forward(tape, model, sup, ep.support_y, qry, ep.val_y, ways)


def _head_forward(tape, model, sup, support_y, qry, val_y, ways) -> EpisodeOutput:
    if model.variant == "protonet":
        logits = protonet_scores(tape, sup, support_y, qry, ways)
        return EpisodeOutput(tape.softmax_xent(logits, val_y), logits.data, _softmax_np(logits.data))
    scores = matchnet_attention(tape, sup, qry, model.tau)
    probs = matchnet_class_probs(tape, scores, support_y, ways)
    loss = _nll_of_probs(tape, probs, val_y, ways)
    support_y = np.asarray(support_y)
    class_scores = np.stack([scores.data[:, support_y == c].mean(axis=1) for c in range(ways)], axis=1)
    return EpisodeOutput(loss, class_scores, probs.data)


def episode_forward_from_embeddings(model: MetaModel, support_emb, support_y, query_emb, val_y,
                                    tape: Tape | None = None) -> EpisodeOutput:
    """ProtoNet/MatchNet head on given embeddings (used to probe invariances)."""
    if model.variant == "fomaml":
        raise ModelError("fomaml has no embedding-level head")
    tape = tape if tape is not None else Tape()
    support_y = np.asarray(support_y)
    ways = int(support_y.max()) + 1
    return _head_forward(tape, model, Tensor(support_emb), support_y, Tensor(query_emb), np.asarray(val_y), ways)


def protonet_logits(backbone: Backbone, ep: MetaExample) -> np.ndarray:
    return episode_forward(MetaModel("protonet", backbone), ep).logits


def matchnet_probs(backbone: Backbone, tau: float, ep: MetaExample) -> np.ndarray:
    return episode_forward(MetaModel("matchnet", backbone, tau=tau), ep).probs


def episode_loss(model: MetaModel, ep: MetaExample, tape: Tape | None = None) -> Tensor:
    """Mean validation cross-entropy of the classifier the model builds from the support set."""
    return episode_forward(model, ep, tape).loss


def predict(model: MetaModel, ep: MetaExample) -> np.ndarray:
    return episode_forward(model, ep).predictions


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def episode_accuracy(model: MetaModel, ep: MetaExample) -> float:
    return accuracy(predict(model, ep), ep.val_y)


# ---------------------------------------------------------------------------
# checkpoints


def model_to_text(model: MetaModel) -> str:
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION} variant={model.variant} "
             f"alpha={model.alpha!r} steps={model.steps} tau={model.tau!r}"]
    for name, p in model.named_params():
        lines.append(f"{name} " + ",".join(str(s) for s in p.shape))
        lines.append(",".join(repr(v) for v in p.data.ravel().tolist()))
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> MetaModel:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) < 2 or head[0] != MODEL_MAGIC:
        raise ModelError("not a model checkpoint")
    if head[1] != MODEL_VERSION:
        raise ModelError(f"unsupported checkpoint version {head[1]!r}")
    meta = dict(tok.split("=", 1) for tok in head[2:])
    blocks: dict[str, Tensor] = {}
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) % 2:
        raise ModelError("truncated parameter block")
    for spec_line, values in zip(body[0::2], body[1::2]):
        name, shape_s = spec_line.split()
        shape = tuple(int(s) for s in shape_s.split(","))
        data = np.array([float(v) for v in values.split(",")], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ModelError(f"block {name}: {data.size} values for shape {shape}")
        blocks[name] = Tensor(data.reshape(shape), requires_grad=True)
    n_layers = sum(1 for k in blocks if k.startswith("backbone.w"))
    backbone = Backbone([blocks[f"backbone.w{i}"] for i in range(n_layers)],
                        [blocks[f"backbone.b{i}"] for i in range(n_layers)])
    return MetaModel(meta["variant"], backbone, blocks.get("head.w"), blocks.get("head.b"),
                     alpha=float(meta.get("alpha", 0.5)), steps=int(meta.get("steps", 1)),
                     tau=float(meta.get("tau", 0.2)))


def save_model(model: MetaModel, path) -> None:
    Path(path).write_text(model_to_text(model))


def load_model(path) -> MetaModel:
    return model_from_text(Path(path).read_text())
