"""Synthetic class pools and episodic (N-way K-shot) sampling.

Pools are immutable collections of feature vectors tagged with a class id and
a domain id. Episodes draw ``ways`` classes, then ``shots`` support and
``val_per_class`` validation instances per class, without replacement.

All randomness flows through :class:`RngStream`, a seed plus a label path, so
every consumer gets an independent, reproducible numpy ``Generator``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

POOL_MAGIC = "metaepi-pool"
POOL_VERSION = "v1"


class PoolError(ValueError):
    """Raised for malformed pools, impossible sampling requests or bad files."""


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"negative rng label {label}")
        return int(label)
    return zlib.crc32(str(label).encode()) + (1 << 32)


@dataclass(frozen=True)
class RngStream:
    """A 64-bit seed plus a path of labels; children are independent streams."""

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(_label_key(x) for x in labels))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(self.seed), spawn_key=self.path)))


class Instance(NamedTuple):
    features: np.ndarray
    class_id: int
    domain_id: int


@dataclass(frozen=True, eq=False)
class ClassPool:
    """Feature vectors grouped by dense class ids ``0..C-1`` and domain ids."""

    features: np.ndarray
    class_ids: np.ndarray
    domain_ids: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        c = np.array(self.class_ids, dtype=np.int64)
        d = np.array(self.domain_ids, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] == 0:
            raise PoolError(f"features must be (n, d) with d >= 1, got {x.shape}")
        if c.shape != (x.shape[0],) or d.shape != (x.shape[0],):
            raise PoolError("class_ids and domain_ids must have one entry per instance")
        if not np.isfinite(x).all():
            raise PoolError("pool features must be finite")
        if x.shape[0] == 0:
            raise PoolError("empty pool")
        if c.min() < 0 or d.min() < 0:
            raise PoolError("ids must be non-negative")
        if len(np.unique(c)) != c.max() + 1:
            raise PoolError("class ids must be dense 0..C-1 with every class non-empty")
        for arr in (x, c, d):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "class_ids", c)
        object.__setattr__(self, "domain_ids", d)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.class_ids.max()) + 1

    @property
    def num_domains(self) -> int:
        return int(self.domain_ids.max()) + 1

    def __len__(self) -> int:
        return self.features.shape[0]

    def instance(self, i: int) -> Instance:
        return Instance(self.features[i], int(self.class_ids[i]), int(self.domain_ids[i]))

    @property
    def class_subs(self) -> np.ndarray | None:
        subs = self.metadata.get("class_subs")
        return None if subs is None else np.asarray(subs, dtype=np.int64)

    @cached_property
    def _groups(self) -> dict[tuple[int, int], np.ndarray]:
        order = np.lexsort((np.arange(len(self)), self.domain_ids, self.class_ids))
        keys = np.stack([self.class_ids[order], self.domain_ids[order]], axis=1)
        groups: dict[tuple[int, int], np.ndarray] = {}
        if len(order):
            cuts = np.flatnonzero((keys[1:] != keys[:-1]).any(axis=1)) + 1
            for chunk in np.split(order, cuts):
                groups[(int(self.class_ids[chunk[0]]), int(self.domain_ids[chunk[0]]))] = chunk
        return groups

    def indices(self, class_id: int, domain_id: int | None = None) -> np.ndarray:
        """Instance indices of one class (optionally one domain), ascending."""
        if domain_id is not None:
            return self._groups.get((class_id, domain_id), np.empty(0, dtype=np.int64))
        return np.flatnonzero(self.class_ids == class_id)

    @cached_property
    def _counts(self) -> np.ndarray:
        counts = np.zeros((self.num_classes, self.num_domains), dtype=np.int64)
        np.add.at(counts, (self.class_ids, self.domain_ids), 1)
        return counts

    def counts(self) -> np.ndarray:
        """``(C, D)`` matrix of instance counts per class and domain."""
        return self._counts

    # -- serialization ----------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{POOL_MAGIC} {POOL_VERSION} dim={self.feature_dim} "
                 f"classes={self.num_classes} domains={self.num_domains}"]
        if self.metadata:
            lines.append("#meta " + json.dumps(self.metadata, sort_keys=True))
        for row, c, d in zip(self.features.tolist(), self.class_ids.tolist(), self.domain_ids.tolist()):
            lines.append(f"{c},{d}," + ",".join(repr(v) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassPool":
        lines = text.splitlines()
        if not lines:
            raise PoolError("empty pool file")
        head = lines[0].split()
        if len(head) < 2 or head[0] != POOL_MAGIC:
            raise PoolError(f"not a pool file: {lines[0][:60]!r}")
        if head[1] != POOL_VERSION:
            raise PoolError(f"unsupported pool version {head[1]!r}")
        fields = dict(tok.split("=", 1) for tok in head[2:])
        dim = int(fields["dim"])
        metadata: dict = {}
        rows, cids, dids = [], [], []
        for ln, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.startswith("#meta "):
                metadata = json.loads(line[6:])
                continue
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise PoolError(f"line {ln}: expected {dim + 2} fields, got {len(parts)}")
            cids.append(int(parts[0]))
            dids.append(int(parts[1]))
            rows.append([float(v) for v in parts[2:]])
        pool = cls(np.array(rows, dtype=np.float64).reshape(-1, dim), np.array(cids), np.array(dids), metadata)
        if pool.num_classes != int(fields["classes"]) or pool.num_domains != int(fields["domains"]):
            raise PoolError("header class/domain counts disagree with the data")
        return pool


def write_pool(pool: ClassPool, path) -> None:
    Path(path).write_text(pool.to_text())


def read_pool(path) -> ClassPool:
    return ClassPool.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# generators


def _check_counts(**counts):
    for name, v in counts.items():
        if int(v) < 1:
            raise PoolError(f"{name} must be >= 1, got {v}")


def _signal_mask(dim: int, signal_dims: int | None) -> np.ndarray:
    k = dim if signal_dims is None else int(signal_dims)
    if not 1 <= k <= dim:
        raise PoolError(f"signal_dims must lie in [1, {dim}], got {k}")
    mask = np.zeros(dim)
    mask[:k] = 1.0
    return mask


def _draw_classes(g: np.random.Generator, num_classes: int, n: int,
                  mean_scale: np.ndarray, noise_scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    d = mean_scale.shape[0]
    means = offset + g.standard_normal((num_classes, d)) * mean_scale
    x = means[:, None, :] + g.standard_normal((num_classes, n, d)) * noise_scale
    return x.reshape(num_classes * n, d)


def make_gaussian_pool(num_classes: int, dim: int, instances_per_class: int, class_spread: float,
                       within_spread: float, rng: RngStream, *, signal_dims: int | None = None,
                       noise_spread: float | None = None, modes_per_class: int = 1,
                       mode_spread: float = 0.0) -> ClassPool:
    """Isotropic Gaussian classes.

    Class means are ``class_spread * N(0, I)`` and instances are drawn around
    their mean with standard deviation ``within_spread``. When ``signal_dims``
    is given, class means vary only in the first ``signal_dims`` coordinates
    and the remaining (nuisance) coordinates carry within-class noise of
    standard deviation ``noise_spread`` (default ``within_spread``).

    ``modes_per_class > 1`` makes each class a mixture: instance ``i`` of a
    class sits around mode ``i % modes_per_class``, and each mode is shifted
    from the class mean by ``mode_spread * N(0, I)`` in the signal coordinates.
    """
    if int(dim) < 1:
        raise PoolError("dim must be >= 1")
    _check_counts(num_classes=num_classes, instances_per_class=instances_per_class)
    if not class_spread > 0 or within_spread < 0:
        raise PoolError("class_spread must be > 0 and within_spread >= 0")
    if int(modes_per_class) < 1 or mode_spread < 0:
        raise PoolError("modes_per_class must be >= 1 and mode_spread >= 0")
    mask = _signal_mask(dim, signal_dims)
    nuisance = within_spread if noise_spread is None else noise_spread
    x = _draw_classes(rng.child("sub", 0).generator(), num_classes, instances_per_class,
                      class_spread * mask, within_spread * mask + nuisance * (1 - mask), np.zeros(dim))
    if modes_per_class > 1:
        shifts = rng.child("modes").generator().standard_normal((num_classes, modes_per_class, dim))
        mode_of = np.arange(instances_per_class) % modes_per_class
        x = x + (shifts[:, mode_of, :] * (mode_spread * mask)).reshape(x.shape)
    return ClassPool(x, np.repeat(np.arange(num_classes), instances_per_class), np.zeros(len(x), dtype=np.int64),
                     {"generator": "gaussian", "seed": rng.seed})


def make_heterogeneous_pool(num_subdistributions: int, classes_per_sub: int, dim: int,
                            instances_per_class: int, class_spread: float, within_spread: float,
                            rng: RngStream, *, sub_offset: float = 3.0, scale_spread: float = 0.5,
                            signal_dims: int | None = None, noise_spread: float | None = None) -> ClassPool:
    """Classes drawn from several sub-distributions with distinct signatures.

    Sub-distribution ``s`` gets a mean offset (``sub_offset * N(0, I)``,
    centred across subs) and per-coordinate log-normal scale vectors for the
    class-mean spread and the within-class spread (log-scales centred across
    subs). With a single sub-distribution the offset is zero, the scales are
    one and the result is bitwise equal to :func:`make_gaussian_pool`.
    Each class's sub id is stored in ``metadata["class_subs"]``.
    """
    if int(num_subdistributions) < 1:
        raise PoolError("need at least one sub-distribution")
    if int(dim) < 1:
        raise PoolError("dim must be >= 1")
    _check_counts(classes_per_sub=classes_per_sub, instances_per_class=instances_per_class)
    if not class_spread > 0 or within_spread < 0:
        raise PoolError("class_spread must be > 0 and within_spread >= 0")
    S = int(num_subdistributions)
    mask = _signal_mask(dim, signal_dims)
    nuisance = within_spread if noise_spread is None else noise_spread
    sig = rng.child("signature").generator()
    offsets = sig.standard_normal((S, dim)) * sub_offset
    offsets -= offsets.mean(axis=0)
    log_mean = sig.standard_normal((S, dim)) * scale_spread
    log_mean -= log_mean.mean(axis=0)
    log_noise = sig.standard_normal((S, dim)) * scale_spread
    log_noise -= log_noise.mean(axis=0)
    blocks = []
    for s in range(S):
        blocks.append(_draw_classes(
            rng.child("sub", s).generator(), classes_per_sub, instances_per_class,
            class_spread * mask * np.exp(log_mean[s]),
            (within_spread * mask + nuisance * (1 - mask)) * np.exp(log_noise[s]),
            offsets[s]))
    x = np.concatenate(blocks, axis=0)
    C = S * classes_per_sub
    meta = {"generator": "heterogeneous" if S > 1 else "gaussian", "seed": rng.seed}
    if S > 1:
        meta["class_subs"] = np.repeat(np.arange(S), classes_per_sub).tolist()
    return ClassPool(x, np.repeat(np.arange(C), instances_per_class), np.zeros(len(x), dtype=np.int64), meta)


def make_two_domain_pool(base: ClassPool, A, b, noise: float, rng: RngStream) -> ClassPool:
    """Pair every base instance with a domain-1 copy ``A x + b + noise * N(0, I)``."""
    if base.num_domains != 1:
        raise PoolError("base pool must be single-domain")
    d = base.feature_dim
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if A.shape != (d, d) or b.shape != (d,):
        raise PoolError(f"transform must be A:({d},{d}), b:({d},); got {A.shape}, {b.shape}")
    if not np.isfinite(A).all() or not np.isfinite(b).all() or noise < 0:
        raise PoolError("transform must be finite with noise >= 0")
    if np.linalg.cond(A) > 1e12:
        raise PoolError("domain transform matrix is singular or ill-conditioned")
    shifted = base.features @ A.T + b
    if noise > 0:
        shifted = shifted + noise * rng.generator().standard_normal(shifted.shape)
    meta = dict(base.metadata)
    meta["generator"] = f"two-domain({base.metadata.get('generator', '?')})"
    return ClassPool(np.concatenate([base.features, shifted]),
                     np.concatenate([base.class_ids, base.class_ids]),
                     np.concatenate([np.zeros(len(base), dtype=np.int64), np.ones(len(base), dtype=np.int64)]),
                     meta)


def subsample_pool(pool: ClassPool, keep_classes: int | None, keep_instances_per_class: int | None,
                   rng: RngStream) -> ClassPool:
    """Uniformly keep some classes and some instances per (class, domain).

    Kept classes are re-numbered in ascending order of their old ids and
    instances keep their relative order, so keeping everything returns an
    identical pool. ``metadata["class_origin"]`` maps new ids to the ids of the
    pool's root ancestor.
    """
    C = pool.num_classes
    k = C if keep_classes is None else int(keep_classes)
    if not 1 <= k <= C:
        raise PoolError(f"cannot keep {k} classes out of {C}")
    g = rng.generator()
    kept = np.arange(C) if k == C else np.sort(g.choice(C, size=k, replace=False))
    counts = pool.counts()[kept]
    if keep_instances_per_class is not None:
        n = int(keep_instances_per_class)
        smallest = counts[counts > 0].min()
        if not 1 <= n <= smallest:
            raise PoolError(f"cannot keep {n} instances per class; smallest class/domain group has {smallest}")
    picked = []
    for c in kept:
        for dom in range(pool.num_domains):
            idx = pool.indices(int(c), dom)
            if len(idx) == 0:
                continue
            if keep_instances_per_class is not None and keep_instances_per_class < len(idx):
                idx = idx[np.sort(g.choice(len(idx), size=int(keep_instances_per_class), replace=False))]
            picked.append(idx)
    sel = np.sort(np.concatenate(picked))
    remap = np.full(C, -1, dtype=np.int64)
    remap[kept] = np.arange(k)
    meta = dict(pool.metadata)
    origin = meta.get("class_origin")
    meta["class_origin"] = [int(origin[c]) if origin is not None else int(c) for c in kept]
    if "class_subs" in meta:
        meta["class_subs"] = [int(meta["class_subs"][c]) for c in kept]
    return ClassPool(pool.features[sel], remap[pool.class_ids[sel]], pool.domain_ids[sel], meta)


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int
    shots: int
    val_per_class: int
    source_domain: int = 0
    target_domain: int = 0

    def __post_init__(self):
        if self.ways < 2 or self.shots < 1 or self.val_per_class < 1:
            raise PoolError(f"invalid episode spec: need ways >= 2, shots >= 1, val >= 1; got {self}")

    @property
    def cross_domain(self) -> bool:
        return self.source_domain != self.target_domain


@dataclass(frozen=True, eq=False)
class MetaExample:
    """One task: a support set, a validation set and the class remap.

    Episode label ``i`` corresponds to pool class ``class_ids[i]``; class ids
    are sorted ascending.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    class_ids: np.ndarray
    support_index: np.ndarray
    val_index: np.ndarray
    source_domain: int = 0
    target_domain: int = 0

    @property
    def ways(self) -> int:
        return len(self.class_ids)

    @classmethod
    def from_arrays(cls, support_x, support_y, val_x, val_y) -> "MetaExample":
        """Build a hand-made episode (no pool behind it)."""
        sy = np.asarray(support_y, dtype=np.int64)
        vy = np.asarray(val_y, dtype=np.int64)
        sx = np.asarray(support_x, dtype=np.float64)
        vx = np.asarray(val_x, dtype=np.float64)
        ways = int(max(sy.max(), vy.max())) + 1
        return cls(sx, sy, vx, vy, np.arange(ways), np.arange(len(sy)), len(sy) + np.arange(len(vy)))


def _same_domain_split(g: np.random.Generator, idx: np.ndarray, k: int, m: int):
    picks = idx[g.choice(len(idx), size=k + m, replace=False)]
    return picks[:k], picks[k:]


def _cross_domain_split(g: np.random.Generator, src: np.ndarray, tgt: np.ndarray, k: int, m: int):
    if src is tgt or np.array_equal(src, tgt):
        return _same_domain_split(g, src, k, m)
    return src[g.choice(len(src), size=k, replace=False)], tgt[g.choice(len(tgt), size=m, replace=False)]


def _eligible_classes(pool: ClassPool, spec: EpisodeSpec, restrict_sub: int | None,
                      skip_short: bool = False) -> np.ndarray:
    C = pool.num_classes
    classes = np.arange(C)
    if restrict_sub is not None:
        subs = pool.class_subs
        if subs is None:
            raise PoolError("pool has no sub-distribution tags to restrict on")
        classes = classes[subs == restrict_sub]
    if skip_short:
        counts = pool.counts()
        if spec.cross_domain:
            ok = (counts[classes, spec.source_domain] >= spec.shots) & (counts[classes, spec.target_domain] >= spec.val_per_class)
        else:
            ok = counts[classes, spec.source_domain] >= spec.shots + spec.val_per_class
        classes = classes[ok]
    if len(classes) < spec.ways:
        raise PoolError(f"need {spec.ways} classes but only {len(classes)} available"
                        + (f" in sub-distribution {restrict_sub}" if restrict_sub is not None else ""))
    counts = pool.counts()
    for dom in {spec.source_domain, spec.target_domain}:
        if dom >= pool.num_domains:
            raise PoolError(f"domain {dom} not present (pool has {pool.num_domains})")
    if spec.cross_domain:
        short_s = classes[counts[classes, spec.source_domain] < spec.shots]
        short_t = classes[counts[classes, spec.target_domain] < spec.val_per_class]
        if len(short_s) or len(short_t):
            c = int(short_s[0]) if len(short_s) else int(short_t[0])
            raise PoolError(f"class {c} lacks instances: need {spec.shots} in domain {spec.source_domain} "
                            f"and {spec.val_per_class} in domain {spec.target_domain}")
    else:
        need = spec.shots + spec.val_per_class
        short = classes[counts[classes, spec.source_domain] < need]
        if len(short):
            c = int(short[0])
            raise PoolError(f"class {c} has {counts[c, spec.source_domain]} instances in domain "
                            f"{spec.source_domain}; episode needs {need} (shots + val_per_class)")
    return classes


def sample_episode(pool, spec: EpisodeSpec, rng: RngStream, restrict_sub: int | None = None,
                   skip_short: bool = False) -> MetaExample:
    """Sample one meta labeled example from ``pool``.

    Cross-domain specs draw the support set from ``spec.source_domain`` and
    the validation set from ``spec.target_domain`` (same classes). By default
    a class too small for the episode is an error; ``skip_short`` leaves such
    classes out of the draw instead (used for K-means subcategories).
    """
    if isinstance(pool, TrialPool):
        return pool.sample_episode(spec, rng, restrict_sub)
    classes = _eligible_classes(pool, spec, restrict_sub, skip_short)
    g = rng.generator()
    chosen = np.sort(classes[g.choice(len(classes), size=spec.ways, replace=False)])
    sup, val = [], []
    for c in chosen:
        src = pool.indices(int(c), spec.source_domain)
        if spec.cross_domain:
            s, v = _cross_domain_split(g, src, pool.indices(int(c), spec.target_domain), spec.shots, spec.val_per_class)
        else:
            s, v = _same_domain_split(g, src, spec.shots, spec.val_per_class)
        sup.append(s)
        val.append(v)
    sup_idx = np.concatenate(sup)
    val_idx = np.concatenate(val)
    labels = np.arange(spec.ways)
    return MetaExample(
        support_x=pool.features[sup_idx], support_y=np.repeat(labels, spec.shots),
        val_x=pool.features[val_idx], val_y=np.repeat(labels, spec.val_per_class),
        class_ids=chosen, support_index=sup_idx, val_index=val_idx,
        source_domain=spec.source_domain, target_domain=spec.target_domain)


def sample_task(pool, spec: EpisodeSpec, rng: RngStream, by_sub: bool = False) -> MetaExample:
    """:func:`sample_episode`, optionally confined to one uniformly drawn sub-distribution."""
    if not by_sub:
        return sample_episode(pool, spec, rng)
    base = pool.trials[0] if isinstance(pool, TrialPool) else pool
    if base.class_subs is None:
        raise PoolError("by_sub sampling needs a pool with sub-distribution tags")
    subs = np.unique(base.class_subs)
    sub = int(subs[rng.child("sub").generator().integers(len(subs))])
    return sample_episode(pool, spec, rng, restrict_sub=sub)


@dataclass(frozen=True, eq=False)
class TrialPool:
    """Several relabelings of the same instances; episodes pick a trial first."""

    trials: Sequence[ClassPool]
    metadata: dict = field(default_factory=dict)
    skip_short: bool = True

    def __post_init__(self):
        if not self.trials:
            raise PoolError("TrialPool needs at least one trial")

    @property
    def num_classes(self) -> int:
        return self.trials[0].num_classes

    @property
    def feature_dim(self) -> int:
        return self.trials[0].feature_dim

    def sample_episode(self, spec: EpisodeSpec, rng: RngStream, restrict_sub: int | None = None) -> MetaExample:
        t = int(rng.child("trial").generator().integers(len(self.trials)))
        return sample_episode(self.trials[t], spec, rng.child("episode"), restrict_sub,
                              skip_short=self.skip_short)


def select_classes(pool: ClassPool, classes: Sequence[int]) -> ClassPool:
    """Sub-pool with the given classes (renumbered in the given order)."""
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size == 0:
        raise PoolError("class selection is empty")
    if len(np.unique(classes)) != len(classes) or classes.min() < 0 or classes.max() >= pool.num_classes:
        raise PoolError("class selection must be distinct, valid class ids")
    remap = np.full(pool.num_classes, -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    sel = np.flatnonzero(remap[pool.class_ids] >= 0)
    meta = dict(pool.metadata)
    origin = meta.get("class_origin")
    meta["class_origin"] = [int(origin[c]) if origin is not None else int(c) for c in classes]
    if "class_subs" in meta:
        meta["class_subs"] = [int(meta["class_subs"][c]) for c in classes]
    return ClassPool(pool.features[sel], remap[pool.class_ids[sel]], pool.domain_ids[sel], meta)


def split_pool(pool: ClassPool, sizes: Sequence[int], rng: RngStream, *, stratify_subs: bool = False
               ) -> list[ClassPool]:
    """Partition the classes into disjoint pools (e.g. meta-train/val/test).

    With ``stratify_subs`` each sub-distribution is split in the same
    proportions, so every part sees every sub-distribution.
    """
    if sum(sizes) > pool.num_classes:
        raise PoolError(f"split sizes {list(sizes)} exceed {pool.num_classes} classes")
    g = rng.generator()
    if not stratify_subs or pool.class_subs is None:
        order = g.permutation(pool.num_classes)
        cuts = np.cumsum([0] + list(sizes))
        return [select_classes(pool, np.sort(order[a:b])) for a, b in zip(cuts[:-1], cuts[1:])]
    subs = pool.class_subs
    groups = [g.permutation(np.flatnonzero(subs == s)) for s in np.unique(subs)]
    parts = []
    offset = 0
    for size in sizes:
        per = size // len(groups)
        if per * len(groups) != size:
            raise PoolError("stratified split sizes must divide evenly across sub-distributions")
        parts.append(np.sort(np.concatenate([grp[offset:offset + per] for grp in groups])))
        offset += per
    return [select_classes(pool, p) for p in parts]
