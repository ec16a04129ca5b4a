"""Experiment configuration, recipes and CSV result emission."""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.linalg import expm

from .metamodels import MetaModel
from .metatrain import (EvalReport, TrainConfig, evaluate_meta_model, evaluate_predictor, meta_train)
from .taskgen import (ClassPool, EpisodeSpec, MetaExample, RngStream, make_gaussian_pool,
                      make_heterogeneous_pool, make_two_domain_pool, split_pool, subsample_pool)
from .techniques import (MetaKnnConfig, build_task_index, ensemble_predict, kmeans_augment_pool,
                         meta_knn_adapt, pretrain_backbone, train_bag, train_multiobjective)

logger = logging.getLogger(__name__)

SCHEMA = "metaepi-experiment/v1"
EXPERIMENTS = ("gen-curve", "techniques", "bagging", "augment", "metaknn", "domainshift", "single-run")
METRICS = frozenset({"meta_train_acc", "meta_train_loss", "meta_test_acc", "meta_val_acc", "ci_halfwidth"})
CSV_HEADER = ("experiment", "seed", "setting", "metric", "value")

# source/target domains of (meta-train episodes, meta-test episodes)
DOMAIN_CASES = {
    "I-1": ((0, 0), (0, 0)),
    "I-2": ((1, 0), (1, 0)),
    "I-3": ((0, 0), (1, 0)),
    "I-4": ((1, 1), (1, 0)),
}


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PoolSection(_Section):
    generator: Literal["gaussian", "heterogeneous", "two-domain"] = "gaussian"
    classes: int = Field(96, ge=1)
    dim: int = Field(16, ge=1)
    instances_per_class: int = Field(40, ge=1)
    class_spread: float = Field(1.0, gt=0)
    within_spread: float = Field(0.6, ge=0)
    signal_dims: int | None = 6
    noise_spread: float | None = 1.5
    modes_per_class: int = Field(1, ge=1)
    mode_spread: float = Field(0.0, ge=0)
    subdistributions: int = Field(1, ge=1)
    sub_offset: float = 3.0
    scale_spread: float = 0.5
    rotation: float = Field(0.5, ge=0)
    offset: float = 1.0
    domain_noise: float = Field(0.3, ge=0)
    split: list[int] = [64, 16, 16]

    @model_validator(mode="after")
    def _check(self):
        if len(self.split) != 3 or min(self.split) < 1:
            raise ValueError("split must list meta-train, meta-val and meta-test class counts")
        if self.signal_dims is not None and not 1 <= self.signal_dims <= self.dim:
            raise ValueError(f"signal_dims must lie in [1, {self.dim}]")
        if sum(self.split) > self.classes:
            raise ValueError(f"split {self.split} exceeds {self.classes} classes")
        if self.generator == "heterogeneous" and self.classes % self.subdistributions:
            raise ValueError("classes must divide evenly across sub-distributions")
        return self


class EpisodeSection(_Section):
    ways: int = Field(5, ge=1)
    shots: int = Field(1, ge=1)
    val_per_class: int = Field(15, ge=1)

    def spec(self, source: int = 0, target: int = 0) -> EpisodeSpec:
        return EpisodeSpec(self.ways, self.shots, self.val_per_class, source, target)


class ModelSection(_Section):
    hidden: list[int] = [64, 32]
    alpha: float = Field(0.5, ge=0)
    steps: int = Field(1, ge=1)
    tau: float = Field(0.2, gt=0)

    @field_validator("hidden")
    @classmethod
    def _nonempty(cls, v):
        if not v or min(v) < 1:
            raise ValueError("hidden widths must be a non-empty list of positive ints")
        return v


class TrainSection(_Section):
    epochs: int = Field(5, ge=0)
    episodes_per_epoch: int = Field(200, ge=1)
    episodes_per_meta_batch: int = Field(4, ge=1)
    lr: float = Field(2e-3, ge=0)
    optimizer: Literal["adam", "sgd"] = "adam"


class TechniqueSection(_Section):
    pretrain_epochs: int = Field(5, ge=0)
    multi_lambda: float = Field(1.0, ge=0)
    bags: int = Field(10, ge=1)
    classes_per_bag: int = Field(48, ge=1)
    augment_ks: list[int] = [1, 2, 4, 8]
    augment_trials: int = Field(10, ge=1)
    augment_features: Literal["pretrained", "identity"] = "pretrained"
    knn_k: int = Field(20, ge=1)
    knn_epochs: int = Field(1, ge=0)
    knn_step: float = Field(2e-3, gt=0)
    knn_tasks: int = Field(1000, ge=1)


class GridSection(_Section):
    instances_per_class: list[int] = [10, 50, 200]
    classes: list[int] = [8, 16, 32]


class ExperimentConfig(_Section):
    schema_: str = Field(alias="schema")
    experiment: Literal["gen-curve", "techniques", "bagging", "augment", "metaknn", "domainshift", "single-run"]
    seeds: list[int] = [0, 1, 2, 3, 4]
    eval_episodes: int = Field(500, ge=1)
    variant: Literal["protonet", "matchnet", "fomaml"] = "protonet"
    pool: PoolSection = PoolSection()
    episode: EpisodeSection = EpisodeSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    techniques: TechniqueSection = TechniqueSection()
    grid: GridSection = GridSection()
    domain_cases: list[str] = list(DOMAIN_CASES)

    @model_validator(mode="after")
    def _check(self):
        if self.schema_ != SCHEMA:
            raise ValueError(f"unsupported schema {self.schema_!r}; expected {SCHEMA!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        unknown = set(self.domain_cases) - set(DOMAIN_CASES)
        if unknown:
            raise ValueError(f"unknown domain cases {sorted(unknown)}")
        return self

    def widths(self) -> list[int]:
        return [self.pool.dim, *self.model.hidden]

    def train_config(self, seed: int, spec: EpisodeSpec | None = None, by_sub: bool = False) -> TrainConfig:
        t = self.train
        return TrainConfig(spec or self.episode.spec(), t.epochs, t.episodes_per_epoch,
                           t.episodes_per_meta_batch, t.lr, t.optimizer, seed, by_sub)


# desk-scale defaults per recipe; a config file only needs to override what differs
RECIPE_DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-curve": {
        "pool": {"classes": 104, "dim": 32, "signal_dims": 8, "instances_per_class": 200, "split": [64, 8, 32]},
        "model": {"hidden": [128, 64]},
        "episode": {"val_per_class": 5},
        "train": {"epochs": 10},
    },
    "techniques": {},
    "bagging": {},
    "augment": {
        "pool": {"classes": 40, "instances_per_class": 60, "within_spread": 0.4, "signal_dims": 12,
                 "noise_spread": 1.0, "modes_per_class": 4, "mode_spread": 1.0, "split": [10, 10, 20]},
        "episode": {"ways": 10, "val_per_class": 5},
        "techniques": {"pretrain_epochs": 10},
    },
    "metaknn": {
        "pool": {"generator": "heterogeneous", "classes": 100, "subdistributions": 5, "scale_spread": 0.3,
                 "split": [50, 25, 25]},
    },
    "domainshift": {
        "pool": {"generator": "two-domain", "classes": 65, "split": [25, 15, 25]},
        "episode": {"val_per_class": 5},
    },
    "single-run": {},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    """Desk-scale defaults for ``experiment``, with optional nested overrides."""
    return config_from_dict(_merge({"schema": SCHEMA, "experiment": experiment}, overrides))


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    if "schema" not in doc:
        raise ConfigError(f"config lacks the mandatory 'schema: {SCHEMA}' entry")
    if doc["schema"] != SCHEMA:
        raise ConfigError(f"unsupported schema {doc['schema']!r}; expected {SCHEMA!r}")
    exp = doc.get("experiment")
    if exp not in RECIPE_DEFAULTS:
        raise ConfigError(f"unknown experiment id {exp!r}; expected one of {', '.join(EXPERIMENTS)}")
    try:
        return ExperimentConfig.model_validate(_merge(RECIPE_DEFAULTS[exp], doc))
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"{loc}: {first['msg']}") from None


def load_config(path) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment file; ``schema`` must be the first key."""
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e.__class__.__name__})") from None
    if isinstance(doc, dict) and doc and next(iter(doc)) != "schema":
        raise ConfigError(f"{path}: 'schema' must be the first entry")
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# records and CSV


@dataclass(frozen=True)
class ResultRecord:
    experiment: str
    seed: int
    setting: str
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if "," in self.setting or "\n" in self.setting:
            raise ValueError("setting must not contain commas or newlines")

    def sort_key(self):
        return (self.experiment, self.setting, self.seed, self.metric)


def setting_key(**items) -> str:
    return ";".join(f"{k}={v}" for k, v in items.items())


def parse_setting(setting: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in setting.split(";")) if setting else {}


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=ResultRecord.sort_key):
        w.writerow([r.experiment, r.seed, r.setting, r.metric, repr(float(r.value))])
    return buf.getvalue()


def records_from_csv(text: str) -> list[ResultRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError("not a results CSV (bad header)")
    return [ResultRecord(e, int(s), st, m, float(v)) for e, s, st, m, v in rows[1:]]


def emit_csv(records, path) -> None:
    try:
        Path(path).write_text(records_to_csv(records))
    except OSError as e:
        raise ExperimentError(f"cannot write {path}: {e.strerror}") from None


def parse_csv(path) -> list[ResultRecord]:
    return records_from_csv(Path(path).read_text())


# ---------------------------------------------------------------------------
# pools


def domain_transform(dim: int, rotation: float, offset: float, rng: RngStream):
    """Rotation ``expm(rotation * S)`` for a random skew-symmetric ``S``, plus a Gaussian offset."""
    g = rng.generator()
    m = g.standard_normal((dim, dim))
    return expm(rotation * (m - m.T) / 2), offset * g.standard_normal(dim)


def build_pool(section: PoolSection, rng: RngStream) -> ClassPool:
    p = section
    common = dict(signal_dims=p.signal_dims, noise_spread=p.noise_spread)
    if p.generator == "heterogeneous":
        return make_heterogeneous_pool(p.subdistributions, p.classes // p.subdistributions, p.dim,
                                       p.instances_per_class, p.class_spread, p.within_spread, rng,
                                       sub_offset=p.sub_offset, scale_spread=p.scale_spread, **common)
    pool = make_gaussian_pool(p.classes, p.dim, p.instances_per_class, p.class_spread, p.within_spread, rng,
                              modes_per_class=p.modes_per_class, mode_spread=p.mode_spread, **common)
    if p.generator == "two-domain":
        A, b = domain_transform(p.dim, p.rotation, p.offset, rng.child("transform"))
        pool = make_two_domain_pool(pool, A, b, p.domain_noise, rng.child("domain-noise"))
    return pool


def build_splits(cfg: ExperimentConfig, root: RngStream) -> tuple[ClassPool, ClassPool, ClassPool]:
    pool = build_pool(cfg.pool, root.child("pool"))
    stratify = cfg.pool.generator == "heterogeneous"
    train, val, test = split_pool(pool, cfg.pool.split, root.child("split"), stratify_subs=stratify)
    return train, val, test


# ---------------------------------------------------------------------------
# recipes

Hook = Callable[[str, str, MetaExample], None]


class _Recorder:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg, self.seed, self.records = cfg, seed, []

    def add(self, setting: str, metric: str, value: float) -> None:
        self.records.append(ResultRecord(self.cfg.experiment, self.seed, setting, metric, float(value)))

    def report(self, setting: str, metric: str, rep: EvalReport) -> None:
        self.add(setting, metric, rep.mean)
        if metric == "meta_test_acc":
            self.add(setting, "ci_halfwidth", rep.ci95)


def _model(cfg: ExperimentConfig, root: RngStream) -> MetaModel:
    m = cfg.model
    return MetaModel.create(cfg.variant, cfg.widths(), root.child("model"), ways=cfg.episode.ways,
                            alpha=m.alpha, steps=m.steps, tau=m.tau)


def _eval(cfg, model, pool, seed, spec=None, **kw) -> EvalReport:
    return evaluate_meta_model(model, pool, spec or cfg.episode.spec(), cfg.eval_episodes, seed, **kw)


def _train_and_report(cfg, rec, setting, model, train_pool, test_pool, seed, *, multi_rng=None):
    tc = cfg.train_config(seed)
    if multi_rng is not None:
        trained, curve = train_multiobjective(model, train_pool, tc, multi_rng, lam=cfg.techniques.multi_lambda)
    else:
        trained, curve = meta_train(model, train_pool, tc)
    if curve:
        rec.add(setting, "meta_train_loss", curve[-1].meta_train_loss)
    rec.report(setting, "meta_train_acc", _eval(cfg, trained, train_pool, seed))
    rec.report(setting, "meta_test_acc", _eval(cfg, trained, test_pool, seed))
    return trained


def _single_run(cfg, seed, root, rec, hook):
    train, _, test = build_splits(cfg, root)
    _train_and_report(cfg, rec, setting_key(variant=cfg.variant), _model(cfg, root), train, test, seed)


def _gen_curve(cfg, seed, root, rec, hook):
    train, _, test = build_splits(cfg, root)
    model = _model(cfg, root)
    for n in cfg.grid.instances_per_class:
        sub = subsample_pool(train, None, n, root.child("instances", n))
        _train_and_report(cfg, rec, setting_key(grid="instances", value=n), model, sub, test, seed)
    for c in cfg.grid.classes:
        sub = subsample_pool(train, c, None, root.child("classes", c))
        _train_and_report(cfg, rec, setting_key(grid="classes", value=c), model, sub, test, seed)


def _pretrained(cfg, model, train, root):
    backbone, _ = pretrain_backbone(train, model.backbone, cfg.techniques.pretrain_epochs, root.child("pretrain"))
    return backbone


def _techniques(cfg, seed, root, rec, hook):
    train, _, test = build_splits(cfg, root)
    model = _model(cfg, root)
    _train_and_report(cfg, rec, setting_key(method="scratch"), model, train, test, seed)
    pre = model.with_backbone(_pretrained(cfg, model, train, root))
    _train_and_report(cfg, rec, setting_key(method="pretrain"), pre, train, test, seed)
    _train_and_report(cfg, rec, setting_key(method="multiobjective"), model, train, test, seed,
                      multi_rng=root.child("multiobjective"))


def _bagging(cfg, seed, root, rec, hook):
    train, _, test = build_splits(cfg, root)
    model = _model(cfg, root)
    t = cfg.techniques
    spec = cfg.episode.spec()
    bases = {0: model, 1: model.with_backbone(_pretrained(cfg, model, train, root))}
    for pre, base in bases.items():
        single, _ = meta_train(base, train, cfg.train_config(seed))
        rec.report(setting_key(method="single", pretrain=pre), "meta_test_acc", _eval(cfg, single, test, seed))
        bag = train_bag(train, t.bags, t.classes_per_bag, base, cfg.train_config(seed), root.child("bags"))
        members = [_eval(cfg, m, test, seed) for m in bag.members]
        rec.add(setting_key(method="average", pretrain=pre), "meta_test_acc", float(np.mean([r.mean for r in members])))
        for mode in ("bag1", "bag2"):
            ens = bag.with_mode(mode)
            rep = evaluate_predictor(lambda ep, ens=ens: ensemble_predict(ens, ep)[1], test, spec,
                                     cfg.eval_episodes, seed)
            rec.report(setting_key(method=mode, pretrain=pre), "meta_test_acc", rep)


def _augment(cfg, seed, root, rec, hook):
    train, _, test = build_splits(cfg, root)
    if train.num_classes != cfg.episode.ways:
        raise ExperimentError(f"augment needs a meta-train pool with exactly {cfg.episode.ways} classes "
                              f"(every episode reuses the same classes); got {train.num_classes}")
    model = _model(cfg, root)
    t = cfg.techniques
    features = _pretrained(cfg, model, train, root) if t.augment_features == "pretrained" else None
    for k in t.augment_ks:
        aug = kmeans_augment_pool(train, k, features, t.augment_trials, root.child("kmeans", k))
        trained, curve = meta_train(model, aug, cfg.train_config(seed))
        setting = setting_key(K=k)
        rec.add(setting, "meta_train_loss", curve[-1].meta_train_loss if curve else float("nan"))
        rec.report(setting, "meta_test_acc", _eval(cfg, trained, test, seed))


def _metaknn(cfg, seed, root, rec, hook):
    train, _, test = build_splits(cfg, root)
    t = cfg.techniques
    spec = cfg.episode.spec()
    trained, _ = meta_train(_model(cfg, root), train, cfg.train_config(seed))
    rec.report(setting_key(method=cfg.variant), "meta_test_acc", _eval(cfg, trained, test, seed, by_sub=True))
    index = build_task_index(train, spec, t.knn_tasks, trained.backbone, root.child("index"), by_sub=True)
    kc = MetaKnnConfig(k=min(t.knn_k, t.knn_tasks), epochs=t.knn_epochs, step=t.knn_step)
    rep = evaluate_predictor(lambda ep: meta_knn_adapt(trained, index, ep, kc)[0], test, spec,
                             cfg.eval_episodes, seed, by_sub=True)
    rec.report(setting_key(method=f"{cfg.variant}-knn"), "meta_test_acc", rep)


def _domainshift(cfg, seed, root, rec, hook):
    train, _, test = build_splits(cfg, root)
    if train.num_domains < 2:
        raise ExperimentError("domainshift needs a two-domain pool (pool.generator: two-domain)")
    model = _model(cfg, root)
    for case in cfg.domain_cases:
        (tr_s, tr_t), (te_s, te_t) = DOMAIN_CASES[case]
        train_hook = (lambda ep, case=case: hook("meta-train", case, ep)) if hook else None
        test_hook = (lambda ep, case=case: hook("meta-test", case, ep)) if hook else None
        trained, _ = meta_train(model, train, cfg.train_config(seed, cfg.episode.spec(tr_s, tr_t)),
                                on_episode=train_hook)
        rep = _eval(cfg, trained, test, seed, spec=cfg.episode.spec(te_s, te_t), on_episode=test_hook)
        rec.report(setting_key(case=case), "meta_test_acc", rep)


RECIPES = {
    "gen-curve": _gen_curve,
    "techniques": _techniques,
    "bagging": _bagging,
    "augment": _augment,
    "metaknn": _metaknn,
    "domainshift": _domainshift,
    "single-run": _single_run,
}


def run_experiment(cfg: ExperimentConfig, out=None, *, hook: Hook | None = None) -> list[ResultRecord]:
    """Run the recipe for every seed; records come back in CSV order.

    Seed ``s`` drives everything (pool, split, init, training, evaluation)
    through ``RngStream(s)``, so the output depends only on the config.
    ``hook(phase, setting, episode)`` observes sampled episodes where a
    recipe supports inspection (domainshift). ``out`` also writes the CSV.
    """
    recipe = RECIPES.get(cfg.experiment)
    if recipe is None:
        raise ExperimentError(f"unknown experiment id {cfg.experiment!r}")
    records: list[ResultRecord] = []
    for seed in cfg.seeds:
        rec = _Recorder(cfg, seed)
        try:
            recipe(cfg, seed, RngStream(seed), rec, hook)
        except (ExperimentError, ConfigError):
            raise
        except Exception as e:
            raise ExperimentError(f"{cfg.experiment} seed {seed}: {e}") from e
        logger.info("%s seed %d: %d records", cfg.experiment, seed, len(rec.records))
        records += rec.records
    records.sort(key=ResultRecord.sort_key)
    if out is not None:
        emit_csv(records, out)
    return records


def summarize(records, metric: str = "meta_test_acc") -> dict[str, float]:
    """Mean of ``metric`` over seeds, per setting."""
    by: dict[str, list[float]] = {}
    for r in records:
        if r.metric == metric:
            by.setdefault(r.setting, []).append(r.value)
    return {k: float(np.mean(v)) for k, v in sorted(by.items())}
