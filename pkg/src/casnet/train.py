"""Training loop: SGD with momentum, step learning-rate schedule, model selection."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from casnet.backbone import (
    DEFAULT_STAGES,
    HardShareNet,
    NetConfig,
    StageSpec,
    build,
    forward,
    forward_hard,
    predict_logits,
)
from casnet.data import Dataset, GroupingScheme, generate_synthetic, group_attributes, load_dataset, split
from casnet.errors import ConfigError
from casnet.metrics import MetricReport, evaluate
from casnet.sharing import AblationConfig
from casnet.tensor import Tape, Tensor, _sigmoid_np, add, bce_loss, zero_grads

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset parameters, or ``path`` to a directory written by ``save_dataset``.

    With ``path`` set, images are read from ``<path>/images`` using
    ``<path>/labels.csv`` and resized to ``height`` x ``width``; the
    generator fields are then ignored.
    """

    n_samples: int = 2500
    correlation: float = 0.4
    noise: float = 0.05
    seed: int = 0
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    height: int = 64
    width: int = 32
    path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    lr: float = 0.02
    lr_decay_epoch: int = 40
    lr_after: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    r: int = 16
    seed: int = 0
    sharing_kind: str = "cas"
    insertion_mask: tuple[bool, ...] = (True, True, True, True)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    grouping: str = "global_local"
    grouping_seed: int | None = None
    stages: tuple[StageSpec, ...] = DEFAULT_STAGES
    eval_batch_size: int = 125
    gain_match: bool = True
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if isinstance(self.ablation, str):
            object.__setattr__(self, "ablation", AblationConfig.from_name(self.ablation))
        elif isinstance(self.ablation, dict):
            object.__setattr__(self, "ablation", AblationConfig(**self.ablation))
        if isinstance(self.data, dict):
            object.__setattr__(self, "data", DataConfig(**self.data))
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages))
        object.__setattr__(self, "insertion_mask", tuple(bool(m) for m in self.insertion_mask))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.lr_decay_epoch < self.epochs:
            raise ConfigError(f"lr_decay_epoch must lie strictly between 0 and epochs ({self.epochs})")
        if not self.lr_after < self.lr:
            raise ConfigError("lr_after must be smaller than lr")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ablation"] = self.ablation.to_dict()
        d["stages"] = [asdict(s) for s in self.stages]
        d["insertion_mask"] = list(self.insertion_mask)
        d["data"] = asdict(self.data)
        d["data"]["ratios"] = list(self.data.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def net_config(self, labels_a: int, labels_b: int) -> NetConfig:
        return NetConfig(labels_a=labels_a, labels_b=labels_b, stages=self.stages, sharing_kind=self.sharing_kind,
                         insertion_mask=self.insertion_mask, r=self.r, ablation=self.ablation, seed=self.seed,
                         gain_match=self.gain_match)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# Compressed schedule for single-core runs of networks trained from scratch:
# same shape as the default (one tenfold step at ~57% of training), fewer
# epochs and a higher starting rate.
DESK_SCHEDULE = {"epochs": 20, "lr": 0.1, "lr_decay_epoch": 11, "lr_after": 0.01}


def desk_config(**kw) -> TrainConfig:
    """Default configuration with the compressed desk-scale schedule."""
    return TrainConfig(**{**DESK_SCHEDULE, **kw})


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: ``lr`` before ``lr_decay_epoch``, ``lr_after`` from then on (0-based epochs)."""
    return cfg.lr if epoch < cfg.lr_decay_epoch else cfg.lr_after


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss_a: float
    train_loss_b: float
    val: dict


@dataclass
class RunRecord:
    config: dict
    grouping: dict
    num_params: int
    epochs: list[EpochLog]
    best_epoch: int
    test: dict
    wall_time: float = 0.0

    @property
    def test_report(self) -> MetricReport:
        t = self.test
        return MetricReport(t["mA"], t["accuracy"], t["precision"], t["recall"], t["f1"])

    def losses(self) -> list[tuple[float, float]]:
        return [(e.train_loss_a, e.train_loss_b) for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["epochs"] = [EpochLog(**e) for e in d["epochs"]]
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "RunRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_datasets(dc: DataConfig) -> tuple[Dataset, Dataset, Dataset]:
    if dc.path is not None:
        root = Path(dc.path)
        ds = load_dataset(root / "images", root / "labels.csv", size=(dc.height, dc.width))
        return split(ds, dc.ratios, dc.split_seed)
    ds = generate_synthetic(dc.n_samples, correlation=dc.correlation, noise=dc.noise, seed=dc.seed,
                            size=(dc.height, dc.width))
    return split(ds, dc.ratios, dc.split_seed)


def predict_scores(net, ds: Dataset, scheme: GroupingScheme, batch_size: int = 125) -> np.ndarray:
    """Sigmoid scores in (group A, group B) column order, no gradient tracking."""
    out = []
    for start in range(0, len(ds), batch_size):
        x = Tensor(ds.images[start : start + batch_size])
        la, lb = predict_logits(net, x)
        out.append(np.concatenate([la.data, lb.data], axis=3).reshape(len(x.data), -1))
    return _sigmoid_np(np.concatenate(out))


def evaluate_model(net, ds: Dataset, scheme: GroupingScheme, batch_size: int = 125) -> MetricReport:
    scores = predict_scores(net, ds, scheme, batch_size)
    return evaluate(scores, ds.labels[:, scheme.order])


def dataset_loss(net, ds: Dataset, scheme: GroupingScheme, batch_size: int = 125) -> float:
    """Mean training objective over a whole dataset, as optimised by ``train``."""
    ya_all, yb_all = scheme.labels(ds.labels)
    total, count = 0.0, 0
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        x = Tensor(ds.images[sl])
        n = len(x.data)
        la, lb = predict_logits(net, x)
        if isinstance(net, HardShareNet):
            y = np.concatenate([ya_all[sl], yb_all[sl]], axis=1)
            z = Tensor(np.concatenate([la.data, lb.data], axis=3))
            loss = bce_loss(z, y.reshape(z.shape)).item()
        else:
            loss = (bce_loss(la, ya_all[sl].reshape(la.shape)).item()
                    + bce_loss(lb, yb_all[sl].reshape(lb.shape)).item())
        total += loss * n
        count += n
    return total / count


class SGD:
    """Heavy-ball momentum: v <- mu*v + g (+ wd*p); p <- p - lr*v."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value -= lr * v


def _batch_loss(net, x: Tensor, ya: np.ndarray, yb: np.ndarray):
    """Return (objective, loss_a, loss_b) under the active tape."""
    if isinstance(net, HardShareNet):
        logits = forward_hard(net, x)
        y = np.concatenate([ya, yb], axis=1).reshape(logits.shape)
        obj = bce_loss(logits, y)
        na = ya.shape[1]
        za, zb = logits.data[..., :na], logits.data[..., na:]
        # fresh untracked tensors: logged values only, not part of the objective
        la = bce_loss(Tensor(za), ya.reshape(za.shape)).item()
        lb = bce_loss(Tensor(zb), yb.reshape(zb.shape)).item()
        return obj, la, lb
    za, zb, _ = forward(net, x)
    loss_a = bce_loss(za, ya.reshape(za.shape))
    loss_b = bce_loss(zb, yb.reshape(zb.shape))
    return add(loss_a, loss_b), loss_a.item(), loss_b.item()


def train(cfg: TrainConfig, data: tuple[Dataset, Dataset, Dataset], progress=None):
    """Train one network; returns ``(RunRecord, net)`` with the best-validation-F1 weights loaded."""
    t0 = time.perf_counter()
    train_ds, val_ds, test_ds = data
    gseed = cfg.seed if cfg.grouping_seed is None else cfg.grouping_seed
    scheme = group_attributes(train_ds.attributes, cfg.grouping, seed=gseed)
    net = build(cfg.net_config(len(scheme.group_a), len(scheme.group_b)))
    params = net.params()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    ya_all, yb_all = scheme.labels(train_ds.labels)
    ya_all = ya_all.astype(np.float64)
    yb_all = yb_all.astype(np.float64)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))

    epochs: list[EpochLog] = []
    best_f1, best_epoch, best_values = -1.0, -1, None
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        perm = shuffle_rng.permutation(n)
        sum_a = sum_b = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(perm[start : start + cfg.batch_size])
            x = Tensor(train_ds.images[idx])
            zero_grads(params)
            with Tape() as tape:
                obj, la, lb = _batch_loss(net, x, ya_all[idx], yb_all[idx])
            if not np.isfinite(obj.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi} (lr {lr})")
            tape.backward(obj)
            opt.step(lr)
            sum_a += la * len(idx)
            sum_b += lb * len(idx)
        val = evaluate_model(net, val_ds, scheme, cfg.eval_batch_size)
        epochs.append(EpochLog(epoch, lr, sum_a / n, sum_b / n, val.as_dict()))
        if val.instance_f1 > best_f1:
            best_f1, best_epoch = val.instance_f1, epoch
            best_values = [p.value.copy() for p in params]
        if progress is not None:
            progress(epochs[-1])
        log.debug("epoch %d lr %.4g loss %.4f/%.4f val F1 %.4f", epoch, lr, sum_a / n, sum_b / n, val.instance_f1)
    for p, v in zip(params, best_values):
        p.value[...] = v
    test = evaluate_model(net, test_ds, scheme, cfg.eval_batch_size)
    record = RunRecord(
        config=cfg.to_dict(),
        grouping={"kind": scheme.kind, "group_a": list(scheme.group_a), "group_b": list(scheme.group_b)},
        num_params=net.num_params(),
        epochs=epochs,
        best_epoch=best_epoch,
        test=test.as_dict(),
        wall_time=time.perf_counter() - t0,
    )
    return record, net


def save_run(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record.save(out / "run.json")
    return out
