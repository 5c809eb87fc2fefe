"""Two-stream convolutional networks with sharing units between stages.

A stream is four stages of conv3x3 + ReLU blocks; the first block of each
stage applies the stage stride.  ``SharingNetwork`` runs two streams side by
side and, after every stage flagged in ``insertion_mask``, passes the pair of
feature maps through a sharing unit.  Each stream ends in global average
pooling and a linear head for its attribute group.  ``HardShareNet`` is the
single-stream baseline predicting every attribute from one head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from casnet.errors import ConfigError, ShapeError
from casnet.sharing import (
    AblationConfig,
    CasParams,
    CrossStitchParams,
    SluiceParams,
    cas_forward,
    cas_num_params,
    cross_stitch_forward,
    sluice_forward,
    uniform_init,
)
from casnet.tensor import Param, Tensor, conv2d, gap, linear, relu

SHARING_KINDS = ("cas", "cross_stitch", "sluice", "none")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    stride: int = 2
    blocks: int = 1

    def __post_init__(self):
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")


DEFAULT_STAGES = (StageSpec(8), StageSpec(16), StageSpec(32), StageSpec(64))


@dataclass(frozen=True)
class NetConfig:
    """Everything needed to rebuild a network bit-for-bit.

    ``sharing_kind`` is one of ``cas``, ``cross_stitch``, ``sluice``, ``none``
    (two independent streams) or ``hard`` (one stream, one head).

    ``gain_match`` rescales, at initialisation only, the layer that follows
    each sharing unit by the inverse of the unit's RMS gain on a random
    probe, so that stacked units do not shrink the signal reaching the head.
    """

    labels_a: int
    labels_b: int
    stages: tuple[StageSpec, ...] = DEFAULT_STAGES
    in_channels: int = 3
    sharing_kind: str = "cas"
    insertion_mask: tuple[bool, ...] = (True, True, True, True)
    r: int = 16
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    gain_match: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages))
        object.__setattr__(self, "insertion_mask", tuple(bool(m) for m in self.insertion_mask))
        if isinstance(self.ablation, dict):
            object.__setattr__(self, "ablation", AblationConfig(**self.ablation))
        if self.sharing_kind not in SHARING_KINDS + ("hard",):
            raise ConfigError(f"unknown sharing_kind {self.sharing_kind!r}")
        if len(self.stages) != len(self.insertion_mask):
            raise ConfigError(
                f"insertion_mask has {len(self.insertion_mask)} entries for {len(self.stages)} stages")
        if not 1 <= len(self.stages) <= 4:
            raise ConfigError(f"between 1 and 4 stages supported, got {len(self.stages)}")
        if self.labels_a < 1 or self.labels_b < 1:
            raise ConfigError("both attribute groups need at least one label")
        if self.sharing_kind == "sluice":
            for i, (s, m) in enumerate(zip(self.stages, self.insertion_mask)):
                if m and s.out_channels % 2:
                    raise ConfigError(f"sluice after stage {i + 1} needs even channels, got {s.out_channels}")

    @property
    def downsample(self) -> int:
        return int(np.prod([s.stride for s in self.stages]))

    def to_dict(self) -> dict:
        return {
            "labels_a": self.labels_a,
            "labels_b": self.labels_b,
            "stages": [vars(s).copy() for s in self.stages],
            "in_channels": self.in_channels,
            "sharing_kind": self.sharing_kind,
            "insertion_mask": list(self.insertion_mask),
            "r": self.r,
            "ablation": self.ablation.to_dict(),
            "seed": self.seed,
            "gain_match": self.gain_match,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


# uniform bound sqrt(6 / fan_in) keeps activation variance through ReLU layers
RELU_GAIN = float(np.sqrt(6.0))
# pixels in [0, 1] are shifted to [-0.5, 0.5] before the first convolution
INPUT_SHIFT = 0.5


PROBE_SIDE = 8


def _center(images: Tensor) -> Tensor:
    return Tensor(images.data - INPUT_SHIFT)


class Stream:
    """One convolutional trunk: per stage, a list of (kernel, bias) pairs."""

    def __init__(self, stages, in_channels: int, rng: np.random.Generator, prefix: str):
        self.specs = tuple(stages)
        self.layers: list[list[tuple[Param, Param]]] = []
        cin = in_channels
        for i, spec in enumerate(self.specs):
            blocks = []
            for j in range(spec.blocks):
                k = Param(uniform_init(rng, (3, 3, cin, spec.out_channels), 9 * cin, RELU_GAIN),
                          f"{prefix}.stage{i + 1}.block{j}.k")
                b = Param(np.zeros(spec.out_channels), f"{prefix}.stage{i + 1}.block{j}.b")
                blocks.append((k, b))
                cin = spec.out_channels
            self.layers.append(blocks)

    def run_stage(self, i: int, x: Tensor) -> Tensor:
        for j, (k, b) in enumerate(self.layers[i]):
            x = relu(conv2d(x, k, b, padding=1, stride=self.specs[i].stride if j == 0 else 1))
        return x

    def params(self) -> list[Param]:
        return [p for blocks in self.layers for kb in blocks for p in kb]


class Head:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, prefix: str):
        self.w = Param(uniform_init(rng, (cout, cin), cin), f"{prefix}.w")
        self.b = Param(np.zeros(cout), f"{prefix}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(gap(x), self.w, self.b)

    def params(self) -> list[Param]:
        return [self.w, self.b]


def _rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class SharingNetwork:
    def __init__(self, cfg: NetConfig):
        if cfg.sharing_kind == "hard":
            raise ConfigError("use HardShareNet for sharing_kind='hard'")
        self.cfg = cfg
        rng_a, rng_b, rng_mod, rng_head = _rngs(cfg.seed, 4)
        self.stream_a = Stream(cfg.stages, cfg.in_channels, rng_a, "A")
        self.stream_b = Stream(cfg.stages, cfg.in_channels, rng_b, "B")
        self.modules: list = []
        for i, (spec, on) in enumerate(zip(cfg.stages, cfg.insertion_mask)):
            c = spec.out_channels
            if not on or cfg.sharing_kind == "none":
                self.modules.append(None)
            elif cfg.sharing_kind == "cas":
                self.modules.append(CasParams(c, cfg.r, cfg.ablation, rng_mod, prefix=f"cas{i + 1}"))
            elif cfg.sharing_kind == "cross_stitch":
                self.modules.append(CrossStitchParams(c, prefix=f"cross_stitch{i + 1}"))
            else:
                self.modules.append(SluiceParams(c, prefix=f"sluice{i + 1}"))
        c4 = cfg.stages[-1].out_channels
        self.head_a = Head(c4, cfg.labels_a, rng_head, "headA")
        self.head_b = Head(c4, cfg.labels_b, rng_head, "headB")
        if cfg.gain_match:
            self._match_gains()

    def unit_gains(self, i: int) -> tuple[float, float]:
        """RMS output/input ratio of unit ``i`` per stream on a seeded ReLU-like probe."""
        module = self.modules[i]
        if module is None:
            return 1.0, 1.0
        c = self.cfg.stages[i].out_channels
        rng = np.random.default_rng([self.cfg.seed, 1000 + i])
        pa, pb = (Tensor(np.abs(rng.standard_normal((4, PROBE_SIDE, PROBE_SIDE, c)))) for _ in range(2))
        oa, ob = apply_unit(module, pa, pb)[:2]
        rms = lambda t: float(np.sqrt(np.mean(t.data ** 2)))
        return rms(oa) / rms(pa), rms(ob) / rms(pb)

    def _match_gains(self):
        n = len(self.modules)
        for i in range(n):
            ga, gb = self.unit_gains(i)
            for g, stream, head in ((ga, self.stream_a, self.head_a), (gb, self.stream_b, self.head_b)):
                w = stream.layers[i + 1][0][0] if i + 1 < n else head.w
                w.value /= g

    @property
    def has_cas(self) -> bool:
        return any(isinstance(m, CasParams) for m in self.modules)

    def params(self) -> list[Param]:
        ps = self.stream_a.params() + self.stream_b.params()
        for m in self.modules:
            if m is not None:
                ps += m.params()
        return ps + self.head_a.params() + self.head_b.params()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


class HardShareNet:
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        rng_a, _, _, rng_head = _rngs(cfg.seed, 4)
        self.stream = Stream(cfg.stages, cfg.in_channels, rng_a, "shared")
        self.head = Head(cfg.stages[-1].out_channels, cfg.labels_a + cfg.labels_b, rng_head, "head")

    has_cas = False

    def params(self) -> list[Param]:
        return self.stream.params() + self.head.params()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


def build(cfg: NetConfig) -> SharingNetwork | HardShareNet:
    """Allocate and initialise a network from its configuration."""
    if cfg.sharing_kind == "hard":
        return HardShareNet(cfg)
    return SharingNetwork(cfg)


def stream_num_params(stages, in_channels: int = 3) -> int:
    total, cin = 0, in_channels
    for s in stages:
        for _ in range(s.blocks):
            total += 9 * cin * s.out_channels + s.out_channels
            cin = s.out_channels
    return total


def expected_num_params(cfg: NetConfig) -> int:
    """Closed-form parameter count, independent of the allocated objects."""
    trunk = stream_num_params(cfg.stages, cfg.in_channels)
    c4 = cfg.stages[-1].out_channels
    if cfg.sharing_kind == "hard":
        la = cfg.labels_a + cfg.labels_b
        return trunk + c4 * la + la
    total = 2 * trunk + c4 * cfg.labels_a + cfg.labels_a + c4 * cfg.labels_b + cfg.labels_b
    for s, on in zip(cfg.stages, cfg.insertion_mask):
        if not on:
            continue
        if cfg.sharing_kind == "cas":
            total += cas_num_params(s.out_channels, cfg.r, cfg.ablation)
        elif cfg.sharing_kind == "cross_stitch":
            total += 4 * s.out_channels
        elif cfg.sharing_kind == "sluice":
            total += 16
    return total


def _check_input(cfg: NetConfig, images: Tensor):
    n, h, w, c = images.shape
    if c != cfg.in_channels:
        raise ShapeError(f"network expects {cfg.in_channels} input channels, got {c}")
    d = cfg.downsample
    if h % d or w % d:
        raise ShapeError(f"image size {h}x{w} not divisible by total stride {d}")


def forward(net: SharingNetwork, images: Tensor):
    """Return ``(logits_a, logits_b, maps)``.

    ``maps`` holds one ``(M_A, M_B)`` pair per co-attentive unit, in stage
    order; the other unit kinds contribute nothing.
    """
    _check_input(net.cfg, images)
    xa = xb = _center(images)
    maps = []
    for i, module in enumerate(net.modules):
        xa = net.stream_a.run_stage(i, xa)
        xb = net.stream_b.run_stage(i, xb)
        if module is None:
            continue
        xa, xb, unit_maps = apply_unit(module, xa, xb)
        if unit_maps is not None:
            maps.append(unit_maps)
    return net.head_a(xa), net.head_b(xb), maps


def apply_unit(module, xa: Tensor, xb: Tensor):
    """Run one sharing unit; returns ``(A', B', maps)`` with maps None unless co-attentive."""
    if isinstance(module, CasParams):
        xa, xb, ma, mb = cas_forward(xa, xb, module)
        return xa, xb, (ma, mb)
    if isinstance(module, CrossStitchParams):
        return (*cross_stitch_forward(xa, xb, module), None)
    return (*sluice_forward(xa, xb, module), None)


def forward_hard(net: HardShareNet, images: Tensor) -> Tensor:
    _check_input(net.cfg, images)
    x = _center(images)
    for i in range(len(net.cfg.stages)):
        x = net.stream.run_stage(i, x)
    return net.head(x)


def predict_logits(net, images: Tensor) -> tuple[Tensor, Tensor]:
    """Split logits into the two attribute groups for either network type."""
    if isinstance(net, HardShareNet):
        logits = forward_hard(net, images)
        la = net.cfg.labels_a
        return Tensor(logits.data[..., :la]), Tensor(logits.data[..., la:])
    la, lb, _ = forward(net, images)
    return la, lb


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(net, path) -> Path:
    """Write all parameters plus the network config to an ``.npz`` container."""
    path = Path(path)
    meta = {"format": "casnet-checkpoint", "version": CHECKPOINT_VERSION, "config": net.cfg.to_dict(),
            "shapes": {p.name: list(p.shape) for p in net.params()}}
    arrays = {p.name: p.value for p in net.params()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, net=None):
    """Load parameters into ``net`` (or a freshly built one from the stored config).

    Any missing array or shape mismatch raises ``ShapeError``.
    """
    with np.load(Path(path)) as z:
        if "__meta__" not in z.files:
            raise ShapeError(f"{path}: not a casnet checkpoint (no metadata)")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != "casnet-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ShapeError(f"{path}: unsupported checkpoint format/version {meta.get('format')}/{meta.get('version')}")
        if net is None:
            net = build(NetConfig.from_dict(meta["config"]))
        names = {p.name for p in net.params()}
        stored = set(z.files) - {"__meta__"}
        if names != stored:
            raise ShapeError(f"{path}: parameter names differ: missing {sorted(names - stored)[:5]}, "
                             f"unexpected {sorted(stored - names)[:5]}")
        for p in net.params():
            arr = z[p.name]
            if arr.shape != p.value.shape:
                raise ShapeError(f"{path}: {p.name} has shape {arr.shape}, network expects {p.value.shape}")
        for p in net.params():
            p.value[...] = z[p.name]
    return net


def with_overrides(cfg: NetConfig, **kw) -> NetConfig:
    return replace(cfg, **kw)
