"""Feature-sharing units placed between two task streams.

``cas_forward`` implements co-attentive sharing: each stream squeezes its
feature map into a reduced channel descriptor ``V_m`` and derives three
channel gates from it (``V_sh`` selects what to share, ``V_a`` weights the
spatial map, ``V_t`` re-weights the stream's own channels).  The gated
features of both streams are concatenated; a 1x1 conv yields a fused
feature and a 7x7 conv over channel mean/max yields a spatial map ``M``.
The output is ``(feat + feat_syn + feat_t) * (V_a * M)``.

Cross-Stitch and Sluice units are the linear-mixing baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from casnet.errors import ConfigError, ShapeError
from casnet.tensor import (
    Param,
    Tensor,
    add,
    broadcast_mul,
    channel_stats,
    concat_channels,
    conv2d,
    gap,
    linear,
    param_tensor,
    relu,
    sigmoid,
    slice_channels,
)

TASKS = ("A", "B")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Zero-mean uniform weights in [-gain/sqrt(fan_in), gain/sqrt(fan_in)]."""
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class AblationConfig:
    """Which parts of the co-attentive module to remove.

    ``synergetic_minus``  sum the gated features instead of concatenating.
    ``synergetic_minus2`` also drop the 1x1 conv (fused feature = the sum).
    ``attentive_minus``   drop ``V_a``; the spatial map alone is the attention.
    ``attentive_minus2``  drop the attention entirely.
    ``ts_minus2``         drop the task-specific branch.
    ``channel_minus2``    drop all three channel gates.
    """

    synergetic_minus: bool = False
    synergetic_minus2: bool = False
    attentive_minus: bool = False
    attentive_minus2: bool = False
    ts_minus2: bool = False
    channel_minus2: bool = False

    def __post_init__(self):
        if self.synergetic_minus and self.synergetic_minus2:
            raise ConfigError("synergetic_minus and synergetic_minus2 are mutually exclusive")
        if self.attentive_minus and self.attentive_minus2:
            raise ConfigError("attentive_minus and attentive_minus2 are mutually exclusive")

    # which pieces are live
    @property
    def uses_vsh(self) -> bool:
        return not self.channel_minus2

    @property
    def uses_va(self) -> bool:
        return not (self.channel_minus2 or self.attentive_minus or self.attentive_minus2)

    @property
    def uses_vt(self) -> bool:
        return not (self.channel_minus2 or self.ts_minus2)

    @property
    def uses_vm(self) -> bool:
        return self.uses_vsh or self.uses_va or self.uses_vt

    @property
    def uses_attention(self) -> bool:
        return not self.attentive_minus2

    @property
    def summed_exchange(self) -> bool:
        return self.synergetic_minus or self.synergetic_minus2

    @property
    def uses_syn_conv(self) -> bool:
        return not self.synergetic_minus2

    @property
    def name(self) -> str:
        on = [ABLATION_NAMES_BY_FIELD[f.name] for f in fields(self) if getattr(self, f.name)]
        return "+".join(on) if on else "full"

    @classmethod
    def from_name(cls, name: str) -> "AblationConfig":
        """Parse ``full`` or ``+``-joined variant names such as ``attentive--``."""
        if name in ("full", ""):
            return cls()
        kw = {}
        for part in name.split("+"):
            if part not in ABLATION_FIELDS_BY_NAME:
                raise ConfigError(f"unknown ablation {part!r}; choose from {sorted(ABLATION_FIELDS_BY_NAME)}")
            kw[ABLATION_FIELDS_BY_NAME[part]] = True
        return cls(**kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


ABLATION_NAMES_BY_FIELD = {
    "synergetic_minus": "synergetic-",
    "synergetic_minus2": "synergetic--",
    "attentive_minus": "attentive-",
    "attentive_minus2": "attentive--",
    "ts_minus2": "ts--",
    "channel_minus2": "channel--",
}
ABLATION_FIELDS_BY_NAME = {v: k for k, v in ABLATION_NAMES_BY_FIELD.items()}
ABLATION_VARIANTS = ["full", *ABLATION_NAMES_BY_FIELD.values()]


def reduced_channels(channels: int, r: int) -> int:
    if channels < 1:
        raise ConfigError(f"channel count must be >= 1, got {channels}")
    if int(r) != r or r < 1:
        raise ConfigError(f"reduction ratio must be an integer >= 1, got {r}")
    return max(channels // int(r), 1)


class CasParams:
    """Weights of one co-attentive module: an independent set per task.

    Per task: ``wm``/``bm`` (C -> C/r), ``wsh``/``wa``/``wt`` with biases
    (C/r -> C), ``syn_k``/``syn_b`` (1x1 conv, 2C -> C, or C -> C when the
    gated features are summed) and ``map_k``/``map_b`` (7x7 conv, 2 -> 1).
    Pieces removed by the ablation are not allocated.
    """

    def __init__(self, channels: int, r: int = 16, ablation: AblationConfig | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "cas"):
        self.channels = channels
        self.r = r
        self.ablation = ablation or AblationConfig()
        self.reduced = reduced_channels(channels, r)
        rng = rng if rng is not None else np.random.default_rng(0)
        ab, c, d = self.ablation, channels, self.reduced
        self.task: dict[str, dict[str, Param]] = {}
        for t in TASKS:
            p: dict[str, Param] = {}

            def new(key, value):
                p[key] = Param(value, f"{prefix}.{t}.{key}")

            if ab.uses_vm:
                new("wm", uniform_init(rng, (d, c), c))
                new("bm", np.zeros(d))
            for key, used in (("sh", ab.uses_vsh), ("a", ab.uses_va), ("t", ab.uses_vt)):
                if used:
                    new("w" + key, uniform_init(rng, (c, d), d))
                    new("b" + key, np.zeros(c))
            if ab.uses_syn_conv:
                cin = c if ab.summed_exchange else 2 * c
                new("syn_k", uniform_init(rng, (1, 1, cin, c), cin))
                new("syn_b", np.zeros(c))
            if ab.uses_attention:
                new("map_k", uniform_init(rng, (7, 7, 2, 1), 7 * 7 * 2))
                new("map_b", np.zeros(1))
            self.task[t] = p

    def params(self) -> list[Param]:
        return [p for t in TASKS for p in self.task[t].values()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def swapped(self) -> "CasParams":
        """Same object graph with task A and task B parameter sets exchanged."""
        out = object.__new__(CasParams)
        out.__dict__.update(self.__dict__)
        out.task = {"A": self.task["B"], "B": self.task["A"]}
        return out


def cas_num_params(channels: int, r: int, ablation: AblationConfig | None = None) -> int:
    """Closed-form parameter count of a module (both tasks)."""
    ab = ablation or AblationConfig()
    c, d = channels, reduced_channels(channels, r)
    per_task = 0
    if ab.uses_vm:
        per_task += d * c + d
    per_task += (ab.uses_vsh + ab.uses_va + ab.uses_vt) * (c * d + c)
    if ab.uses_syn_conv:
        cin = c if ab.summed_exchange else 2 * c
        per_task += cin * c + c
    if ab.uses_attention:
        per_task += 7 * 7 * 2 + 1
    return 2 * per_task


def _gates(feat: Tensor, p: dict[str, Param], ab: AblationConfig):
    if not ab.uses_vm:
        return None, None, None
    vm = relu(linear(gap(feat), p["wm"], p["bm"]))
    vsh = sigmoid(linear(vm, p["wsh"], p["bsh"])) if ab.uses_vsh else None
    va = sigmoid(linear(vm, p["wa"], p["ba"])) if ab.uses_va else None
    vt = sigmoid(linear(vm, p["wt"], p["bt"])) if ab.uses_vt else None
    return vsh, va, vt


def _check_compatible(feat: Tensor, p: CasParams, ab: AblationConfig):
    if feat.shape[3] != p.channels:
        raise ShapeError(f"module built for C={p.channels}, features have C={feat.shape[3]}")
    need = set()
    if ab.uses_vm:
        need |= {"wm", "bm"}
    for key, used in (("sh", ab.uses_vsh), ("a", ab.uses_va), ("t", ab.uses_vt)):
        if used:
            need |= {"w" + key, "b" + key}
    if ab.uses_syn_conv:
        need |= {"syn_k", "syn_b"}
    if ab.uses_attention:
        need |= {"map_k", "map_b"}
    for t in TASKS:
        missing = need - p.task[t].keys()
        if missing:
            raise ConfigError(f"parameters {sorted(missing)} for task {t} were not allocated for this ablation")


def cas_forward(featA: Tensor, featB: Tensor, p: CasParams, ab: AblationConfig | None = None,
                swap_concat: bool = False):
    """Run the co-attentive module on a pair of same-shape feature maps.

    Returns ``(featA', featB', M_A, M_B)``; the spatial maps are (N,H,W,1)
    or ``None`` when the attention branch is ablated.  The gated features
    are concatenated in (A, B) channel order for both tasks; ``swap_concat``
    reverses that, which is only useful for symmetry checks.
    """
    ab = ab if ab is not None else p.ablation
    if featA.shape != featB.shape:
        raise ShapeError(f"task features differ in shape: {featA.shape} vs {featB.shape}")
    _check_compatible(featA, p, ab)

    feats = {"A": featA, "B": featB}
    gates = {t: _gates(feats[t], p.task[t], ab) for t in TASKS}

    shared = {}
    for t in TASKS:
        vsh = gates[t][0]
        shared[t] = broadcast_mul(vsh, feats[t]) if vsh is not None else feats[t]
    first, second = (shared["B"], shared["A"]) if swap_concat else (shared["A"], shared["B"])
    if ab.summed_exchange:
        cat = add(first, second)
    else:
        cat = concat_channels(first, second)

    if ab.uses_attention:
        avg, mx = channel_stats(cat)
        pooled = concat_channels(avg, mx)

    outs, maps = {}, {}
    for t in TASKS:
        tp = p.task[t]
        _, va, vt = gates[t]
        feat = feats[t]
        syn = conv2d(cat, tp["syn_k"], tp["syn_b"]) if ab.uses_syn_conv else cat
        if ab.channel_minus2:
            feat_t = feat
        elif vt is not None:
            feat_t = broadcast_mul(vt, feat)
        else:
            feat_t = None
        agg = add(feat, syn)
        if feat_t is not None:
            agg = add(agg, feat_t)
        if ab.uses_attention:
            m = sigmoid(conv2d(pooled, tp["map_k"], tp["map_b"], padding=3))
            attn = broadcast_mul(va, m) if va is not None else m
            agg = broadcast_mul(agg, attn)
            maps[t] = m
        else:
            maps[t] = None
        outs[t] = agg
    return outs["A"], outs["B"], maps["A"], maps["B"]


class CrossStitchParams:
    """Per-channel 2x2 mixing matrices, shape (C, 2, 2)."""

    def __init__(self, channels: int, prefix: str = "cross_stitch", same: float = 0.9, other: float = 0.1):
        if channels < 1:
            raise ConfigError(f"channel count must be >= 1, got {channels}")
        self.channels = channels
        alpha = np.empty((channels, 2, 2))
        alpha[:] = [[same, other], [other, same]]
        self.alpha = Param(alpha, f"{prefix}.alpha")

    def params(self) -> list[Param]:
        return [self.alpha]

    def num_params(self) -> int:
        return self.alpha.size


def cross_stitch_forward(featA: Tensor, featB: Tensor, p: CrossStitchParams):
    if featA.shape != featB.shape:
        raise ShapeError(f"task features differ in shape: {featA.shape} vs {featB.shape}")
    c = featA.shape[3]
    if c != p.channels:
        raise ShapeError(f"unit built for C={p.channels}, features have C={c}")

    def coef(i, j):
        return param_tensor(p.alpha, (1, 1, 1, c), index=(slice(None), i, j))

    outA = add(broadcast_mul(featA, coef(0, 0)), broadcast_mul(featB, coef(0, 1)))
    outB = add(broadcast_mul(featA, coef(1, 0)), broadcast_mul(featB, coef(1, 1)))
    return outA, outB


class SluiceParams:
    """One 4x4 matrix mixing the two half-channel subspaces of each task."""

    def __init__(self, channels: int, prefix: str = "sluice", diag: float = 0.9):
        if channels < 2 or channels % 2:
            raise ConfigError(f"sluice needs an even channel count, got {channels}")
        self.channels = channels
        beta = np.full((4, 4), (1.0 - diag) / 3.0)
        np.fill_diagonal(beta, diag)
        self.beta = Param(beta, f"{prefix}.beta")

    def params(self) -> list[Param]:
        return [self.beta]

    def num_params(self) -> int:
        return self.beta.size


def sluice_forward(featA: Tensor, featB: Tensor, p: SluiceParams):
    if featA.shape != featB.shape:
        raise ShapeError(f"task features differ in shape: {featA.shape} vs {featB.shape}")
    c = featA.shape[3]
    if c % 2:
        raise ConfigError(f"sluice needs an even channel count, got {c}")
    if c != p.channels:
        raise ShapeError(f"unit built for C={p.channels}, features have C={c}")
    h = c // 2
    subspaces = [
        slice_channels(featA, 0, h), slice_channels(featA, h, c),
        slice_channels(featB, 0, h), slice_channels(featB, h, c),
    ]
    mixed = []
    for i in range(4):
        acc = None
        for j in range(4):
            term = broadcast_mul(subspaces[j], param_tensor(p.beta, (1, 1, 1, 1), index=(i, j)))
            acc = term if acc is None else add(acc, term)
        mixed.append(acc)
    return concat_channels(mixed[0], mixed[1]), concat_channels(mixed[2], mixed[3])
