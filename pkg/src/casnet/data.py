"""Multi-attribute image datasets: synthetic generator, on-disk format, splits.

Synthetic images mimic the split between *global* attributes (whole-image
statistics: brightness, gradients, tints, textures) and *local* attributes
(tinted patches in fixed body regions).  Chosen cross-group pairs are
correlated, so a stream predicting one group can profit from features
learned by the stream predicting the other.

On-disk layout written by :func:`save_dataset` and read by
:func:`load_dataset`::

    <dir>/images/<id>.ppm     8-bit binary PPM (P6); P5 is also accepted
    <dir>/labels.csv          comma separated, header ``filename,<attr>,...``
                              then one row per image: file name relative to
                              the image directory, followed by L values 0/1
    <dir>/attributes.json     optional attribute metadata (kind, region, rate)
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from casnet.errors import ConfigError, DataFormatError
from casnet.pnm import read_pnm, to_uint8, write_pnm
from casnet.tensor import Tensor

log = logging.getLogger(__name__)

GLOBAL_EFFECTS = (
    "intensity", "vgradient", "hgradient", "hue_r", "hue_g", "hue_b",
    "vgrad_r", "vgrad_g", "vgrad_b", "stripes_h", "stripes_v", "checker", "stripes_diag",
)
PATCH_TINTS = {
    "white": (1.0, 1.0, 1.0), "red": (1.0, 0.25, 0.25), "green": (0.25, 1.0, 0.25),
    "blue": (0.25, 0.25, 1.0), "yellow": (1.0, 1.0, 0.25), "magenta": (1.0, 0.25, 1.0),
    "cyan": (0.25, 1.0, 1.0),
}
PATCH_PATTERNS = ("solid", "ring", "bars")
DEFAULT_SIZE = (64, 32)


@dataclass(frozen=True)
class AttributeSpec:
    """One binary attribute.

    ``region`` is (top, left, height, width) as fractions of the image and is
    required for local attributes.  ``effect`` names the global modulation
    (one of ``GLOBAL_EFFECTS``) or the patch look as ``<tint>`` or
    ``<tint>:<pattern>`` with tint a key of ``PATCH_TINTS`` and pattern one
    of ``PATCH_PATTERNS``.
    """

    name: str
    kind: str
    base_rate: float
    region: tuple[float, float, float, float] | None = None
    effect: str = ""

    def __post_init__(self):
        if self.kind not in ("global", "local"):
            raise ConfigError(f"{self.name}: kind must be 'global' or 'local', got {self.kind!r}")
        if not 0.05 < self.base_rate < 0.95:
            raise ConfigError(f"{self.name}: base_rate {self.base_rate} outside (0.05, 0.95)")
        if self.region is not None:
            object.__setattr__(self, "region", tuple(float(v) for v in self.region))
        if self.kind == "local":
            if self.region is None:
                raise ConfigError(f"{self.name}: local attribute needs a region")
            top, left, h, w = self.region
            if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > 1 or left + w > 1:
                raise ConfigError(f"{self.name}: region {self.region} not inside the image")


def default_attributes() -> list[AttributeSpec]:
    """13 global + 13 local attributes; global i and local i share a base rate."""
    rates = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.3, 0.2]
    gnames = ["bright", "top_dark", "side_lit", "red_tint", "green_tint", "blue_tint", "red_fade",
              "green_fade", "blue_fade", "h_stripes", "v_stripes", "checker", "diag_stripes"]
    glob = [AttributeSpec(n, "global", r, effect=e) for n, r, e in zip(gnames, rates, GLOBAL_EFFECTS)]
    # 5x3 grid of body cells, skipping two in the middle row
    cells = [(r, c) for r in range(5) for c in range(3) if (r, c) not in ((2, 0), (2, 2))]
    looks = [f"{t}:{p}" for p in PATCH_PATTERNS for t in PATCH_TINTS]
    loc = []
    for i, ((r, c), rate) in enumerate(zip(cells, rates)):
        region = (r * 0.2 + 0.04, c / 3 + 0.0667, 0.12, 0.2)
        loc.append(AttributeSpec(f"patch_r{r}c{c}", "local", rate, region, looks[i]))
    return glob + loc


@dataclass(frozen=True)
class Sample:
    image: Tensor
    labels: np.ndarray
    id: str


@dataclass
class Dataset:
    images: np.ndarray          # (n, H, W, 3) float64 in [0, 1]
    labels: np.ndarray          # (n, L) uint8
    ids: list[str]
    attributes: list[AttributeSpec] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise DataFormatError("images, labels and ids disagree in length")

    def __len__(self):
        return len(self.labels)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def sample(self, i: int) -> Sample:
        return Sample(Tensor(self.images[i : i + 1]), self.labels[i].copy(), self.ids[i])

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx], list(self.attributes))


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _overlap_fraction(a, b) -> float:
    top = max(a[0], b[0])
    bottom = min(a[0] + a[2], b[0] + b[2])
    left = max(a[1], b[1])
    right = min(a[1] + a[3], b[1] + b[3])
    inter = max(0.0, bottom - top) * max(0.0, right - left)
    return inter / min(a[2] * a[3], b[2] * b[3])


def default_pairs(attrs: list[AttributeSpec]) -> list[tuple[int, int]]:
    """Pair the i-th global attribute with the i-th local attribute."""
    g = [i for i, a in enumerate(attrs) if a.kind == "global"]
    lo = [i for i, a in enumerate(attrs) if a.kind == "local"]
    return list(zip(g, lo))


def sample_labels(attrs: list[AttributeSpec], n: int, rho: float, pairs, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli labels; each pair is drawn jointly with Pearson correlation ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"correlation must lie in [0, 1], got {rho}")
    L = len(attrs)
    labels = np.zeros((n, L), dtype=np.uint8)
    paired = set()
    for i, j in pairs:
        if i in paired or j in paired or i == j:
            raise ConfigError(f"attribute used in more than one correlated pair: {(i, j)}")
        paired |= {i, j}
    for k in range(L):
        if k not in paired:
            labels[:, k] = rng.random(n) < attrs[k].base_rate
    for i, j in pairs:
        p, q = attrs[i].base_rate, attrs[j].base_rate
        p11 = p * q + rho * np.sqrt(p * (1 - p) * q * (1 - q))
        probs = np.array([p11, p - p11, q - p11, 1 - p - q + p11])
        if (probs < -1e-12).any():
            raise ConfigError(f"correlation {rho} infeasible for base rates {p}, {q}")
        u = rng.random(n)
        cut = np.cumsum(np.clip(probs, 0, None))
        cat = np.searchsorted(cut / cut[-1], u, side="right")
        labels[:, i] = (cat == 0) | (cat == 1)
        labels[:, j] = (cat == 0) | (cat == 2)
    return labels


def _global_pattern(effect: str, h: int, w: int) -> np.ndarray:
    """Unit-amplitude (H, W, 3) modulation for a global effect."""
    yy = np.linspace(-1.0, 1.0, h)[:, None] * np.ones((1, w))
    xx = np.ones((h, 1)) * np.linspace(-1.0, 1.0, w)[None, :]
    rows = np.arange(h)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w)[None, :]
    one = np.ones((h, w))
    out = np.zeros((h, w, 3))
    if effect == "intensity":
        out[:] = one[..., None]
    elif effect == "vgradient":
        out[:] = yy[..., None]
    elif effect == "hgradient":
        out[:] = xx[..., None]
    elif effect.startswith("hue_"):
        out[..., "rgb".index(effect[-1])] = one
    elif effect.startswith("vgrad_"):
        out[..., "rgb".index(effect[-1])] = yy
    elif effect == "stripes_h":
        out[:] = np.sin(2 * np.pi * rows / 8)[..., None]
    elif effect == "stripes_v":
        out[:] = np.sin(2 * np.pi * cols / 8)[..., None]
    elif effect == "checker":
        out[:] = (np.sign(np.sin(2 * np.pi * (rows + 0.5) / 8)) * np.sign(np.sin(2 * np.pi * (cols + 0.5) / 8)))[..., None]
    elif effect == "stripes_diag":
        out[:] = np.sin(2 * np.pi * (rows + cols) / 8)[..., None]
    else:
        raise ConfigError(f"unknown global effect {effect!r}")
    return out


def _patch_look(effect: str, ph: int, pw: int) -> np.ndarray:
    """(ph, pw, 3) unit-amplitude patch: tint times a solid/ring/bars mask."""
    tint_name, _, pattern = effect.partition(":")
    tint = np.asarray(PATCH_TINTS.get(tint_name, (1.0, 1.0, 1.0)))
    pattern = pattern or "solid"
    mask = np.ones((ph, pw))
    if pattern == "ring":
        mask[1:-1, 1:-1] = 0.0 if ph > 2 and pw > 2 else 1.0
    elif pattern == "bars":
        mask[1::2, :] = 0.0
    elif pattern != "solid":
        raise ConfigError(f"unknown patch pattern {pattern!r}")
    return mask[..., None] * tint


@dataclass(frozen=True)
class RenderConfig:
    """Amplitudes of the synthetic image model (pixel units on [0, 1])."""

    background: float = 0.45
    global_strength: float = 0.12
    patch_strength: float = 0.3
    amplitude_jitter: float = 0.3      # effects scaled by U(1-j, 1+j) per sample
    nuisance: float = 0.04             # std of per-image brightness offset
    color_nuisance: float = 0.02       # std of per-image, per-channel offset
    patch_shift: float = 0.04          # max patch displacement, fraction of image side


def render_images(labels: np.ndarray, attrs: list[AttributeSpec], noise: float, rng: np.random.Generator,
                  size=DEFAULT_SIZE, render: RenderConfig = RenderConfig()) -> np.ndarray:
    """Deterministic given ``rng`` state; returns (n, H, W, 3) in [0, 1]."""
    n = len(labels)
    h, w = size
    rc = render
    imgs = np.full((n, h, w, 3), rc.background)
    imgs += rng.normal(0.0, rc.nuisance, (n, 1, 1, 1))
    imgs += rng.normal(0.0, rc.color_nuisance, (n, 1, 1, 3))
    for k, a in enumerate(attrs):
        amp = rng.uniform(1 - rc.amplitude_jitter, 1 + rc.amplitude_jitter, n) * labels[:, k]
        if a.kind == "global":
            imgs += (rc.global_strength * amp)[:, None, None, None] * _global_pattern(a.effect, h, w)
        else:
            top, left, rh, rw = a.region
            ph, pw = max(1, int(round(rh * h))), max(1, int(round(rw * w)))
            look = _patch_look(a.effect, ph, pw)
            dy = rng.uniform(-rc.patch_shift, rc.patch_shift, n) * h
            dx = rng.uniform(-rc.patch_shift, rc.patch_shift, n) * w
            for s in np.flatnonzero(labels[:, k]):
                y0 = int(np.clip(round(top * h + dy[s]), 0, h - ph))
                x0 = int(np.clip(round(left * w + dx[s]), 0, w - pw))
                imgs[s, y0 : y0 + ph, x0 : x0 + pw] += rc.patch_strength * amp[s] * look
    if noise > 0:
        imgs += rng.normal(0.0, noise, imgs.shape)
    return np.clip(imgs, 0.0, 1.0)


def generate_synthetic(n: int, attrs: list[AttributeSpec] | None = None, correlation: float = 0.4,
                       noise: float = 0.05, seed: int = 0, size=DEFAULT_SIZE, pairs=None,
                       render: RenderConfig = RenderConfig()) -> Dataset:
    """Draw ``n`` labelled images; bit-identical for identical arguments."""
    attrs = list(attrs) if attrs is not None else default_attributes()
    kinds = [a.kind for a in attrs]
    if kinds.count("global") < 2 or kinds.count("local") < 2:
        raise ConfigError("need at least 2 global and 2 local attributes")
    locs = [a for a in attrs if a.kind == "local"]
    for i in range(len(locs)):
        for j in range(i + 1, len(locs)):
            if _overlap_fraction(locs[i].region, locs[j].region) > 0.5:
                raise ConfigError(f"regions of {locs[i].name} and {locs[j].name} overlap by more than 50%")
    for a in attrs:
        if a.kind == "global" and a.effect not in GLOBAL_EFFECTS:
            raise ConfigError(f"{a.name}: unknown global effect {a.effect!r}")
    pairs = default_pairs(attrs) if pairs is None else [tuple(p) for p in pairs]
    rng = np.random.default_rng(seed)
    labels = sample_labels(attrs, n, correlation, pairs, rng)
    images = render_images(labels, attrs, noise, rng, size, render)
    width = max(5, len(str(n - 1)))
    ids = [f"s{i:0{width}d}" for i in range(n)]
    return Dataset(images, labels, ids, attrs)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["filename", *ds.names])
        for i, sid in enumerate(ds.ids):
            fname = f"{sid}.ppm"
            write_pnm(img_dir / fname, to_uint8(ds.images[i]))
            wr.writerow([fname, *(int(v) for v in ds.labels[i])])
    if ds.attributes:
        with open(out / "attributes.json", "w") as fh:
            json.dump([asdict(a) for a in ds.attributes], fh, indent=1)
    return out


def load_attributes(path) -> list[AttributeSpec]:
    with open(path) as fh:
        return [AttributeSpec(**d) for d in json.load(fh)]


def _nearest_resize(img: np.ndarray, size) -> np.ndarray:
    h, w = size
    ih, iw = img.shape[:2]
    if (ih, iw) == (h, w):
        return img
    rows = np.minimum((np.arange(h) * ih) // h, ih - 1)
    cols = np.minimum((np.arange(w) * iw) // w, iw - 1)
    return img[rows][:, cols]


def load_dataset(image_dir, labels_file, size=DEFAULT_SIZE, attributes_file=None) -> Dataset:
    """Read a labels table plus its images.

    Errors name the offending row (1-based, header is row 1).  Images are
    resized to ``size`` with nearest neighbour and scaled to [0, 1]; grey
    images are replicated to three channels.
    """
    image_dir, labels_file = Path(image_dir), Path(labels_file)
    if not labels_file.is_file():
        raise DataFormatError(f"labels file not found: {labels_file}")
    with open(labels_file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2 or rows[0][0] != "filename":
        raise DataFormatError(f"{labels_file}: header must be 'filename,<attr>,...'")
    names = rows[0][1:]
    L = len(names)
    images, labels, ids = [], [], []
    for rownum, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != L + 1:
            raise DataFormatError(f"{labels_file} row {rownum}: expected {L + 1} fields, got {len(row)}")
        fname, vals = row[0], row[1:]
        bad = [v for v in vals if v.strip() not in ("0", "1")]
        if bad:
            raise DataFormatError(f"{labels_file} row {rownum}: non-binary label {bad[0]!r}")
        path = image_dir / fname
        if not path.is_file():
            raise DataFormatError(f"{labels_file} row {rownum}: image {path} not found")
        try:
            img = read_pnm(path)
        except DataFormatError as exc:
            raise DataFormatError(f"{labels_file} row {rownum}: {exc}") from exc
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        images.append(_nearest_resize(img, size).astype(np.float64) / 255.0)
        labels.append([int(v) for v in vals])
        ids.append(Path(fname).stem)
    if not labels:
        raise DataFormatError(f"{labels_file}: no data rows")

    if attributes_file is None and (labels_file.parent / "attributes.json").is_file():
        attributes_file = labels_file.parent / "attributes.json"
    lab = np.asarray(labels, dtype=np.uint8)
    if attributes_file is not None:
        attrs = load_attributes(attributes_file)
        if [a.name for a in attrs] != names:
            raise DataFormatError(f"{attributes_file}: attribute names do not match {labels_file} header")
    else:
        # no metadata: everything is treated as global with its empirical rate
        rates = np.clip(lab.mean(axis=0), 0.06, 0.94)
        attrs = [AttributeSpec(nm, "global", float(r)) for nm, r in zip(names, rates)]
    return Dataset(np.stack(images), lab, ids, attrs)


# ---------------------------------------------------------------------------
# splits and grouping
# ---------------------------------------------------------------------------


def split(ds: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffled train/val/test partition; val and test sizes are rounded, train takes the rest."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(ds)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split of {n} samples by {ratios} leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(n)
    return (ds.subset(perm[:n_train]), ds.subset(perm[n_train : n_train + n_val]),
            ds.subset(perm[n_train + n_val :]))


GROUPING_KINDS = ("global_local", "rare_frequent", "top_down", "random")


@dataclass(frozen=True)
class GroupingScheme:
    kind: str
    group_a: tuple[int, ...]
    group_b: tuple[int, ...]

    def __post_init__(self):
        if not self.group_a or not self.group_b:
            raise ConfigError(f"grouping {self.kind!r} leaves an empty group")
        if set(self.group_a) & set(self.group_b):
            raise ConfigError(f"grouping {self.kind!r} puts an attribute in both groups")

    def validate(self, num_attributes: int):
        if sorted(self.group_a + self.group_b) != list(range(num_attributes)):
            raise ConfigError(f"grouping {self.kind!r} does not cover all {num_attributes} attributes exactly once")

    def labels(self, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return labels[:, list(self.group_a)], labels[:, list(self.group_b)]

    @property
    def order(self) -> list[int]:
        """Attribute indices in (group A, group B) column order."""
        return list(self.group_a) + list(self.group_b)


def group_attributes(attrs: list[AttributeSpec], kind: str = "global_local", seed: int = 0) -> GroupingScheme:
    """Split the attributes into the task-A and task-B groups."""
    L = len(attrs)
    if L < 2:
        raise ConfigError("grouping needs at least 2 attributes")
    if kind == "global_local":
        a = [i for i, x in enumerate(attrs) if x.kind == "global"]
        b = [i for i, x in enumerate(attrs) if x.kind == "local"]
    elif kind == "rare_frequent":
        order = sorted(range(L), key=lambda i: (attrs[i].base_rate, i))
        a, b = sorted(order[: L // 2]), sorted(order[L // 2 :])
    elif kind == "top_down":
        a, b, g = [], [], 0
        for i, x in enumerate(attrs):
            if x.kind == "local":
                (a if x.region[0] + x.region[2] / 2 < 0.5 else b).append(i)
            else:
                (a if g % 2 == 0 else b).append(i)
                g += 1
    elif kind == "random":
        perm = np.random.default_rng(seed).permutation(L)
        a, b = sorted(perm[: L // 2].tolist()), sorted(perm[L // 2 :].tolist())
    else:
        raise ConfigError(f"unknown grouping kind {kind!r}; choose from {GROUPING_KINDS}")
    scheme = GroupingScheme(kind, tuple(a), tuple(b))
    scheme.validate(L)
    return scheme
