"""Procedural datasets with a spurious colour attribute.

Two generators are provided:

* :func:`gen_colored_patterns` -- each class ``k`` is drawn in colour ``k``
  with probability ``1 - beta`` and in any other colour with probability
  ``beta / (K - 1)``; ``beta`` is the fraction of bias-conflicting samples.
* :func:`gen_systematic_split` -- a shape/colour grid in which every shape is
  only ever seen in ``C`` of the ``L`` colours during development, while the
  test set covers every combination.

Images are 12x12 RGB seven-segment style glyphs (one template per class)
shifted by up to one pixel, multiplied by a pure-hue colour and corrupted by
additive uniform noise. The grid task additionally paints a dim backdrop in
the object colour and uses heavily overlapping glyphs, so colour is far more
salient than shape.
"""
import colorsys
import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigurationError, FormatError
from .rng import substream

GENERATOR_VERSION = 1
DATASET_MAGIC = b"ULAD"
DATASET_VERSION = 1

CANVAS = 12
IMAGE_SHAPE = (CANVAS, CANVAS, 3)

# glyph box occupies rows 1..10 and columns 3..8 of the canvas
_TOP, _MID, _BOT, _LEFT, _RIGHT = 1, 5, 10, 3, 8
_SEGMENTS = {
    "a": [(_TOP, c) for c in range(_LEFT, _RIGHT + 1)],
    "b": [(r, _RIGHT) for r in range(_TOP, _MID + 1)],
    "c": [(r, _RIGHT) for r in range(_MID, _BOT + 1)],
    "d": [(_BOT, c) for c in range(_LEFT, _RIGHT + 1)],
    "e": [(r, _LEFT) for r in range(_MID, _BOT + 1)],
    "f": [(r, _LEFT) for r in range(_TOP, _MID + 1)],
    "g": [(_MID, c) for c in range(_LEFT, _RIGHT + 1)],
    "h": [(_TOP + i, _LEFT + i) for i in range(5)],
    "i": [(_MID + i, _RIGHT - i) for i in range(5)],
    "j": [(r, (_LEFT + _RIGHT) // 2) for r in range(_TOP, _BOT + 1)],
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]
# digits ordered so that any prefix is a set of strongly overlapping glyphs
_OBJECTS = [_DIGITS[i] for i in (8, 9, 6, 0, 3, 5, 2, 4, 7, 1)]


def glyph_templates(K, style="digits"):
    """K distinct binary 12x12 templates (digits first, then seeded segment sets)."""
    codes = list((_DIGITS if style == "digits" else _OBJECTS)[:K])
    if K > len(codes):
        rng = np.random.default_rng(12345)
        names = sorted(_SEGMENTS)
        seen = {frozenset(c) for c in codes}
        while len(codes) < K:
            pick = frozenset(n for n in names if rng.random() < 0.45)
            if len(pick) >= 2 and pick not in seen:
                seen.add(pick)
                codes.append("".join(sorted(pick)))
    out = np.zeros((K, CANVAS, CANVAS), dtype=np.float32)
    for k, code in enumerate(codes):
        for seg in code:
            for r, c in _SEGMENTS[seg]:
                out[k, r, c] = 1.0
    return out


def palette(L, floor=0.0):
    """L evenly spaced hues; every channel is at least ``floor`` so shapes stay visible."""
    rgb = np.array([colorsys.hsv_to_rgb(i / L, 1.0, 1.0) for i in range(L)], dtype=np.float32)
    return floor + (1.0 - floor) * rgb


def render(y, z, K, L, noise, rng, backdrop=0.0, style="digits"):
    """Render glyphs ``y`` in palette colours ``z``; returns (n, 432) float32 in [0, 1]."""
    y = np.asarray(y)
    z = np.asarray(z)
    templates = glyph_templates(K, style)
    shifts = rng.integers(-1, 2, size=(y.size, 2))
    glyphs = np.empty((y.size, CANVAS, CANVAS), dtype=np.float32)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            sel = (shifts[:, 0] == dr) & (shifts[:, 1] == dc)
            if sel.any():
                glyphs[sel] = np.roll(templates[y[sel]], (dr, dc), axis=(1, 2))
    if backdrop:
        glyphs = backdrop + (1.0 - backdrop) * glyphs
    colors = palette(L)[z]
    img = glyphs[:, :, :, None] * colors[:, None, None, :]
    if noise > 0:
        img += rng.uniform(-noise, noise, size=img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return img.reshape(y.size, -1)


class LabeledView(NamedTuple):
    """What training and model selection are allowed to see."""

    X: np.ndarray
    y: np.ndarray


@dataclass
class Dataset:
    """Features, targets and the hidden bias attribute of one split.

    ``z`` is for evaluation only; training code receives :meth:`visible`.
    """

    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    K: int
    L: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        if self.K < 2 or self.L < 2:
            raise ConfigurationError("K and L must be at least 2")
        if not (self.X.ndim == 2 and self.X.shape[0] == self.y.size == self.z.size):
            raise ConfigurationError("X, y and z lengths differ")

    def __len__(self):
        return self.y.size

    def visible(self):
        return LabeledView(self.X, self.y)

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.z[idx], self.K, self.L, self.split,
                       dict(self.provenance))

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.K == other.K and self.L == other.L
                and self.split == other.split and self.provenance == other.provenance
                and np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y)
                and np.array_equal(self.z, other.z))


@dataclass
class SystematicPattern:
    """Which (shape, colour) cells may appear in development data."""

    allowed: np.ndarray
    C: int

    @property
    def n_in_distribution(self):
        return int(self.allowed.sum())

    @property
    def n_out_of_distribution(self):
        return int(self.allowed.size - self.allowed.sum())

    def in_distribution(self, y, z):
        return self.allowed[np.asarray(y), np.asarray(z)]


def _check_beta(beta):
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError(f"beta must lie in [0, 1], got {beta}")


def draw_biased_colors(y, K, beta, rng):
    """z = y with probability 1 - beta, otherwise uniform over the other K - 1 colours."""
    _check_beta(beta)
    conflict = rng.random(y.size) < beta
    other = (y + rng.integers(1, K, size=y.size)) % K
    return np.where(conflict, other, y)


def gen_colored_patterns(K, beta, n, noise=0.3, seed=0, split="train"):
    """Colour-biased glyph classification data (a coloured-digit analogue)."""
    _check_beta(beta)
    if K < 2 or n < K:
        raise ConfigurationError(f"need K >= 2 and n >= K, got K={K}, n={n}")
    rng = substream(seed, "datagen", "colored", split)
    y = rng.integers(0, K, size=n)
    z = draw_biased_colors(y, K, beta, rng)
    X = render(y, z, K, K, noise, rng)
    prov = {"generator": "colored_patterns", "version": GENERATOR_VERSION, "seed": int(seed),
            "K": K, "beta": float(beta), "n": int(n), "noise": float(noise)}
    return Dataset(X, y, z, K, K, split, prov)


def gen_colored_task(K, beta, n_train, n_valid, n_test, noise=0.3, seed=0):
    """Biased train/valid splits and an unbiased (uniform-group) test split."""
    train = gen_colored_patterns(K, beta, n_train, noise, seed, "train")
    valid = gen_colored_patterns(K, beta, n_valid, noise, seed, "valid")
    test = gen_colored_patterns(K, (K - 1) / K, n_test, noise, seed, "test")
    return train, valid, test


def systematic_pattern(K, L, C, rng):
    """Circulant allowed-cell pattern under random row and column permutations."""
    if not 2 <= C <= L:
        raise ConfigurationError(f"need 2 <= C <= L, got C={C}, L={L}")
    if K != L:
        raise ConfigurationError("a pattern uniform over both shapes and colours is only supported for K == L")
    base = np.zeros((K, L), dtype=bool)
    for s in range(K):
        base[s, (s + np.arange(C)) % L] = True
    rows = rng.permutation(K)
    cols = rng.permutation(L)
    return SystematicPattern(base[rows][:, cols], C)


def gen_systematic_split(K, L, C, n_train, n_valid, n_test, noise=0.1, seed=0, backdrop=0.3):
    """Shape/colour grid with ``C`` colours per shape in development data.

    Returns ``(train, valid, test, pattern)``; test cells are balanced over all
    ``K * L`` combinations including those never seen in development.
    """
    rng = substream(seed, "datagen", "systematic")
    pattern = systematic_pattern(K, L, C, rng)
    prov = {"generator": "systematic_split", "version": GENERATOR_VERSION, "seed": int(seed),
            "K": K, "L": L, "C": C, "noise": float(noise), "backdrop": float(backdrop),
            "n_train": int(n_train), "n_valid": int(n_valid), "n_test": int(n_test),
            "allowed": pattern.allowed.astype(int).tolist()}

    # development samples are drawn jointly, then cut into disjoint train/valid parts
    n_dev = n_train + n_valid
    allowed_colors = np.array([np.flatnonzero(row) for row in pattern.allowed])
    y = rng.integers(0, K, size=n_dev)
    z = allowed_colors[y, rng.integers(0, C, size=n_dev)]
    X = render(y, z, K, L, noise, rng, backdrop, "objects")
    train = Dataset(X[:n_train], y[:n_train], z[:n_train], K, L, "train", prov)
    valid = Dataset(X[n_train:], y[n_train:], z[n_train:], K, L, "valid", prov)

    cells = rng.permutation(np.arange(n_test) % (K * L))
    ty, tz = cells // L, cells % L
    test = Dataset(render(ty, tz, K, L, noise, rng, backdrop, "objects"), ty, tz, K, L, "test", prov)
    return train, valid, test, pattern


def empirical_group_table(d):
    """K x L matrix of group frequencies count(y, z) / n."""
    if len(d) == 0:
        raise ConfigurationError("empty dataset")
    counts = np.zeros((d.K, d.L))
    np.add.at(counts, (d.y, d.z), 1.0)
    return counts / len(d)


# ---------------------------------------------------------------------------
# file format


def write_dataset(d, path):
    header = {
        "K": d.K, "L": d.L, "split": d.split, "provenance": d.provenance,
        "image_shape": list(IMAGE_SHAPE),
        "sections": {"features": "float32", "y": "uint16", "z": "uint16 (evaluation only)"},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    n, D = d.X.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<QQ", n, D))
        fh.write(np.asarray(d.X, dtype="<f4").tobytes())
        fh.write(np.asarray(d.y, dtype="<u2").tobytes())
        fh.write(np.asarray(d.z, dtype="<u2").tobytes())


def read_dataset(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        n, D = struct.unpack_from("<QQ", data, 12 + hlen)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt dataset header ({exc})") from None
    off = 12 + hlen + 16
    need = off + 4 * n * D + 4 * n
    if len(data) != need:
        raise FormatError(f"{path}: truncated dataset ({len(data)} bytes, expected {need})")
    X = np.frombuffer(data, dtype="<f4", count=n * D, offset=off).reshape(n, D)
    off += 4 * n * D
    y = np.frombuffer(data, dtype="<u2", count=n, offset=off)
    z = np.frombuffer(data, dtype="<u2", count=n, offset=off + 2 * n)
    return Dataset(X.copy(), y, z, header["K"], header["L"], header["split"], header["provenance"])
