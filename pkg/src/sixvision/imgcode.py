"""Address <-> binary image codec, per-bit entropy maps, and feature stitching.

An address image is an 8x16 uint8 array: row ``g`` holds the 16 bits of
group ``g``, most significant bit in column 0. Stitched training examples
are 16x16 arrays with two address images stacked vertically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .addr import Address, format_address

ROWS, COLS = 8, 16
ENTROPY_MODES = ("standard", "paper-literal")


class EmptySet(ValueError):
    pass


class EmptySubclass(ValueError):
    pass


def encode_many(addresses: Sequence[Address]) -> np.ndarray:
    """Encode addresses as an ``(n, 8, 16)`` uint8 array."""
    if len(addresses) == 0:
        return np.zeros((0, ROWS, COLS), dtype=np.uint8)
    raw = b"".join(a.value.to_bytes(16, "big") for a in addresses)
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    return bits.reshape(len(addresses), ROWS, COLS)


def decode_many(images: np.ndarray) -> list[Address]:
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (ROWS, COLS):
        raise ValueError(f"expected (n, 8, 16) images, got {images.shape}")
    packed = np.packbits((images > 0).astype(np.uint8).reshape(len(images), -1), axis=1)
    return [Address(int.from_bytes(row.tobytes(), "big")) for row in packed]


def encode(a: Address) -> np.ndarray:
    return encode_many([a])[0]


def decode(img: np.ndarray) -> Address:
    img = np.asarray(img)
    if img.shape != (ROWS, COLS):
        raise ValueError(f"expected an 8x16 image, got {img.shape}")
    return decode_many(img[None])[0]


@dataclass(frozen=True)
class EntropyImage:
    values: np.ndarray  # (8, 16) float64
    ce: float
    mode: str = "standard"

    def to_pgm(self, path: str | Path) -> None:
        # darker pixels mean lower entropy
        scale = 1.0 if self.mode == "standard" else 0.25
        write_pgm(self.values / scale, path)

    def to_csv(self, path: str | Path) -> None:
        write_csv(self.values, path)


def bit_entropy(p: np.ndarray) -> np.ndarray:
    """Binary entropy in bits with 0*log(0) taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    q = p[inner]
    out[inner] = -(q * np.log2(q) + (1 - q) * np.log2(1 - q))
    return out


def set_entropy(addresses: Iterable[Address], mode: str = "standard") -> EntropyImage:
    """Per-bit entropy of an address set and its mean (the comprehensive entropy).

    ``standard`` is plain binary entropy in bits, in [0, 1]. ``paper-literal``
    multiplies by 1/4, which caps every pixel at 0.25.
    """
    if mode not in ENTROPY_MODES:
        raise ValueError(f"unknown entropy mode {mode!r}; expected one of {ENTROPY_MODES}")
    uniq = sorted(set(addresses))
    if not uniq:
        raise EmptySet("entropy of an empty address set is undefined")
    p1 = encode_many(uniq).mean(axis=0, dtype=np.float64)
    values = bit_entropy(p1)
    if mode == "paper-literal":
        values = values / 4.0
    return EntropyImage(values, float(values.mean()), mode)


def dictionary_order(addresses: Iterable[Address]) -> list[Address]:
    return sorted(addresses, key=format_address)


def pair_indices(n: int, fanout: int = 5, mode: str = "sequential",
                 rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    """Index pairs (top, bottom) for stitching a subclass of size ``n``.

    Sequential mode pairs each item with the next ``fanout`` items, wrapping
    around the end; offsets that wrap back onto an already-used partner are
    dropped, so each item gets ``min(fanout, n - 1)`` partners. Random mode
    draws the same number of distinct partners per item from ``rng``.
    """
    if n < 1:
        raise EmptySubclass("cannot stitch an empty subclass")
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    if n == 1:
        return [(0, 0)]
    per = min(fanout, n - 1)
    if mode == "sequential":
        return [(t, (t + d) % n) for t in range(n) for d in range(1, per + 1)]
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        pairs = []
        for t in range(n):
            others = np.delete(np.arange(n), t)
            for j in rng.choice(others, size=per, replace=False):
                pairs.append((t, int(j)))
        return pairs
    raise ValueError(f"unknown stitch mode {mode!r}")


def stitch_pairs(subclass: np.ndarray, fanout: int = 5, mode: str = "sequential",
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Stack image pairs into ``(m, 16, 16)`` examples.

    ``subclass`` must already be in dictionary order of the canonical address
    text; use :func:`stitch_addresses` to get that for free.
    """
    subclass = np.asarray(subclass)
    pairs = pair_indices(len(subclass), fanout, mode, rng)
    top = subclass[[p[0] for p in pairs]]
    bottom = subclass[[p[1] for p in pairs]]
    return np.concatenate([top, bottom], axis=1)


def stitch_addresses(addresses: Iterable[Address], fanout: int = 5, mode: str = "sequential",
                     rng: np.random.Generator | None = None) -> np.ndarray:
    ordered = dictionary_order(set(addresses))
    return stitch_pairs(encode_many(ordered), fanout, mode, rng)


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    """Plain (P2) grayscale PGM; values in [0, 1] map to 0..255."""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    h, w = values.shape
    pix = np.rint(values * 255).astype(int)
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if tokens[0] != "P2":
        raise ValueError("only plain P2 PGM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:4 + w * h]], dtype=np.float64)
    return data.reshape(h, w) / maxval


def write_csv(values: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(values):
            w.writerow([repr(float(v)) if np.issubdtype(np.asarray(values).dtype, np.floating) else int(v)
                        for v in row])


class AddressImageEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer from addresses to flattened or 2-D bit images."""

    def __init__(self, flatten: bool = False):
        self.flatten = flatten

    def fit(self, X, y=None):
        self.n_features_out_ = ROWS * COLS
        return self

    def transform(self, X):
        imgs = encode_many(list(X))
        return imgs.reshape(len(imgs), -1) if self.flatten else imgs

    def inverse_transform(self, X):
        X = np.asarray(X)
        return decode_many(X.reshape(len(X), ROWS, COLS))
