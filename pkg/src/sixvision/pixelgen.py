"""Per-subclass Gated PixelCNN over address images.

The model trains on stitched 16x16 examples and samples 8x16 address images
in raster order. Layout per block follows the two-stack gated design: a
vertical stack that only sees rows strictly above, and a horizontal stack
that sees pixels to the left in the current row plus the vertical features.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import imgcode
from .addr import Address
from .tensor import (Adam, MaskedConvSpec, assert_finite, conv2d_masked, gated_activation,
                     load_checkpoint, save_checkpoint)

logger = logging.getLogger(__name__)

PERIOD = imgcode.ROWS
WIDTH = imgcode.COLS


class EmptyCorpus(ValueError):
    pass


class GenerationStalled(RuntimeError):
    def __init__(self, emitted: int, requested: int, batch: "CandidateBatch"):
        self.emitted = emitted
        self.requested = requested
        self.batch = batch
        super().__init__(f"generation stalled after {emitted} of {requested} novel addresses")


class MaskedConv2d(nn.Module):
    def __init__(self, spec: MaskedConvSpec):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * max(1, int(_live_taps(spec)))
        bound = 1.0 / fan_in**0.5
        self.weight = nn.Parameter(torch.empty(spec.weight_shape).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(spec.out_channels))

    def forward(self, x):
        return conv2d_masked(x, self.spec, self.weight, self.bias)

    def tap(self, dy: int, dx: int) -> torch.Tensor:
        """Weight matrix ``(out, in)`` for the tap at offset (dy, dx) from centre."""
        k = self.spec
        return self.weight[:, :, k.kernel_h // 2 + dy, k.kernel_w // 2 + dx]


def _live_taps(spec: MaskedConvSpec) -> int:
    from .tensor import make_mask

    return int(make_mask(spec).sum())


class GatedBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int = 1):
        super().__init__()
        c = channels
        self.dilation = dilation
        self.v_conv = MaskedConv2d(MaskedConvSpec(kernel, kernel, "vertical-B", c, 2 * c, dilation))
        self.h_conv = MaskedConv2d(MaskedConvSpec(kernel, kernel, "horizontal-B", c, 2 * c, dilation))
        self.v_to_h = nn.Conv2d(c, 2 * c, 1, bias=False)
        self.h_out = nn.Conv2d(c, c, 1)

    def forward(self, v, h):
        v = v + gated_activation(self.v_conv(v))
        h = h + self.h_out(gated_activation(self.h_conv(h) + self.v_to_h(v)))
        return v, h


class GatedPixelCNN(nn.Module):
    """Bernoulli-output Gated PixelCNN, fully convolutional over H x 16 inputs.

    A learned position map indexed by (row mod 8, column) is added before the
    first gates so each row knows which address group it encodes. Block
    kernels are dilated along columns (1, 2, 4, 8, ...) so that, together
    with the input layer, every pixel sees the whole row width.
    """

    def __init__(self, hidden_channels: int = 32, n_blocks: int = 5, kernel: int = 3,
                 position_bias: bool = True, seed: int = 0, dilations: Sequence[int] | None = None):
        super().__init__()
        if kernel != 3:
            raise ValueError("the cached sampler assumes 3x3 kernels")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            c = hidden_channels
            self.hidden_channels = c
            self.v_in = MaskedConv2d(MaskedConvSpec(kernel, kernel, "vertical", 1, 2 * c))
            self.h_in = MaskedConv2d(MaskedConvSpec(kernel, kernel, "horizontal-A", 1, 2 * c))
            self.v_to_h_in = nn.Conv2d(c, 2 * c, 1, bias=False)
            if dilations is None:
                dilations = [min(2**i, WIDTH // 2) for i in range(n_blocks)]
            if len(dilations) != n_blocks:
                raise ValueError("need one dilation per block")
            self.blocks = nn.ModuleList(GatedBlock(c, kernel, d) for d in dilations)
            self.head1 = nn.Conv2d(c, c, 1)
            self.head2 = nn.Conv2d(c, 1, 1)
            self.position = nn.Parameter(torch.zeros(2 * c, PERIOD, WIDTH)) if position_bias else None

    def _pos(self, height: int) -> torch.Tensor | int:
        if self.position is None:
            return 0
        reps = -(-height // PERIOD)
        return self.position.repeat(1, reps, 1)[:, :height].unsqueeze(0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel logits for a ``(n, 1, H, 16)`` float batch of bits."""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[3] != WIDTH:
            raise ValueError(f"expected (n, 1, H, {WIDTH}) input, got {tuple(x.shape)}")
        pos = self._pos(x.shape[2])
        v = gated_activation(self.v_in(x) + pos)
        h = gated_activation(self.h_in(x) + self.v_to_h_in(v) + pos)
        for block in self.blocks:
            v, h = block(v, h)
        return self.head2(F.relu(self.head1(F.relu(h))))

    @torch.no_grad()
    def autoregress(self, n: int, height: int = PERIOD, generator: torch.Generator | None = None,
                    temperature: float = 1.0, teacher: torch.Tensor | None = None):
        """Raster-order sampling with cached activations.

        Each pixel costs one pass over a single column of every layer. With
        ``teacher`` given, its pixels are used instead of draws, which makes
        the returned logits directly comparable with :meth:`forward`.
        """
        c = self.hidden_channels
        x = torch.zeros(n, 1, height, WIDTH)
        logits = torch.zeros(n, 1, height, WIDTH)
        pos = self._pos(height)
        pos = pos.expand(n, -1, -1, -1) if isinstance(pos, torch.Tensor) else torch.zeros(n, 2 * c, height, WIDTH)
        nl = len(self.blocks)
        # vertical stack activations, per layer, full image
        vs = [torch.zeros(n, c, height, WIDTH) for _ in range(nl + 1)]

        def above(conv: MaskedConv2d, src: torch.Tensor, r: int) -> torch.Tensor:
            # taps on row r-1, plus row r for vertical-B (src already lags a row)
            d = conv.spec.dilation
            out = conv.bias.view(1, -1, 1).expand(n, -1, WIDTH)
            dys = (-1, 0) if conv.spec.mask_kind == "vertical-B" else (-1,)
            for dy in dys:
                if r + dy < 0:
                    continue
                row = F.pad(src[:, :, r + dy], (d, d))
                w = torch.stack([conv.tap(dy, dx) for dx in (-1, 0, 1)], dim=-1)
                out = out + F.conv1d(row, w, None, dilation=d)
            return out

        h_in_left = self.h_in.tap(0, -1)[:, 0]
        for r in range(height):
            vs[0][:, :, r] = gated_activation(above(self.v_in, x[:, :, :, :], r) + pos[:, :, r])
            for li, block in enumerate(self.blocks):
                vs[li + 1][:, :, r] = vs[li][:, :, r] + gated_activation(above(block.v_conv, vs[li], r))
            u0 = (torch.einsum("oc,ncw->now", self.v_to_h_in.weight[:, :, 0, 0], vs[0][:, :, r])
                  + pos[:, :, r] + self.h_in.bias.view(1, -1, 1))
            us = [torch.einsum("oc,ncw->now", b.v_to_h.weight[:, :, 0, 0], vs[li + 1][:, :, r])
                  + b.h_conv.bias.view(1, -1, 1) for li, b in enumerate(self.blocks)]
            # horizontal activations of this row, per layer, for dilated left taps
            hrow = [torch.zeros(n, c, WIDTH) for _ in range(nl + 1)]
            for col in range(WIDTH):
                pre = u0[:, :, col]
                if col > 0:
                    pre = pre + x[:, 0, r, col - 1 : col] * h_in_left
                hcur = [gated_activation(pre)]
                for li, b in enumerate(self.blocks):
                    prev = hcur[li]
                    pre = us[li][:, :, col] + prev @ b.h_conv.tap(0, 0).T
                    if col >= b.dilation:
                        pre = pre + hrow[li][:, :, col - b.dilation] @ b.h_conv.tap(0, -1).T
                    hcur.append(prev + F.linear(gated_activation(pre), b.h_out.weight[:, :, 0, 0], b.h_out.bias))
                out = F.linear(F.relu(hcur[-1]), self.head1.weight[:, :, 0, 0], self.head1.bias)
                lg = F.linear(F.relu(out), self.head2.weight[:, :, 0, 0], self.head2.bias)[:, 0]
                logits[:, 0, r, col] = lg
                if teacher is not None:
                    x[:, 0, r, col] = teacher[:, 0, r, col]
                else:
                    p = torch.sigmoid(lg / temperature)
                    x[:, 0, r, col] = (torch.rand(n, generator=generator) < p).float()
                for li, hv in enumerate(hcur):
                    hrow[li][:, :, col] = hv
        return x, logits


@dataclass
class CandidateBatch:
    addresses: list[Address]
    origin: int = 0
    generation_round: int = 0
    attempts: int = 0

    def __len__(self):
        return len(self.addresses)

    def __iter__(self):
        return iter(self.addresses)


class DedupLedger:
    """Thread-safe record of every address ever emitted or known."""

    def __init__(self, initial: Iterable[Address] = ()):
        self._seen: set[Address] = set(initial)
        self._lock = threading.Lock()

    def __getstate__(self):
        return {"_seen": set(self._seen)}

    def __setstate__(self, state):
        self._seen = state["_seen"]
        self._lock = threading.Lock()

    def __contains__(self, a: Address) -> bool:
        with self._lock:
            return a in self._seen

    def __len__(self) -> int:
        with self._lock:
            return len(self._seen)

    def add_if_new(self, a: Address) -> bool:
        with self._lock:
            if a in self._seen:
                return False
            self._seen.add(a)
            return True


def _as_float_batch(corpus: np.ndarray) -> torch.Tensor:
    arr = np.asarray(corpus)
    if arr.ndim == 3:
        arr = arr[:, None]
    return torch.from_numpy(arr.astype(np.float32))


def train(model: GatedPixelCNN, corpus: np.ndarray, epochs: int = 40, batch: int = 64,
          seed: int = 0, lr: float = 2e-3, optimizer: Adam | None = None) -> list[float]:
    """Minimise mean per-pixel binary cross-entropy; returns epoch-mean losses."""
    data = _as_float_batch(corpus)
    if len(data) == 0:
        raise EmptyCorpus("cannot train on an empty corpus")
    opt = optimizer or Adam(model, lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(data), batch):
            xb = data[order[start : start + batch]]
            loss = F.binary_cross_entropy_with_logits(model(xb), xb)
            assert_finite(loss, "pixel loss")
            opt.step(loss)
            total += loss.item() * len(xb)
            count += len(xb)
        history.append(total / count)
    model.eval()
    return history


def sample_images(model: GatedPixelCNN, count: int, seed: int = 0, temperature: float = 1.0,
                  batch: int = 1024, generator: torch.Generator | None = None) -> np.ndarray:
    """Raw ``(count, 8, 16)`` samples, no novelty filtering."""
    gen = generator or torch.Generator().manual_seed(seed)
    out = []
    left = count
    while left > 0:
        n = min(batch, left)
        x, _ = model.autoregress(n, PERIOD, gen, temperature)
        out.append(x[:, 0].numpy().astype(np.uint8))
        left -= n
    return np.concatenate(out) if out else np.zeros((0, PERIOD, WIDTH), dtype=np.uint8)


def sample(model: GatedPixelCNN, count: int, seed: int = 0, exclude: Iterable[Address] | DedupLedger = (),
           temperature: float = 1.0, attempt_factor: int = 20, origin: int = 0,
           generation_round: int = 0) -> CandidateBatch:
    """Draw ``count`` novel addresses.

    Draws already in ``exclude`` (seeds, earlier candidates) or repeated within
    the batch are discarded and redrawn, up to ``attempt_factor * count``
    images in total. A DedupLedger passed as ``exclude`` is updated in place.
    """
    ledger = exclude if isinstance(exclude, DedupLedger) else DedupLedger(exclude)
    batch = CandidateBatch([], origin, generation_round)
    if count <= 0:
        return batch
    gen = torch.Generator().manual_seed(seed)
    cap = attempt_factor * count
    while len(batch) < count and batch.attempts < cap:
        need = count - len(batch)
        n = min(cap - batch.attempts, max(64, min(1024, 2 * need)))
        imgs = sample_images(model, n, temperature=temperature, generator=gen)
        batch.attempts += n
        for a in imgcode.decode_many(imgs):
            if len(batch) < count and ledger.add_if_new(a):
                batch.addresses.append(a)
    if len(batch) < count:
        raise GenerationStalled(len(batch), count, batch)
    return batch


def fine_tune(model: GatedPixelCNN, actives: Sequence[Address], replay: np.ndarray | None = None,
              epochs: int = 10, batch: int = 64, seed: int = 0, lr: float = 2e-3,
              replay_ratio: float = 1.0, stitch: bool = True, fanout: int = 5,
              optimizer: Adam | None = None, max_images: int | None = None) -> list[float]:
    """Brief retraining on newly found actives, mixed with replayed corpus items.

    ``max_images`` bounds the mixed corpus; fresh items are subsampled first
    so the replay ratio is kept.
    """
    if len(actives) == 0:
        return []
    if stitch:
        fresh = imgcode.stitch_addresses(actives, fanout)
    else:
        fresh = imgcode.encode_many(imgcode.dictionary_order(set(actives)))
    rng = np.random.default_rng(seed)
    if max_images is not None:
        keep = max(1, int(max_images / (1 + max(replay_ratio, 0.0))))
        if len(fresh) > keep:
            fresh = fresh[np.sort(rng.choice(len(fresh), size=keep, replace=False))]
    parts = [fresh]
    if replay is not None and len(replay) and replay_ratio > 0:
        k = int(round(replay_ratio * len(fresh)))
        idx = rng.choice(len(replay), size=k, replace=k > len(replay))
        parts.append(np.asarray(replay)[idx])
    corpus = np.concatenate(parts)
    return train(model, corpus, epochs, batch, seed, lr, optimizer)


def build_corpus(addresses: Iterable[Address], stitch: bool = True, fanout: int = 5,
                 mode: str = "sequential", seed: int = 0) -> np.ndarray:
    if stitch:
        return imgcode.stitch_addresses(addresses, fanout, mode, np.random.default_rng(seed))
    return imgcode.encode_many(imgcode.dictionary_order(set(addresses)))


class PixelCNNGenerator(BaseEstimator):
    """Estimator wrapper: ``fit`` on seed addresses, ``sample`` candidates,
    ``partial_fit`` for feedback fine-tuning."""

    def __init__(self, hidden_channels: int = 32, n_blocks: int = 5, epochs: int = 40,
                 batch_size: int = 64, learning_rate: float = 2e-3, stitch: bool = True,
                 fanout: int = 5, stitch_mode: str = "sequential", temperature: float = 1.0,
                 fine_tune_epochs: int = 10, replay_ratio: float = 1.0, position_bias: bool = True,
                 fine_tune_cap: int | None = 512, random_state: int = 0):
        self.hidden_channels = hidden_channels
        self.n_blocks = n_blocks
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.stitch = stitch
        self.fanout = fanout
        self.stitch_mode = stitch_mode
        self.temperature = temperature
        self.fine_tune_epochs = fine_tune_epochs
        self.replay_ratio = replay_ratio
        self.position_bias = position_bias
        self.fine_tune_cap = fine_tune_cap
        self.random_state = random_state

    def fit(self, X, y=None):
        addresses = list(X)
        if not addresses:
            raise EmptyCorpus("no addresses to fit")
        self.corpus_ = build_corpus(addresses, self.stitch, self.fanout, self.stitch_mode, self.random_state)
        self.model_ = GatedPixelCNN(self.hidden_channels, self.n_blocks,
                                    position_bias=self.position_bias, seed=self.random_state)
        self.optimizer_ = Adam(self.model_, self.learning_rate)
        self.loss_history_ = train(self.model_, self.corpus_, self.epochs, self.batch_size,
                                   self.random_state, self.learning_rate, self.optimizer_)
        self.n_fine_tunes_ = 0
        return self

    def partial_fit(self, X, y=None):
        check_is_fitted(self, "model_")
        self.n_fine_tunes_ += 1
        losses = fine_tune(self.model_, list(X), self.corpus_, self.fine_tune_epochs, self.batch_size,
                           self.random_state + 7919 * self.n_fine_tunes_, self.learning_rate,
                           self.replay_ratio, self.stitch, self.fanout, self.optimizer_,
                           self.fine_tune_cap)
        self.loss_history_ = self.loss_history_ + losses
        return self

    def sample(self, count: int, seed: int = 0, exclude=(), attempt_factor: int = 20,
               origin: int = 0, generation_round: int = 0) -> CandidateBatch:
        check_is_fitted(self, "model_")
        return sample(self.model_, count, seed, exclude, self.temperature, attempt_factor,
                      origin, generation_round)

    def sample_images(self, count: int, seed: int = 0) -> np.ndarray:
        check_is_fitted(self, "model_")
        return sample_images(self.model_, count, seed, self.temperature)

    def save(self, path) -> None:
        """Checkpoint weights, replay corpus, and constructor params."""
        check_is_fitted(self, "model_")
        tensors = dict(self.model_.state_dict())
        tensors["__corpus__"] = torch.from_numpy(self.corpus_.astype(np.float32))
        meta = {"params": self.get_params(), "loss_history": self.loss_history_,
                "n_fine_tunes": self.n_fine_tunes_}
        save_checkpoint(tensors, path, meta)

    @classmethod
    def load(cls, path) -> "PixelCNNGenerator":
        tensors, meta = load_checkpoint(path)
        gen = cls(**meta["params"])
        gen.corpus_ = tensors.pop("__corpus__").numpy().astype(np.uint8)
        gen.model_ = GatedPixelCNN(gen.hidden_channels, gen.n_blocks,
                                   position_bias=gen.position_bias, seed=gen.random_state)
        gen.model_.load_state_dict(tensors)
        gen.optimizer_ = Adam(gen.model_, gen.learning_rate)
        gen.loss_history_ = list(meta.get("loss_history", []))
        gen.n_fine_tunes_ = int(meta.get("n_fine_tunes", 0))
        return gen
