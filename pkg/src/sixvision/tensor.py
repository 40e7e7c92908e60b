"""Numeric substrate for the two models: masked convolutions, gates, gradients,
an Adam step, and a bit-exact checkpoint container.

Tensors are ``torch.Tensor`` in float32 NCHW layout; autograd supplies
reverse-mode gradients.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

MASK_KINDS = ("vertical", "vertical-B", "horizontal-A", "horizontal-B", "none")
CHECKPOINT_FORMAT = "sixvision-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class OddChannelCount(ValueError):
    pass


class GraphConsumed(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskedConvSpec:
    kernel_h: int
    kernel_w: int
    mask_kind: str
    in_channels: int
    out_channels: int
    dilation: int = 1  # spacing between kernel columns; rows are never dilated

    def __post_init__(self):
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.mask_kind!r}")
        if self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError("kernel sizes must be odd so 'same' padding is centred")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def make_mask(spec: MaskedConvSpec) -> torch.Tensor:
    """Binary ``(kh, kw)`` tap mask.

    vertical keeps every row strictly above the centre; vertical-B also keeps
    the centre row, for feature maps that already lag the input by one row.
    horizontal-A keeps the centre row left of the centre; horizontal-B also
    keeps the centre tap.
    """
    kh, kw = spec.kernel_h, spec.kernel_w
    ch, cw = kh // 2, kw // 2
    mask = torch.zeros(kh, kw)
    if spec.mask_kind == "none":
        mask[:] = 1
    elif spec.mask_kind == "vertical":
        mask[:ch, :] = 1
    elif spec.mask_kind == "vertical-B":
        mask[: ch + 1, :] = 1
    elif spec.mask_kind == "horizontal-A":
        mask[ch, :cw] = 1
    else:
        mask[ch, : cw + 1] = 1
    return mask


def _tap_box(mask: torch.Tensor) -> tuple[int, int, int, int] | None:
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    if len(rows) == 0:
        return None
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def conv2d_masked(input: torch.Tensor, spec: MaskedConvSpec, weights: torch.Tensor,
                  bias: torch.Tensor | None = None) -> torch.Tensor:
    """Zero-padded 'same' convolution with masked kernel taps.

    Only the bounding box of the live taps is convolved; the result equals a
    full-kernel convolution with ``weights * mask``.
    """
    if input.ndim != 4 or input.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"input {tuple(input.shape)} does not match {spec.in_channels} input channels")
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeMismatch(f"weights {tuple(weights.shape)} != {spec.weight_shape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeMismatch(f"bias {tuple(bias.shape)} != ({spec.out_channels},)")

    n, _, h, w = input.shape
    mask = make_mask(spec).to(weights.dtype)
    box = _tap_box(mask)
    if box is None:
        out = input.new_zeros(n, spec.out_channels, h, w)
        return out if bias is None else out + bias.view(1, -1, 1, 1)
    r0, r1, c0, c1 = box
    ch, cw = spec.kernel_h // 2, spec.kernel_w // 2
    d = spec.dilation
    kernel = (weights * mask)[:, :, r0 : r1 + 1, c0 : c1 + 1]
    # negative pads crop, which is how a strictly-above kernel stays causal
    padded = F.pad(input, ((cw - c0) * d, (c1 - cw) * d, ch - r0, r1 - ch))
    return F.conv2d(padded, kernel, bias, dilation=(1, d))


def gated_activation(features: torch.Tensor) -> torch.Tensor:
    """tanh(first half of channels) * sigmoid(second half)."""
    c = features.shape[1]
    if c % 2:
        raise OddChannelCount(f"gated activation needs an even channel count, got {c}")
    f, g = features[:, : c // 2], features[:, c // 2 :]
    return torch.tanh(f) * torch.sigmoid(g)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named parameter.

    Parameters the loss does not reach (or a constant loss) get zeros. The
    graph is released afterwards; a second call on it raises GraphConsumed.
    """
    if loss.numel() != 1:
        raise ShapeMismatch("backward needs a scalar loss")
    names = list(params)
    if loss.grad_fn is None:
        return {k: torch.zeros_like(params[k]) for k in names}
    try:
        grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    except RuntimeError as exc:
        if "second time" in str(exc) or "freed" in str(exc):
            raise GraphConsumed("graph already consumed by an earlier backward") from exc
        raise
    return {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}


def optimizer_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
                   state: dict, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    b1, b2 = betas
    t = state.get("step", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
            m = m_all.get(name)
            v = v_all.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            m_all[name], v_all[name] = m, v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.sub_(lr * mhat / (vhat.sqrt() + eps))
    state["step"] = t
    return state


class Adam:
    """Stateful wrapper over :func:`optimizer_step` for a module's parameters."""

    def __init__(self, module: torch.nn.Module, lr: float = 1e-3):
        self.module = module
        self.lr = lr
        self.state: dict = {}

    def step(self, loss: torch.Tensor) -> None:
        params = dict(self.module.named_parameters())
        optimizer_step(params, backward(loss, params), self.state, self.lr)


def save_checkpoint(tensors: Mapping[str, torch.Tensor], path: str | Path, meta: dict | None = None) -> None:
    """Write ``name -> tensor`` as JSON with little-endian float32 payloads."""
    body = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        body[name] = {"shape": list(arr.shape),
                      "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "meta": meta or {}, "tensors": body}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    out = {}
    for name, entry in doc["tensors"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f4").reshape(entry["shape"])
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out, doc.get("meta", {})


def assert_finite(t: torch.Tensor, what: str = "tensor") -> None:
    if __debug__ and not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
