"""Multi-task U-Net: shared encoder-decoder with segmentation and area heads.

Layout for ``depth`` down-sampling stages and ``base`` channels::

    enc{d}:  conv3x3+relu, conv3x3+relu      (base * 2**d channels), max-pool 2
    bottom:  conv3x3+relu, conv3x3+relu      (base * 2**depth channels)
    dec{d}:  up-conv 2x2/2, concat skip, conv3x3+relu x2   for d = depth-1 .. 1
    dec0:    up-conv 2x2/2, concat skip    <- the two task paths split here
      seg:   conv3x3+relu x2, conv1x1, sigmoid
      reg:   conv3x3+relu, max-pool 4, fully-connected -> area

Parameters are declared (and initialised) shared-first, so a single-task
``UNet`` built with the same seed has the same shared weights as ``MTUNet``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 64
    depth: int = 3
    base_channels: int = 8
    seed: int = 0
    # the area head outputs multiples of this many mm^2
    area_scale_mm2: float = 100.0

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_size < 1 or self.input_size % (2 ** self.depth):
            raise ValueError(
                f"input_size={self.input_size} must be divisible by 2**depth={2 ** self.depth}")
        if self.area_scale_mm2 <= 0:
            raise ValueError("area_scale_mm2 must be positive")
        if self.input_size % 4:
            raise ValueError(f"input_size={self.input_size} must be divisible by 4 (regression max-pool)")


class UNet:
    """Single-task U-Net (segmentation head only)."""

    multi_task = False

    def __init__(self, config: NetConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._declare_shared()

    # -- construction ---------------------------------------------------

    def _add(self, name: str, *shape: int) -> None:
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def _conv(self, name: str, c_in: int, c_out: int, k: int = 3) -> None:
        self._add(f"{name}.weight", c_out, c_in, k, k)
        self._add(f"{name}.bias", c_out)

    def _declare_shared(self) -> None:
        b, depth = self.config.base_channels, self.config.depth
        c_in = 1
        for d in range(depth):
            c = b * 2 ** d
            self._conv(f"enc{d}.conv1", c_in, c)
            self._conv(f"enc{d}.conv2", c, c)
            c_in = c
        c = b * 2 ** depth
        self._conv("bottom.conv1", c_in, c)
        self._conv("bottom.conv2", c, c)
        for d in reversed(range(depth)):
            c_skip = b * 2 ** d
            self._add(f"dec{d}.up.weight", c, c_skip, 2, 2)
            self._add(f"dec{d}.up.bias", c_skip)
            if d > 0:
                self._conv(f"dec{d}.conv1", 2 * c_skip, c_skip)
                self._conv(f"dec{d}.conv2", c_skip, c_skip)
            c = c_skip
        self._conv("seg.conv1", 2 * b, b)
        self._conv("seg.conv2", b, b)
        self._conv("seg.out", b, 1, k=1)

    # -- access ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def weight_names(self) -> list[str]:
        """Conv / transposed-conv / fully-connected weights (Kaiming targets)."""
        return [n for n, p in self.params.items() if n.endswith(".weight")]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward --------------------------------------------------------

    def _block(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        x = T.relu(T.conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding=1))
        return T.relu(T.conv2d(x, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], padding=1))

    def trunk(self, x: Tensor) -> Tensor:
        """Shared path up to the final up-sampling + concatenation."""
        p, depth = self.params, self.config.depth
        skips = []
        h = x
        for d in range(depth):
            h = self._block(h, f"enc{d}")
            skips.append(h)
            h, _ = T.max_pool2d(h, 2)
        h = self._block(h, "bottom")
        for d in reversed(range(depth)):
            up = T.transposed_conv2d(h, p[f"dec{d}.up.weight"], p[f"dec{d}.up.bias"])
            h = T.concat_channels(skips[d], up)
            if d > 0:
                h = self._block(h, f"dec{d}")
        return h

    def seg_logits(self, h: Tensor) -> Tensor:
        p = self.params
        h = self._block(h, "seg")
        return T.conv2d(h, p["seg.out.weight"], p["seg.out.bias"], padding=0)

    def forward_logits(self, images) -> tuple[Tensor, Tensor | None]:
        """Pre-sigmoid segmentation scores and (for MTUNet) the area prediction."""
        x = self._check_input(images)
        return self.seg_logits(self.trunk(x)), None

    def forward_batch(self, images) -> tuple[Tensor, Tensor | None]:
        """Run ``(N, 1, S, S)`` images; returns probabilities and area (None here)."""
        logits, area = self.forward_logits(images)
        return T.sigmoid(logits), area

    def _check_input(self, images) -> Tensor:
        x = T.as_tensor(images)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ValueError(f"expected input of shape (N, 1, {s}, {s}), got {x.shape}")
        return x


class MTUNet(UNet):
    """U-Net with an extra area-regression path and two log-uncertainties.

    ``s1`` weights the regression (MAD) loss, ``s2`` the segmentation
    (cross-entropy) loss.
    """

    multi_task = True

    def __init__(self, config: NetConfig):
        super().__init__(config)
        b, s = config.base_channels, config.input_size
        self._conv("reg.conv", 2 * b, b)
        self._add("reg.fc.weight", 1, b * (s // 4) ** 2)
        self._add("reg.fc.bias", 1)
        self._add("s1", 1)
        self._add("s2", 1)

    @property
    def s1(self) -> Tensor:
        return self.params["s1"]

    @property
    def s2(self) -> Tensor:
        return self.params["s2"]

    def reg_head(self, h: Tensor) -> Tensor:
        p = self.params
        h = T.relu(T.conv2d(h, p["reg.conv.weight"], p["reg.conv.bias"], padding=1))
        h, _ = T.max_pool2d(h, 4)
        out = T.linear(h, p["reg.fc.weight"], p["reg.fc.bias"])  # (N, 1)
        out = T.reshape(out, (out.shape[0],))
        scale = self.config.area_scale_mm2
        return out if scale == 1.0 else T.mul(out, scale)

    def forward_logits(self, images) -> tuple[Tensor, Tensor]:
        x = self._check_input(images)
        h = self.trunk(x)
        return self.seg_logits(h), self.reg_head(h)


def init_kaiming_uniform(net: UNet, seed: int) -> None:
    """Weights ~ U(-b, b), b = sqrt(6 / fan_in); biases and log-uncertainties zero.

    Draws happen in parameter declaration order from one generator. For the
    transposed convolution, fan_in is C_in: each output pixel receives exactly
    one tap from every input channel.
    """
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        if name.endswith(".weight"):
            shape = p.shape
            if ".up." in name:
                fan_in = shape[0]
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[1]
            bound = math.sqrt(6.0 / fan_in)
            p.data = rng.uniform(-bound, bound, size=shape)
        else:
            p.data = np.zeros(p.shape)
        p.grad = None


def build(config: NetConfig) -> MTUNet:
    net = MTUNet(config)
    init_kaiming_uniform(net, config.seed)
    return net


def build_single_task(config: NetConfig) -> UNet:
    net = UNet(config)
    init_kaiming_uniform(net, config.seed)
    return net


def forward(net: UNet, image) -> tuple[Tensor, Tensor | None]:
    """Single-image forward: ``(1, S, S)`` -> ``(1, S, S)`` probabilities, scalar area."""
    x = T.as_tensor(image)
    if x.ndim != 3:
        raise ValueError(f"expected a (1, S, S) image, got shape {x.shape}")
    seg, area = net.forward_batch(T.reshape(x, (1,) + x.shape))
    seg = T.reshape(seg, seg.shape[1:])
    if area is not None:
        area = T.reshape(area, ())
    return seg, area


def predict(net: UNet, images: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference over ``(N, S, S)`` images without recording a graph."""
    probs, areas = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size, None]
            seg, area = net.forward_batch(chunk)
            probs.append(seg.data[:, 0])
            if area is not None:
                areas.append(area.data)
    p = np.concatenate(probs) if probs else np.zeros((0,) + images.shape[1:])
    return p, np.concatenate(areas) if areas else None


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: UNet, *, epoch: int, best_dice: float,
                    extra: dict | None = None, state: dict[str, np.ndarray] | None = None) -> None:
    """One JSON header line, then TNSR blocks: parameters, then optional state arrays."""
    header = {
        "config": asdict(net.config),
        "multi_task": net.multi_task,
        "epoch": epoch,
        "best_dice": best_dice,
        "params": [[n, list(p.shape)] for n, p in net.params.items()],
        "state": sorted(state) if state else [],
    }
    if net.multi_task:
        header["s1"] = net.params["s1"].item()
        header["s2"] = net.params["s2"].item()
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fp:
        fp.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for p in net.params.values():
            T.write_tensor(fp, p.data)
        for key in header["state"]:
            T.write_tensor(fp, state[key])


def load_checkpoint(path) -> tuple[UNet, dict, dict[str, np.ndarray]]:
    """Rebuild the network stored at ``path``; returns (net, header, state)."""
    with open(path, "rb") as fp:
        header = json.loads(fp.readline())
        config = NetConfig(**header["config"])
        net = MTUNet(config) if header["multi_task"] else UNet(config)
        names = [n for n, _ in header["params"]]
        if names != list(net.params):
            raise ValueError(f"{Path(path).name}: parameter layout does not match its config")
        for name in names:
            arr = T.read_tensor(fp)
            if arr.shape != net.params[name].shape:
                raise ValueError(f"{Path(path).name}: shape mismatch for {name}")
            net.params[name].data = arr
        state = {key: T.read_tensor(fp) for key in header["state"]}
    return net, header, state
