"""Desk-scale time-domain masking separator.

Structure: a strided conv encoder lifts the waveform into a latent
filterbank; a stack of residual dilated-convolution blocks (pointwise ->
PReLU -> gLN -> depthwise(dilated) -> PReLU -> gLN -> pointwise) estimates
one sigmoid mask per source over the encoder features; a shared transposed
conv decoder returns each masked latent to the time domain. Input length
is restored exactly via symmetric zero-padding to stride alignment plus a
final trim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag

N_SOURCES = 2


@dataclass(frozen=True)
class SeparatorConfig:
    n_filters: int = 64
    kernel: int = 16
    stride: int = 8
    block_channels: int = 64
    n_blocks: int = 4
    n_repeats: int = 2
    block_kernel: int = 3

    def __post_init__(self):
        if self.kernel % self.stride:
            raise ValueError(f"stride {self.stride} must divide kernel {self.kernel}")
        for name in ("n_filters", "kernel", "stride", "block_channels", "n_blocks", "n_repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.n_blocks)]

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Closed-form name -> shape map; the parameter layout contract."""
        n, b, k = self.n_filters, self.block_channels, self.block_kernel
        shapes: dict[str, tuple[int, ...]] = {
            "encoder.w": (n, 1, self.kernel),
            "encoder.b": (n,),
        }
        first = True
        for r in range(self.n_repeats):
            for i in range(self.n_blocks):
                p = f"block{r}_{i}"
                cin = n if first else b
                first = False
                shapes[f"{p}.in.w"] = (b, cin, 1)
                shapes[f"{p}.in.b"] = (b,)
                shapes[f"{p}.prelu1"] = (b,)
                shapes[f"{p}.norm1.gamma"] = (b,)
                shapes[f"{p}.norm1.beta"] = (b,)
                shapes[f"{p}.dw.w"] = (b, 1, k)
                shapes[f"{p}.dw.b"] = (b,)
                shapes[f"{p}.prelu2"] = (b,)
                shapes[f"{p}.norm2.gamma"] = (b,)
                shapes[f"{p}.norm2.beta"] = (b,)
                shapes[f"{p}.out.w"] = (b, b, 1)
                shapes[f"{p}.out.b"] = (b,)
        shapes["mask.w"] = (N_SOURCES * n, b, 1)
        shapes["mask.b"] = (N_SOURCES * n,)
        shapes["decoder.w"] = (n, 1, self.kernel)
        shapes["decoder.b"] = (1,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())


class SeparatorParams:
    """Named parameter tensors of one separator (student or teacher)."""

    def __init__(self, config: SeparatorConfig, tensors: dict[str, ag.Tensor], trainable: bool):
        self.config = config
        self.tensors = tensors
        self.trainable = trainable

    def __getitem__(self, name: str) -> ag.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self, trainable: bool | None = None) -> "SeparatorParams":
        trainable = self.trainable if trainable is None else trainable
        tensors = {
            name: ag.Tensor(t.value.copy(), trainable=trainable) for name, t in self.tensors.items()
        }
        return SeparatorParams(self.config, tensors, trainable)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.value)) for t in self.tensors.values())


def init_params(config: SeparatorConfig, seed: int, trainable: bool = True) -> SeparatorParams:
    """Deterministic init: conv weights ~ U(+-1/sqrt(fan_in)), biases zero,
    PReLU slopes 0.25, norm affine at identity."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, ag.Tensor] = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith(".w"):
            if name.startswith("decoder"):
                fan_in = shape[0] * shape[2]  # transposed conv: latent channels x kernel
            else:
                fan_in = shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        elif "prelu" in name:
            value = np.full(shape, 0.25)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith(".beta"):
            value = np.zeros(shape)
        else:
            raise AssertionError(f"unhandled parameter {name}")
        tensors[name] = ag.Tensor(value, trainable=trainable)
    return SeparatorParams(config, tensors, trainable)


def _alignment_pad(t: int, kernel: int, stride: int) -> tuple[int, int]:
    pad = (stride - (t - kernel) % stride) % stride
    return pad // 2, pad - pad // 2


def forward(params: SeparatorParams, mixture, return_masks: bool = False):
    """Separate a mixture into two estimated sources of the input length.

    Accepts a (T,) or (B, T) array (or Tensor); output shapes mirror the
    input. Gradients flow when called inside an autograd tape.
    """
    cfg = params.config
    x = mixture if isinstance(mixture, ag.Tensor) else ag.Tensor(mixture)
    single = x.ndim == 1
    if single:
        x = ag.reshape(x, (1, x.shape[0]))
    if x.ndim != 2:
        raise ValueError(f"forward expects (T,) or (B, T) input, got shape {x.shape}")
    batch, t = x.shape
    if t < cfg.kernel:
        raise ValueError(f"input length {t} shorter than encoder kernel {cfg.kernel}")

    left, right = _alignment_pad(t, cfg.kernel, cfg.stride)
    h = ag.reshape(x, (batch, 1, t))
    if left or right:
        h = ag.pad1d(h, left, right)
    latent = ag.conv1d(h, params["encoder.w"], params["encoder.b"], stride=cfg.stride)

    h = latent
    for r in range(cfg.n_repeats):
        for i, dil in enumerate(cfg.dilations()):
            p = f"block{r}_{i}"
            y = ag.conv1d(h, params[f"{p}.in.w"], params[f"{p}.in.b"])
            y = ag.prelu(y, params[f"{p}.prelu1"])
            y = ag.global_layer_norm(y, params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"])
            span = (cfg.block_kernel - 1) * dil
            y = ag.pad1d(y, span // 2, span - span // 2)
            y = ag.conv1d(
                y,
                params[f"{p}.dw.w"],
                params[f"{p}.dw.b"],
                dilation=dil,
                groups=cfg.block_channels,
            )
            y = ag.prelu(y, params[f"{p}.prelu2"])
            y = ag.global_layer_norm(y, params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"])
            y = ag.conv1d(y, params[f"{p}.out.w"], params[f"{p}.out.b"])
            h = ag.add(h, y) if (r, i) != (0, 0) else y

    logits = ag.conv1d(h, params["mask.w"], params["mask.b"])
    masks = ag.sigmoid(logits)

    outputs = []
    n = cfg.n_filters
    for src in range(N_SOURCES):
        m = ag.narrow(masks, 1, src * n, n)
        masked = ag.mul(latent, m)
        wave = ag.conv1d_transpose(masked, params["decoder.w"], params["decoder.b"], stride=cfg.stride)
        wave = ag.narrow(wave, 2, left, t)
        outputs.append(ag.reshape(wave, (t,) if single else (batch, t)))

    if return_masks:
        return outputs[0], outputs[1], masks
    return outputs[0], outputs[1]


def as_model(params: SeparatorParams):
    """Bind params into a ``mixture -> (est_s, est_e)`` callable."""

    def model(mixture):
        return forward(params, mixture)

    return model


def ema_update(teacher: SeparatorParams, student: SeparatorParams, gamma: float) -> None:
    """teacher <- gamma * teacher + (1 - gamma) * student, element-wise in place."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {gamma}")
    if teacher.names() != student.names():
        raise ValueError("teacher and student parameter names differ")
    if teacher.trainable:
        raise ValueError("teacher parameters must be non-trainable")
    for name in teacher.names():
        tv, sv = teacher[name].value, student[name].value
        if tv.shape != sv.shape:
            raise ValueError(f"shape mismatch for {name}: {tv.shape} vs {sv.shape}")
        tv *= gamma
        tv += (1.0 - gamma) * sv
