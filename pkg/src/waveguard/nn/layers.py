"""Network layers over the autodiff engine.

Each layer owns its parameters, a ``LayerSpec`` describing it (used by the
architecture-conformance tests), and a ``__call__(x, training)`` forward.
Initialization: He-uniform for conv/dense, ones/zeros for batch-norm
scale/shift, orthogonal for the non-local projections.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, default_dtype

LEAKY_SLOPE = 0.2

_KIND_FIELDS = {
    "dense": {"in_features", "out_features"},
    "conv2d": {"in_channels", "out_channels", "kernel", "stride", "padding"},
    "conv_transpose2d": {
        "in_channels",
        "out_channels",
        "kernel",
        "stride",
        "padding",
        "output_padding",
    },
    "batch_norm": {"channels"},
    "relu": set(),
    "leaky_relu": {"slope"},
    "tanh": set(),
    "avg_pool": {"kernel", "stride"},
    "max_pool": {"kernel", "stride"},
    "residual_block": {"in_channels", "out_channels"},
    "non_local": {"channels", "inter_channels"},
    "skip_z_concat": {"channels"},
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KIND_FIELDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        missing = _KIND_FIELDS[self.kind] - set(self.hyper)
        extra = set(self.hyper) - _KIND_FIELDS[self.kind]
        if missing or extra:
            raise ValueError(
                f"layer {self.kind!r}: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for key, val in self.hyper.items():
            if key == "slope":
                if val != LEAKY_SLOPE:
                    raise ValueError("leaky_relu slope is fixed at 0.2")
            elif key in ("stride", "kernel", "padding", "output_padding"):
                vals = val if isinstance(val, tuple) else (val,)
                if any(int(v) != v or v < 0 for v in vals) or (
                    key in ("stride", "kernel") and any(v < 1 for v in vals)
                ):
                    raise ValueError(f"layer {self.kind!r}: bad {key}={val}")
            elif int(val) != val or val < 1:
                raise ValueError(f"layer {self.kind!r}: bad {key}={val}")


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(default_dtype())


class Module:
    def parameters(self) -> list[Tensor]:
        out = []
        for v in self.__dict__.values():
            if isinstance(v, Tensor):
                out.append(v)
            elif isinstance(v, Module):
                out.extend(v.parameters())
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, v in self.__dict__.items():
            key = f"{prefix}{name}"
            if isinstance(v, Tensor):
                out.append((key, v))
            elif isinstance(v, Module):
                out.extend(v.named_parameters(f"{key}."))
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
        return out

    def buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for name, v in self.__dict__.items():
            key = f"{prefix}{name}"
            if isinstance(v, np.ndarray):
                out.append((key, v))
            elif isinstance(v, Module):
                out.extend(v.buffers(f"{key}."))
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        out.extend(item.buffers(f"{key}.{i}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({f"buf::{name}": b for name, b in self.buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        bufs = dict(self.buffers())
        for key, arr in state.items():
            if key.startswith("buf::"):
                target = bufs[key[5:]]
                target[...] = arr
            else:
                p = params[key]
                if p.data.shape != arr.shape:
                    raise ShapeError(f"checkpoint shape mismatch for {key}")
                p.data = arr.astype(p.data.dtype)

    def layer_specs(self) -> list[LayerSpec]:
        specs = []
        for v in self.__dict__.values():
            if isinstance(v, Module):
                specs.extend(v.layer_specs())
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Module):
                        specs.extend(item.layer_specs())
        if hasattr(self, "spec"):
            specs.insert(0, self.spec)
        return specs


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.spec = LayerSpec("dense", {"in_features": in_features, "out_features": out_features})
        self.weight = Tensor(he_uniform(rng, (in_features, out_features), in_features), True)
        self.bias = Tensor(np.zeros(out_features, dtype=default_dtype()), True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"dense: input {x.shape} vs weight {self.weight.shape}")
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0):
        self.spec = LayerSpec(
            "conv2d",
            {
                "in_channels": cin,
                "out_channels": cout,
                "kernel": kernel,
                "stride": stride,
                "padding": padding,
            },
        )
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.stride, self.padding = stride, padding
        self.weight = Tensor(he_uniform(rng, (cout, cin, kh, kw), cin * kh * kw), True)
        self.bias = Tensor(np.zeros(cout, dtype=default_dtype()), True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x.conv2d(self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, output_padding=0):
        self.spec = LayerSpec(
            "conv_transpose2d",
            {
                "in_channels": cin,
                "out_channels": cout,
                "kernel": kernel,
                "stride": stride,
                "padding": padding,
                "output_padding": output_padding,
            },
        )
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = Tensor(he_uniform(rng, (cin, cout, kh, kw), cin * kh * kw), True)
        self.bias = Tensor(np.zeros(cout, dtype=default_dtype()), True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x.conv_transpose2d(
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            output_padding=self.output_padding,
        )


class BatchNorm2d(Module):
    """Batch statistics in training mode, running averages at inference.

    running <- momentum * running + (1 - momentum) * batch, momentum = 0.9.
    """

    MOMENTUM = 0.9
    EPS = 1e-5

    def __init__(self, channels: int):
        self.spec = LayerSpec("batch_norm", {"channels": channels})
        self.gamma = Tensor(np.ones(channels, dtype=default_dtype()), True)
        self.beta = Tensor(np.zeros(channels, dtype=default_dtype()), True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batch_norm: input {x.shape} vs channels {self.gamma.shape[0]}")
        c = x.shape[1]
        if training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = (x - mu).square().mean(axis=(0, 2, 3), keepdims=True)
            self.running_mean[...] = (
                self.MOMENTUM * self.running_mean + (1 - self.MOMENTUM) * mu.data.reshape(c)
            )
            self.running_var[...] = (
                self.MOMENTUM * self.running_var + (1 - self.MOMENTUM) * var.data.reshape(c)
            )
            xhat = (x - mu) / (var + self.EPS).sqrt()
        else:
            mu = self.running_mean.reshape(1, c, 1, 1).astype(x.data.dtype)
            sd = np.sqrt(self.running_var + self.EPS).reshape(1, c, 1, 1).astype(x.data.dtype)
            xhat = (x - Tensor(mu)) / Tensor(sd)
        return xhat * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)


class ReLU(Module):
    def __init__(self):
        self.spec = LayerSpec("relu")

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x.relu()


class LeakyReLU(Module):
    def __init__(self):
        self.spec = LayerSpec("leaky_relu", {"slope": LEAKY_SLOPE})

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x.leaky_relu(LEAKY_SLOPE)


class Tanh(Module):
    def __init__(self):
        self.spec = LayerSpec("tanh")

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x.tanh()


class AvgPool2d(Module):
    def __init__(self, kernel, stride=None, padding=0):
        stride = kernel if stride is None else stride
        self.spec = LayerSpec("avg_pool", {"kernel": kernel, "stride": stride})
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x.avg_pool2d(self.kernel, self.stride, self.padding)


class MaxPool2d(Module):
    def __init__(self, kernel, stride=None, padding=0):
        stride = kernel if stride is None else stride
        self.spec = LayerSpec("max_pool", {"kernel": kernel, "stride": stride})
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x.max_pool2d(self.kernel, self.stride, self.padding)


class ResidualBlock(Module):
    """Pre-activation residual block with a 1x1 projection shortcut when the
    channel count changes."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.spec = LayerSpec("residual_block", {"in_channels": cin, "out_channels": cout})
        self.bn1 = BatchNorm2d(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1)
        self.proj = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        h = self.conv1(self.bn1(x, training).relu())
        h = self.conv2(self.bn2(h, training).relu())
        sc = x if self.proj is None else self.proj(x)
        return h + sc

    def layer_specs(self) -> list[LayerSpec]:
        return [self.spec]


class NonLocal2d(Module):
    """Embedded-Gaussian self-attention with a residual connection."""

    def __init__(self, channels: int, inter_channels: int, rng: np.random.Generator):
        self.spec = LayerSpec(
            "non_local", {"channels": channels, "inter_channels": inter_channels}
        )
        self.channels, self.inter = channels, inter_channels
        self.theta = Tensor(orthogonal(rng, inter_channels, channels), True)
        self.phi = Tensor(orthogonal(rng, inter_channels, channels), True)
        self.g = Tensor(orthogonal(rng, inter_channels, channels), True)
        self.w_z = Tensor(orthogonal(rng, channels, inter_channels), True)

    def attention(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w)  # [B, C, N]
        th = self.theta.reshape(1, self.inter, c) @ flat  # [B, Ci, N]
        ph = self.phi.reshape(1, self.inter, c) @ flat
        scores = th.transpose(0, 2, 1) @ ph  # [B, N, N]
        return scores.softmax(axis=-1)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"non_local: input {x.shape} vs channels {self.channels}")
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w)
        attn = self.attention(x)  # rows sum to 1
        gx = self.g.reshape(1, self.inter, c) @ flat  # [B, Ci, N]
        y = attn @ gx.transpose(0, 2, 1)  # [B, N, Ci]
        z = self.w_z.reshape(1, c, self.inter) @ y.transpose(0, 2, 1)  # [B, C, N]
        return x + z.reshape(b, c, h, w)

    def layer_specs(self) -> list[LayerSpec]:
        return [self.spec]


class SkipZConcat(Module):
    """Concatenate a latent chunk, tiled spatially, onto the channel axis."""

    def __init__(self, channels: int):
        self.spec = LayerSpec("skip_z_concat", {"channels": channels})
        self.channels = channels

    def __call__(self, x: Tensor, z: Tensor, training: bool = False) -> Tensor:
        if z.shape[-1] != self.channels:
            raise ShapeError(f"skip_z_concat: z {z.shape} vs channels {self.channels}")
        b, _, h, w = x.shape
        tiled = z.reshape(b, self.channels, 1, 1).broadcast_to((b, self.channels, h, w))
        return Tensor.concat([x, tiled], axis=1)


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Module:
    """Instantiate a layer from its spec (used by the per-kind gradient checks)."""
    h = spec.hyper
    if spec.kind == "dense":
        return Dense(h["in_features"], h["out_features"], rng)
    if spec.kind == "conv2d":
        return Conv2d(h["in_channels"], h["out_channels"], h["kernel"], rng, h["stride"], h["padding"])
    if spec.kind == "conv_transpose2d":
        return ConvTranspose2d(
            h["in_channels"], h["out_channels"], h["kernel"], rng,
            h["stride"], h["padding"], h["output_padding"],
        )
    if spec.kind == "batch_norm":
        return BatchNorm2d(h["channels"])
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "leaky_relu":
        return LeakyReLU()
    if spec.kind == "tanh":
        return Tanh()
    if spec.kind == "avg_pool":
        return AvgPool2d(h["kernel"], h["stride"])
    if spec.kind == "max_pool":
        return MaxPool2d(h["kernel"], h["stride"])
    if spec.kind == "residual_block":
        return ResidualBlock(h["in_channels"], h["out_channels"], rng)
    if spec.kind == "non_local":
        return NonLocal2d(h["channels"], h["inter_channels"], rng)
    if spec.kind == "skip_z_concat":
        return SkipZConcat(h["channels"])
    raise ValueError(spec.kind)
