"""The invertible network and its exact likelihood.

Audio is squeezed into vectors of ``group`` consecutive samples, then passed
through steps of flow, each an invertible 1x1 convolution followed by an
affine coupling. Every ``early_every`` steps the first ``early_size`` channels
leave the network and are emitted as part of z.

Direction convention: ``forward`` maps audio x to latent z (training),
``inverse`` maps z to audio (synthesis).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor
from .wn import WN, Upsampler, WNConfig


@dataclass(frozen=True)
class ModelConfig:
    n_flows: int = 12
    group: int = 8
    early_every: int = 4
    early_size: int = 2
    wn_layers: int = 8
    residual_channels: int = 512
    skip_channels: int = 256
    kernel_size: int = 3
    n_mels: int = 80
    upsample_kernel: int = 1024
    upsample_stride: int = 256
    sigma: float = math.sqrt(0.5)

    def widths(self) -> list[int]:
        """Channel count entering each flow step."""
        c, out = self.group, []
        for k in range(self.n_flows):
            if k in self.early_flows():
                c -= self.early_size
            out.append(c)
        if out and min(out) < 2:
            raise ValueError(f"early outputs leave fewer than 2 channels: {out}")
        return out

    def early_flows(self) -> list[int]:
        if not self.early_every:
            return []
        return [k for k in range(1, self.n_flows) if k % self.early_every == 0]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


PRESETS = {
    "paper": ModelConfig(),
    "tiny": ModelConfig(n_flows=4, early_every=0, wn_layers=4, residual_channels=64, skip_channels=64),
    "micro": ModelConfig(n_flows=2, group=4, early_every=0, wn_layers=2, residual_channels=16, skip_channels=16),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# squeeze


def squeeze(audio: Tensor, group: int) -> Tensor:
    """[B, T] -> [B, group, T/group] with element (b, c, t) = audio(b, t*group + c)."""
    b, t = audio.shape
    if t % group:
        raise ShapeError(f"audio length {t} is not divisible by group {group}")
    return T.transpose(T.reshape(audio, (b, t // group, group)), (0, 2, 1))


def unsqueeze(x: Tensor) -> Tensor:
    b, g, tg = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, g * tg))


# ---------------------------------------------------------------------------
# invertible 1x1 convolution


def orthonormal(c: int, rng: np.random.Generator) -> np.ndarray:
    """QR of a standard-normal matrix, columns sign-fixed by diag(R) > 0."""
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    return q * np.sign(np.diag(r))[None, :]


class InvConv:
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.W = Tensor(orthonormal(channels, rng).astype(dtype), requires_grad=True)
        self._key: bytes | None = None
        self._inverse: np.ndarray | None = None
        self._logdet: float | None = None

    def _factor(self):
        key = self.W.data.tobytes()
        if key != self._key:
            lu_piv, logdet = T.lu_logabsdet(self.W.data)
            c = self.W.shape[0]
            self._inverse = scipy.linalg.lu_solve(lu_piv, np.eye(c)).astype(self.W.dtype)
            self._logdet = logdet
            self._key = key
        return self._inverse, self._logdet

    @property
    def logdet(self) -> float:
        """log|det W| (cached until W changes)."""
        return self._factor()[1]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, c, tg = x.shape
        if c != self.W.shape[0]:
            raise ShapeError(f"invconv: {c} channels, W is {self.W.shape}")
        y = T.conv1d(x, T.reshape(self.W, (c, c, 1)))
        return y, T.logabsdet(self.W) * float(b * tg)

    def inverse(self, y: Tensor) -> Tensor:
        inv, _ = self._factor()
        return T.conv1d(y, Tensor(inv[:, :, None], dtype=self.W.dtype))

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W}


def invconv_forward(x: Tensor, conv: InvConv) -> tuple[Tensor, Tensor]:
    return conv.forward(x)


def invconv_inverse(y: Tensor, conv: InvConv) -> Tensor:
    return conv.inverse(y)


# ---------------------------------------------------------------------------
# affine coupling


class Coupling:
    """x_a (first floor(C/2) channels) passes through; x_b is scaled and shifted.

    ``wn`` may be replaced by any callable (x_a, cond) -> (log_s, t).
    """

    def __init__(self, channels: int, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        if channels < 2:
            raise ShapeError(f"coupling needs at least 2 channels, got {channels}")
        self.channels = channels
        self.n_half = channels // 2
        self.wn = WN(WNConfig(in_channels=self.n_half, out_channels=channels - self.n_half,
                              cond_channels=cfg.n_mels * cfg.group, n_layers=cfg.wn_layers,
                              residual_channels=cfg.residual_channels, skip_channels=cfg.skip_channels,
                              kernel_size=cfg.kernel_size), rng, dtype)

    def _scale_shift(self, x_a: Tensor, cond: Tensor, index: int):
        log_s, t = self.wn(x_a, cond)
        if not np.all(np.isfinite(log_s.data)):
            raise NumericError(f"non-finite log_s in flow {index}")
        return log_s, t

    def forward(self, x: Tensor, cond: Tensor, index: int = 0) -> tuple[Tensor, Tensor]:
        x_a, x_b = T.split_channels(x, self.n_half)
        log_s, t = self._scale_shift(x_a, cond, index)
        x_b = T.exp(log_s) * x_b + t
        return T.concat_channels([x_a, x_b]), log_s.sum()

    def inverse(self, y: Tensor, cond: Tensor, index: int = 0) -> Tensor:
        y_a, y_b = T.split_channels(y, self.n_half)
        log_s, t = self._scale_shift(y_a, cond, index)
        x_b = (y_b - t) * T.exp(-log_s)
        return T.concat_channels([y_a, x_b])

    def parameters(self) -> dict[str, Tensor]:
        return {f"wn.{k}": v for k, v in self.wn.parameters().items()}


def coupling_forward(x: Tensor, cond: Tensor, step: Coupling, index: int = 0):
    return step.forward(x, cond, index)


def coupling_inverse(y: Tensor, cond: Tensor, step: Coupling, index: int = 0):
    return step.inverse(y, cond, index)


# ---------------------------------------------------------------------------
# model


@dataclass
class FlowOutput:
    z: Tensor
    sum_log_s: Tensor
    sum_logdet_W: Tensor
    widths: list[int] = field(default_factory=list)

    def check_finite(self):
        for name in ("z", "sum_log_s", "sum_logdet_W"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise NumericError(f"non-finite {name} in flow output")


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


class WaveGlow:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.upsampler = Upsampler(config.n_mels, rng, dtype, config.upsample_kernel, config.upsample_stride)
        self.convs: list[InvConv] = []
        self.couplings: list[Coupling] = []
        for c in config.widths():
            self.convs.append(InvConv(c, rng, dtype))
            self.couplings.append(Coupling(c, config, rng, dtype))

    # -- parameters --------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = {f"upsample.{k}": v for k, v in self.upsampler.parameters().items()}
        for i, (conv, coup) in enumerate(zip(self.convs, self.couplings)):
            params[f"flows.{i}.W"] = conv.W
            for k, v in coup.parameters().items():
                params[f"flows.{i}.{k}"] = v
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: shape {arr.shape} does not match model {p.shape}")
            p.data[...] = arr.astype(p.dtype)

    def astype(self, dtype) -> WaveGlow:
        """Cast every parameter in place."""
        self.dtype = np.dtype(dtype)
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # -- evaluation --------------------------------------------------------

    def _as_batch(self, x, ndim: int) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if x.dtype != self.dtype:
            x = Tensor(x.data, dtype=self.dtype)
        if x.ndim == ndim - 1:
            x = T.reshape(x, (1,) + x.shape)
        return x

    def condition(self, mel, n_samples: int, batch: int) -> Tensor:
        """Upsampled, group-folded conditioning of shape [B, n_mels*group, n_samples/group]."""
        mel = self._as_batch(mel, 3)
        if mel.shape[0] != batch:
            if mel.shape[0] != 1:
                raise ShapeError(f"mel batch {mel.shape[0]} does not match audio batch {batch}")
            mel = Tensor(np.repeat(mel.data, batch, axis=0), dtype=self.dtype)
        return self.upsampler(mel, n_samples, self.config.group)

    def forward(self, audio, mel) -> FlowOutput:
        """Map audio [B, T] to z [B, group, T/group] plus log-determinant sums."""
        cfg = self.config
        x = self._as_batch(audio, 2)
        b, t = x.shape
        rem = t % cfg.group
        if rem:
            warnings.warn(f"trimming {rem} trailing samples so length is a multiple of {cfg.group}")
            x = T.narrow(x, 1, 0, t - rem)
            t -= rem
        cond = self.condition(mel, t, b)
        h = squeeze(x, cfg.group)
        early = set(cfg.early_flows())
        outputs = []
        sum_log_s = _zero(self.dtype)
        sum_logdet = _zero(self.dtype)
        for k, (conv, coup) in enumerate(zip(self.convs, self.couplings)):
            if k in early:
                e, h = T.split_channels(h, cfg.early_size)
                outputs.append(e)
            h, ld = conv.forward(h)
            h, ls = coup.forward(h, cond, k)
            sum_logdet = sum_logdet + ld
            sum_log_s = sum_log_s + ls
        outputs.append(h)
        z = T.concat_channels(outputs) if len(outputs) > 1 else h
        return FlowOutput(z, sum_log_s, sum_logdet, cfg.widths())

    def inverse(self, z, mel) -> Tensor:
        """Map z [B, group, Tg] back to audio [B, group*Tg]."""
        cfg = self.config
        z = self._as_batch(z, 3)
        b, g, tg = z.shape
        if g != cfg.group:
            raise ShapeError(f"z has {g} channels, model expects {cfg.group}")
        cond = self.condition(mel, g * tg, b)
        early = cfg.early_flows()
        widths = cfg.widths()
        n_early = len(early) * cfg.early_size
        parts = [T.narrow(z, 1, i * cfg.early_size, cfg.early_size) for i in range(len(early))]
        h = T.narrow(z, 1, n_early, g - n_early) if n_early else z
        if h.shape[1] != widths[-1]:
            raise ShapeError(f"final latent width {h.shape[1]} != last flow width {widths[-1]}")
        for k in reversed(range(cfg.n_flows)):
            h = self.couplings[k].inverse(h, cond, k)
            h = self.convs[k].inverse(h)
            if k in early:
                h = T.concat_channels([parts[early.index(k)], h])
        return unsqueeze(h)


def model_forward(model: WaveGlow, audio, mel) -> FlowOutput:
    return model.forward(audio, mel)


def model_inverse(model: WaveGlow, z, mel) -> Tensor:
    return model.inverse(z, mel)


# ---------------------------------------------------------------------------
# likelihood


class NLL(NamedTuple):
    loss: Tensor  # per sample, Gaussian normaliser dropped; differentiable
    full: float  # per sample, including 0.5*log(2*pi*sigma^2)


def negative_log_likelihood(out: FlowOutput, sigma: float) -> NLL:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = out.z
    n = z.size
    quad = (z * z).sum() * (1.0 / (2.0 * sigma * sigma))
    loss = (quad - out.sum_log_s - out.sum_logdet_W) * (1.0 / n)
    return NLL(loss, loss.item() + 0.5 * math.log(2 * math.pi * sigma * sigma))


def log_likelihood(out: FlowOutput, sigma: float) -> float:
    """Total log p(x) including the Gaussian normaliser."""
    z = out.z.data.astype(np.float64)
    return float(-np.sum(z * z) / (2 * sigma * sigma) - 0.5 * z.size * math.log(2 * math.pi * sigma * sigma)
                 + out.sum_log_s.item() + out.sum_logdet_W.item())


# ---------------------------------------------------------------------------
# helpers


def randomize(model: WaveGlow, seed: int = 0, scale: float = 0.1, w_jitter: float = 0.1) -> WaveGlow:
    """Give the zero-initialised coupling outputs random values and jitter every W.

    Produces a non-trivial random-weight model for invertibility and
    log-determinant checks.
    """
    rng = np.random.default_rng(seed)
    for conv, coup in zip(model.convs, model.couplings):
        c = conv.W.shape[0]
        conv.W.data += (w_jitter / math.sqrt(c) * rng.standard_normal((c, c))).astype(model.dtype)
        end = coup.wn.end
        fan_in = end.w.shape[1]
        end.w.data[...] = scale / math.sqrt(fan_in) * rng.standard_normal(end.w.shape)
        end.b.data[...] = scale * rng.standard_normal(end.b.shape)
    return model
