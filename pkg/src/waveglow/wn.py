"""Coupling-layer conditioner and mel upsampler.

WN maps the untouched half of the channels plus the folded mel features to
(log_s, t) for the other half. It is a stack of non-causal dilated
convolutions (kernel 3, dilation 2**i) with tanh*sigmoid gating, residual
and skip paths. The output projection starts at exactly zero, so a freshly
built coupling is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CoverageError, DegenerateDirectionError, ShapeError
from .tensor import Tensor

# time steps x residual channels per window when WN runs without gradient tracking
WN_CHUNK_ELEMS = 1 << 17
# output elements per GEMM in the untracked upsampler
UPSAMPLE_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class WNConfig:
    in_channels: int
    out_channels: int
    cond_channels: int
    n_layers: int = 8
    residual_channels: int = 512
    skip_channels: int = 256
    kernel_size: int = 3

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd for symmetric padding, got {self.kernel_size}")

    @property
    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.n_layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


def apply_weight_norm(weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a conv weight into (direction v, per-output-channel magnitude g).

    g starts at ||v|| so ``g * v / ||v||`` reproduces ``weight``.
    """
    norms = np.sqrt(np.sum(weight.reshape(weight.shape[0], -1) ** 2, axis=1))
    if np.any(norms < 1e-12):
        raise DegenerateDirectionError(f"cannot weight-normalise a direction with norm {norms.min():.3g}")
    return weight.copy(), norms.astype(weight.dtype)


class Conv:
    """Parameters of one 1-D convolution, optionally weight-normalised."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, dtype,
                 weight_norm: bool = True, zero: bool = False):
        self.kernel = kernel
        if zero:
            w = np.zeros((cout, cin, kernel), dtype=dtype)
            b = np.zeros(cout, dtype=dtype)
            weight_norm = False
        else:
            bound = 1.0 / np.sqrt(cin * kernel)
            w = rng.uniform(-bound, bound, (cout, cin, kernel)).astype(dtype)
            b = rng.uniform(-bound, bound, cout).astype(dtype)
        self.weight_norm = weight_norm
        if weight_norm:
            v, g = apply_weight_norm(w)
            self.v = Tensor(v, requires_grad=True)
            self.g = Tensor(g, requires_grad=True)
        else:
            self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def weight(self) -> Tensor:
        return T.weight_norm(self.v, self.g) if self.weight_norm else self.w

    def __call__(self, x: Tensor, dilation: int = 1, padding: int = 0, weight: Tensor | None = None) -> Tensor:
        w = self.weight() if weight is None else weight
        return T.conv1d(x, w, self.b, dilation=dilation, padding=padding)

    def parameters(self) -> dict[str, Tensor]:
        if self.weight_norm:
            return {"v": self.v, "g": self.g, "b": self.b}
        return {"w": self.w, "b": self.b}


class WN:
    def __init__(self, cfg: WNConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        r, s = cfg.residual_channels, cfg.skip_channels
        self.start = Conv(cfg.in_channels, r, 1, rng, dtype)
        # rows [2r*i, 2r*(i+1)) are layer i's conditioning projection
        self.cond = Conv(cfg.cond_channels, 2 * r * cfg.n_layers, 1, rng, dtype)
        self.dilated = [Conv(r, 2 * r, cfg.kernel_size, rng, dtype) for _ in range(cfg.n_layers)]
        self.res = [Conv(r, r, 1, rng, dtype) for _ in range(cfg.n_layers - 1)]
        self.skip = [Conv(r, s, 1, rng, dtype) for _ in range(cfg.n_layers)]
        self.end = Conv(s, 2 * cfg.out_channels, 1, rng, dtype, zero=True)

    def __call__(self, x_a: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        if x_a.shape[2] != cond.shape[2]:
            raise ShapeError(f"WN: conditioning has {cond.shape[2]} steps, input has {x_a.shape[2]}")
        n = x_a.shape[2]
        halo = (self.cfg.receptive_field - 1) // 2
        step = max(8 * halo, WN_CHUNK_ELEMS // self.cfg.residual_channels)
        if T.is_grad_enabled() or n <= step + 2 * halo:
            return self._stack(x_a, cond, self._weights())
        # Untracked long inputs run in overlapping windows so activations stay
        # cache-sized. Each window carries `halo` extra steps per side, enough
        # that zero padding at a window edge never reaches the kept centre.
        weights = self._weights()
        parts = []
        for t0 in range(0, n, step):
            t1 = min(n, t0 + step)
            lo, hi = max(0, t0 - halo), min(n, t1 + halo)
            log_s, t = self._stack(Tensor(x_a.data[:, :, lo:hi]), Tensor(cond.data[:, :, lo:hi]), weights)
            parts.append((log_s.data[:, :, t0 - lo:t1 - lo], t.data[:, :, t0 - lo:t1 - lo]))
        return (Tensor(np.concatenate([a for a, _ in parts], axis=2)),
                Tensor(np.concatenate([b for _, b in parts], axis=2)))

    def _weights(self) -> dict[int, Tensor]:
        """Effective kernels of every conv, keyed by id(conv)."""
        convs = [self.start, self.cond, self.end, *self.dilated, *self.res, *self.skip]
        return {id(c): c.weight() for c in convs}

    def _stack(self, x_a: Tensor, cond: Tensor, w: dict[int, Tensor]) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        r = cfg.residual_channels
        h = self.start(x_a, weight=w[id(self.start)])
        cond_all = self.cond(cond, weight=w[id(self.cond)])
        skip = None
        for i, d in enumerate(cfg.dilations):
            pad = d * (cfg.kernel_size - 1) // 2
            conv = self.dilated[i]
            acts = conv(h, dilation=d, padding=pad, weight=w[id(conv)]) + T.narrow(cond_all, 1, 2 * r * i, 2 * r)
            a, b = T.split_channels(acts, r)
            z = T.tanh(a) * T.sigmoid(b)
            if i < cfg.n_layers - 1:
                h = h + self.res[i](z, weight=w[id(self.res[i])])
            out = self.skip[i](z, weight=w[id(self.skip[i])])
            skip = out if skip is None else skip + out
        log_s, t = T.split_channels(self.end(skip, weight=w[id(self.end)]), cfg.out_channels)
        return log_s, t

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        groups = [("start", self.start), ("cond", self.cond), ("end", self.end)]
        groups += [(f"dilated.{i}", c) for i, c in enumerate(self.dilated)]
        groups += [(f"res.{i}", c) for i, c in enumerate(self.res)]
        groups += [(f"skip.{i}", c) for i, c in enumerate(self.skip)]
        for prefix, conv in groups:
            for k, v in conv.parameters().items():
                params[f"{prefix}.{k}"] = v
        return params


def fold_groups(x: Tensor, group: int) -> Tensor:
    """[B, C, T] -> [B, C*group, T/group]; channel c*group + k holds sample t*group + k."""
    b, c, t = x.shape
    if t % group:
        raise ShapeError(f"cannot fold length {t} into groups of {group}")
    y = T.reshape(x, (b, c, t // group, group))
    y = T.transpose(y, (0, 1, 3, 2))
    return T.reshape(y, (b, c * group, t // group))


class Upsampler:
    """Learned transposed convolution from mel frames to the audio rate.

    Output sample n is read from position n + kernel // 2 of the transposed
    convolution, which puts each kernel's centre on its frame's centre.
    """

    def __init__(self, n_mels: int, rng: np.random.Generator, dtype=np.float32,
                 kernel: int = 1024, stride: int = 256):
        self.kernel, self.stride, self.n_mels = kernel, stride, n_mels
        bound = 1.0 / np.sqrt(n_mels * kernel)
        self.w = Tensor(rng.uniform(-bound, bound, (n_mels, n_mels, kernel)).astype(dtype), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, n_mels).astype(dtype), requires_grad=True)

    def frames_needed(self, n_samples: int) -> int:
        return max(1, -(-(n_samples - self.kernel + self.kernel // 2) // self.stride) + 1)

    def covered(self, n_frames: int) -> int:
        return (n_frames - 1) * self.stride + self.kernel - self.kernel // 2

    def __call__(self, mel: Tensor, n_samples: int, group: int) -> Tensor:
        if n_samples % group:
            raise ShapeError(f"target_samples={n_samples} not divisible by group={group}")
        if mel.ndim != 3 or mel.shape[1] != self.n_mels:
            raise ShapeError(f"mel must be [B, {self.n_mels}, frames], got {mel.shape}")
        frames = mel.shape[2]
        if self.covered(frames) < n_samples:
            raise CoverageError(f"mel covers {self.covered(frames)} samples but {n_samples} requested: "
                                f"need {self.frames_needed(n_samples)} frames, have {frames}")
        if not T.is_grad_enabled():
            return fold_groups(Tensor(self._untracked(mel.data, n_samples)), group)
        up = T.conv_transpose1d(mel, self.w, self.b, stride=self.stride)
        up = T.narrow(up, 2, self.kernel // 2, n_samples)
        return fold_groups(up, group)

    def _untracked(self, x: np.ndarray, n_samples: int) -> np.ndarray:
        """Inference path: only the kept samples, computed a chunk of output blocks at a time.

        Output block f (``stride`` samples) is sum_j W[:, :, j*stride:(j+1)*stride]^T x[f - j],
        evaluated as one GEMM of the stacked neighbour frames against the
        concatenated kernel slices.
        """
        cin, cout, k = self.w.shape
        s = self.stride
        nblk = -(-k // s)
        wp = np.zeros((cin, cout, nblk * s), dtype=self.w.dtype)
        wp[:, :, :k] = self.w.data
        # rows (j, ci), columns (co, r): W[ci, co, j*s + r]
        wcat = wp.reshape(cin, cout, nblk, s).transpose(2, 0, 1, 3).reshape(nblk * cin, cout * s)
        b, _, f = x.shape
        edge = np.zeros((b, cin, nblk - 1), dtype=x.dtype)
        xp = np.concatenate([edge, x.astype(self.w.dtype), edge], axis=2)
        off = k // 2
        out = np.empty((b, cout, n_samples), dtype=self.w.dtype)
        first, last = off // s, (off + n_samples - 1) // s + 1
        chunk = max(1, UPSAMPLE_CHUNK_ELEMS // (cout * s))
        for bi in range(b):
            for c0 in range(first, last, chunk):
                c1 = min(last, c0 + chunk)
                stack = np.concatenate([xp[bi, :, c0 - j + nblk - 1:c1 - j + nblk - 1] for j in range(nblk)])
                y = (stack.T @ wcat).reshape(c1 - c0, cout, s).transpose(1, 0, 2).reshape(cout, -1)
                p0, p1 = max(c0 * s, off), min(c1 * s, off + n_samples)
                out[bi, :, p0 - off:p1 - off] = y[:, p0 - c0 * s:p1 - c0 * s]
        out += self.b.data[None, :, None]
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def upsample_mel(mel: Tensor, target_samples: int, group: int, upsampler: Upsampler) -> Tensor:
    return upsampler(mel, target_samples, group)
