"""Maximum-likelihood training: clip sampling, Adam, plateau LR drop, checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .flow import ModelConfig, WaveGlow, negative_log_likelihood, preset
from .signal import SAMPLE_RATE, AudioClip, load_wav, mel_spectrogram
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    preset: str = "tiny"
    clip_len: int = 8000
    batch: int = 2
    lr: float = 1e-4
    lr_drop: float = 5e-5
    sigma: float = math.sqrt(0.5)
    max_iters: int = 1000
    seed: int = 0
    plateau_window: int = 200
    checkpoint_every: int = 100

    def validate(self, group: int | None = None) -> TrainConfig:
        if group is None:
            group = preset(self.preset).group
        if self.clip_len <= 0 or self.clip_len % group:
            raise ConfigError(f"clip_len={self.clip_len} must be a positive multiple of group={group}")
        if not self.lr > self.lr_drop > 0:
            raise ConfigError(f"need lr > lr_drop > 0, got lr={self.lr}, lr_drop={self.lr_drop}")
        if self.batch < 1 or self.max_iters < 0 or self.plateau_window < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch, plateau_window and checkpoint_every must be positive; max_iters >= 0")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    @classmethod
    def parse(cls, text: str, base: TrainConfig | None = None) -> TrainConfig:
        """Parse flat ``key=value`` lines; '#' starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = (base or cls()).to_dict()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = _coerce(key, val, types)
        return cls(**values)

    @classmethod
    def from_file(cls, path, base: TrainConfig | None = None) -> TrainConfig:
        return cls.parse(Path(path).read_text(encoding="utf-8"), base)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def _coerce(key: str, val: str, types: dict):
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    try:
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {val!r} as {kind}") from None


PAPER_TRAIN = TrainConfig(preset="paper", clip_len=16000, batch=24, max_iters=580_000,
                          plateau_window=10_000, checkpoint_every=1000)


# ---------------------------------------------------------------------------
# data


def load_dataset(directory) -> list[AudioClip]:
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise ConfigError(f"no .wav files in {directory}")
    return [load_wav(p) for p in paths]


def synthetic_clip(seconds: float = 1.0, seed: int = 0, noise: float = 0.01) -> AudioClip:
    """Sum of three sinusoids plus white noise at ``noise`` standard deviation."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(seconds * SAMPLE_RATE))) / SAMPLE_RATE
    x = 0.3 * np.sin(2 * np.pi * 220.0 * t) + 0.2 * np.sin(2 * np.pi * 587.3 * t + 0.5) \
        + 0.1 * np.sin(2 * np.pi * 1318.5 * t + 1.0)
    return AudioClip(x + noise * rng.standard_normal(t.size))


@dataclass
class Batch:
    audio: np.ndarray  # [B, clip_len]
    mel: np.ndarray  # [B, n_mels, frames]
    padded: list[bool]


def sample_clips(dataset: list[AudioClip], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Uniform random file, uniform random offset; mels over the exact window."""
    if not dataset:
        raise ConfigError("dataset is empty")
    audio = np.zeros((cfg.batch, cfg.clip_len))
    padded = []
    for b in range(cfg.batch):
        clip = dataset[int(rng.integers(len(dataset)))].samples
        if clip.size < cfg.clip_len:
            audio[b, :clip.size] = clip
            padded.append(True)
        else:
            off = int(rng.integers(0, clip.size - cfg.clip_len + 1))
            audio[b] = clip[off:off + cfg.clip_len]
            padded.append(False)
    mel = np.stack([mel_spectrogram(a) for a in audio])
    return Batch(audio, mel, padded)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> bool:
        """Apply one bias-corrected update; returns False (no update) on a non-finite gradient."""
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                log.warning("non-finite gradient in %s; skipping step", k)
                return False
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].astype(self.params[k].dtype)
            self.v[k] = arrays[f"adam.v.{k}"].astype(self.params[k].dtype)
        self.t = t


def adam_step(params: dict[str, Tensor], state: Adam, lr: float) -> bool:
    return state.step(lr)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainState:
    cfg: TrainConfig
    model: WaveGlow
    opt: Adam
    rng: np.random.Generator
    iteration: int = 0
    lr: float = 0.0
    lr_dropped: bool = False
    history: list[float] = field(default_factory=list)

    @classmethod
    def new(cls, cfg: TrainConfig, model_config: ModelConfig | None = None) -> TrainState:
        mc = model_config or preset(cfg.preset)
        cfg.validate(mc.group)
        model = WaveGlow(mc, seed=cfg.seed)
        # model init and batch sampling use independent streams of the same seed
        rng = np.random.default_rng([cfg.seed, 1])
        return cls(cfg, model, Adam(model.parameters(), cfg.lr), rng, lr=cfg.lr)

    def save(self, path) -> None:
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        arrays.update(self.opt.state_arrays())
        meta = {
            "model_config": self.model.config.to_dict(),
            "train_config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "adam_step": self.opt.t,
            "lr": self.lr,
            "lr_dropped": self.lr_dropped,
            "history": self.history,
            "rng_state": self.rng.bit_generator.state,
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> TrainState:
        arrays, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["train_config"])
        model = model_from_arrays(arrays, meta)
        opt = Adam(model.parameters(), cfg.lr)
        opt.load_state_arrays(arrays, meta["adam_step"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        return cls(cfg, model, opt, rng, meta["iteration"], meta["lr"], meta["lr_dropped"], list(meta["history"]))


def model_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> WaveGlow:
    mc = ModelConfig.from_dict(meta["model_config"])
    state = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    dtype = next(iter(state.values())).dtype
    model = WaveGlow(mc, dtype=dtype)
    model.load_state_dict(state)
    return model


def load_model(path) -> WaveGlow:
    """Model parameters from a training checkpoint."""
    arrays, meta = load_checkpoint(path)
    return model_from_arrays(arrays, meta)


def plateaued(history: list[float], window: int, threshold: float = 1e-3) -> bool:
    """True when the mean of the last window improved less than ``threshold`` (relative) on the one before."""
    if len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window:-window]))
    cur = float(np.mean(history[-window:]))
    return (prev - cur) < threshold * abs(prev)


def train_step(state: TrainState, dataset: list[AudioClip]) -> float:
    cfg, model = state.cfg, state.model
    batch = sample_clips(dataset, cfg, state.rng)
    model.zero_grad()
    out = model.forward(batch.audio, batch.mel)
    nll = negative_log_likelihood(out, cfg.sigma)
    if not math.isfinite(nll.full):
        raise NumericError(f"non-finite loss at iteration {state.iteration}")
    nll.loss.backward()
    state.opt.step(state.lr)
    state.history.append(nll.full)
    state.iteration += 1
    if not state.lr_dropped and plateaued(state.history, cfg.plateau_window):
        log.info("loss plateaued at iteration %d; lr %g -> %g", state.iteration, state.lr, cfg.lr_drop)
        state.lr = cfg.lr_drop
        state.lr_dropped = True
    return nll.full


def checkpoint_path(out_dir, iteration: int) -> Path:
    return Path(out_dir) / f"ckpt_{iteration:08d}.wgc"


def train_loop(cfg: TrainConfig, dataset: list[AudioClip], out_dir=None,
               state: TrainState | None = None, on_step=None) -> TrainState:
    """Run until ``cfg.max_iters`` iterations have completed.

    Writes ``metrics.tsv`` (iter, nll, lr, seconds) and checkpoints into
    ``out_dir`` when given; a non-finite loss saves ``emergency.wgc`` and
    re-raises.
    """
    state = state or TrainState.new(cfg)
    state.cfg.max_iters = cfg.max_iters
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(out_dir / "metrics.tsv", "a", encoding="utf-8")
        if state.iteration == 0:
            state.save(checkpoint_path(out_dir, 0))
    try:
        while state.iteration < state.cfg.max_iters:
            t0 = time.perf_counter()
            lr = state.lr
            try:
                nll = train_step(state, dataset)
            except NumericError:
                if out_dir is not None:
                    state.save(out_dir / "emergency.wgc")
                raise
            secs = time.perf_counter() - t0
            if metrics is not None:
                metrics.write(f"{state.iteration - 1}\t{nll:.8g}\t{lr:g}\t{secs:.4f}\n")
                metrics.flush()
                if state.iteration % state.cfg.checkpoint_every == 0 or state.iteration == state.cfg.max_iters:
                    state.save(checkpoint_path(out_dir, state.iteration))
            if on_step is not None:
                on_step(state, nll)
    finally:
        if metrics is not None:
            metrics.close()
    return state
