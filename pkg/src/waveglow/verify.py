"""Numerical self-checks run by ``waveglow verify``.

Each check returns a CheckResult carrying its worst observed error and
tolerance; exceptions raised by the model (a singular W, say) become
failures rather than propagating.
"""
from __future__ import annotations

import math
import traceback
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import WaveGlowError
from .flow import WaveGlow, log_likelihood, negative_log_likelihood, preset, randomize

# (round-trip length, Jacobian length or None when too large to assemble)
GEOMETRY = {"micro": (256, 16), "tiny": (2048, 64), "paper": (16000, None)}
ROUND_TRIP_TOL = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-8}
LOGDET_TOL = 1e-4
LIKELIHOOD_TOL = 1e-4
GRAD_TOL = 1e-3
INIT_TOL = 1e-5
ISOMETRY_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    status: str  # pass | fail | skip
    worst: float | None = None
    tol: float | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "fail"

    def line(self) -> str:
        nums = ""
        if self.worst is not None:
            nums = f" worst={self.worst:.3e}"
        if self.tol is not None:
            nums += f" tol={self.tol:.0e}"
        return f"[{self.status.upper()}] {self.name}:{nums} {self.detail}".rstrip()


def _judge(name, worst, tol, detail="") -> CheckResult:
    ok = worst is not None and math.isfinite(worst) and worst < tol
    return CheckResult(name, "pass" if ok else "fail", worst, tol, detail)


def _guarded(name, fn) -> CheckResult:
    try:
        return fn()
    except (WaveGlowError, ArithmeticError, ValueError) as e:
        return CheckResult(name, "fail", detail=f"{type(e).__name__}: {e}")
    except Exception as e:  # noqa: BLE001 - report, never crash the suite
        return CheckResult(name, "fail", detail="".join(traceback.format_exception_only(type(e), e)).strip())


def random_inputs(model: WaveGlow, n_samples: int, seed: int = 0):
    """Random audio [1, n] in (-0.5, 0.5) and random mel [n_mels, frames] covering it."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, (1, n_samples)).astype(model.dtype)
    frames = model.upsampler.frames_needed(n_samples)
    mel = rng.normal(-4.0, 2.0, (model.config.n_mels, frames))
    return x, mel


def latent(model: WaveGlow, x: np.ndarray, mel) -> np.ndarray:
    with T.no_grad():
        return model.forward(x, mel).z.data


def numeric_logdet(model: WaveGlow, x: np.ndarray, mel, eps: float = 1e-6) -> float:
    """log|det dz/dx| from a central-difference Jacobian (x is [1, n])."""
    n = x.shape[1]
    jac = np.empty((n, n))
    for i in range(n):
        xp, xm = x.copy(), x.copy()
        xp[0, i] += eps
        xm[0, i] -= eps
        jac[:, i] = (latent(model, xp, mel) - latent(model, xm, mel)).reshape(-1) / (2 * eps)
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0:
        raise ArithmeticError("numerical Jacobian is singular")
    return float(logdet)


def check_init(model: WaveGlow, n_samples: int, seed: int = 0) -> list[CheckResult]:
    def ortho():
        worst = max(np.max(np.abs(c.W.data.astype(np.float64) @ c.W.data.T - np.eye(c.W.shape[0])))
                    for c in model.convs)
        return _judge("init: W W^T = I", float(worst), INIT_TOL)

    def logdet():
        return _judge("init: |log|det W||", max(abs(c.logdet) for c in model.convs), INIT_TOL)

    def isometry():
        x, mel = random_inputs(model, n_samples, seed)
        z = latent(model, x, mel)
        ratio = float(np.linalg.norm(z.astype(np.float64)) / np.linalg.norm(x.astype(np.float64)))
        return _judge("init: ||z|| / ||x|| = 1", abs(ratio - 1.0), ISOMETRY_TOL, f"ratio={ratio:.8f}")

    return [_guarded("init: W W^T = I", ortho), _guarded("init: |log|det W||", logdet),
            _guarded("init: ||z|| / ||x|| = 1", isometry)]


def check_invertible_weights(model: WaveGlow) -> CheckResult:
    def run():
        for i, c in enumerate(model.convs):
            try:
                c.logdet
            except WaveGlowError as e:
                return CheckResult("W non-singular", "fail", detail=f"flow {i}: {e}")
        smallest = min(c.logdet for c in model.convs)
        return CheckResult("W non-singular", "pass", detail=f"min log|det W| = {smallest:.4f}")
    return _guarded("W non-singular", run)


def check_round_trip(model: WaveGlow, n_samples: int, seed: int = 0) -> CheckResult:
    tol = ROUND_TRIP_TOL[model.dtype]

    def run():
        x, mel = random_inputs(model, n_samples, seed)
        with T.no_grad():
            z = model.forward(x, mel).z
            back = model.inverse(z, mel).data
        return _judge(f"round trip (T={n_samples})", float(np.max(np.abs(back - x))), tol)
    return _guarded(f"round trip (T={n_samples})", run)


def check_logdet(model: WaveGlow, n_samples: int, seed: int = 0) -> CheckResult:
    name = f"log-det vs numerical Jacobian (T={n_samples})"

    def run():
        x, mel = random_inputs(model, n_samples, seed)
        with T.no_grad():
            out = model.forward(x, mel)
        analytic = out.sum_log_s.item() + out.sum_logdet_W.item()
        numeric = numeric_logdet(model, x, mel)
        rel = abs(analytic - numeric) / max(abs(numeric), 1e-12)
        return _judge(name, rel, LOGDET_TOL, f"analytic={analytic:.8f} numeric={numeric:.8f}")
    return _guarded(name, run)


def check_likelihood(model: WaveGlow, n_samples: int, sigmas=(math.sqrt(0.5), 1.0), seed: int = 0) -> CheckResult:
    name = f"log p(x) = log N(z) + numerical log-det (T={n_samples})"

    def run():
        x, mel = random_inputs(model, n_samples, seed)
        with T.no_grad():
            out = model.forward(x, mel)
        z = out.z.data.reshape(-1)
        num_ld = numeric_logdet(model, x, mel)
        worst = 0.0
        for s in sigmas:
            ref = float(-0.5 * np.sum(z * z) / s ** 2 - 0.5 * z.size * math.log(2 * math.pi * s * s)) + num_ld
            worst = max(worst, abs(log_likelihood(out, s) - ref) / max(abs(ref), 1e-12))
        return _judge(name, worst, LIKELIHOOD_TOL, f"sigmas={[round(s, 4) for s in sigmas]}")
    return _guarded(name, run)


def gradient_groups(model: WaveGlow) -> dict[str, list[T.Tensor]]:
    groups: dict[str, list[T.Tensor]] = {"invconv W": [c.W for c in model.convs],
                                         "upsampler": [model.upsampler.w, model.upsampler.b],
                                         "WN conv directions": [], "weight-norm magnitudes": [],
                                         "WN biases": [], "WN output layer": []}
    for coup in model.couplings:
        for name, p in coup.wn.parameters().items():
            if name.startswith("end."):
                groups["WN output layer"].append(p)
            elif name.endswith(".v"):
                groups["WN conv directions"].append(p)
            elif name.endswith(".g"):
                groups["weight-norm magnitudes"].append(p)
            else:
                groups["WN biases"].append(p)
    return groups


def check_gradients(model: WaveGlow, n_samples: int, seed: int = 0, coords: int = 4) -> list[CheckResult]:
    if model.dtype != np.float64:
        return [CheckResult("gradcheck", "skip", detail="requires f64 mode")]
    x, mel = random_inputs(model, n_samples, seed)
    sigma = model.config.sigma

    def loss(*_):
        return negative_log_likelihood(model.forward(x, mel), sigma).loss

    results = []
    for group, tensors in gradient_groups(model).items():
        name = f"gradcheck {group}"
        results.append(_guarded(name, lambda t=tensors, n=name: _judge(
            n, T.gradcheck(loss, t, eps=1e-5, max_coords=coords, seed=seed), GRAD_TOL)))
    model.zero_grad()
    return results


def run_suite(model: WaveGlow, preset_name: str | None = None, fresh: bool = True, seed: int = 0) -> list[CheckResult]:
    rt_len, jac_len = GEOMETRY.get(preset_name, (4096, None))
    results = []
    if fresh:
        results += check_init(model, rt_len, seed)
        randomize(model, seed=seed + 1)
    results.append(check_invertible_weights(model))
    results.append(check_round_trip(model, rt_len, seed))
    if jac_len is None:
        for n in ("log-det vs numerical Jacobian", "likelihood identity", "gradcheck"):
            results.append(CheckResult(n, "skip", detail="dimensionality too large for this preset"))
    elif model.dtype != np.float64:
        for n in ("log-det vs numerical Jacobian", "likelihood identity", "gradcheck"):
            results.append(CheckResult(n, "skip", detail="requires f64 mode"))
    else:
        results.append(check_logdet(model, jac_len, seed))
        results.append(check_likelihood(model, jac_len, seed=seed))
        results += check_gradients(model, jac_len, seed)
    return results


def verify_preset(name: str, mode: str = "f64", seed: int = 0) -> list[CheckResult]:
    dtype = {"f32": np.float32, "f64": np.float64}[mode]
    return run_suite(WaveGlow(preset(name), seed=seed, dtype=dtype), name, fresh=True, seed=seed)


def verify_model(model: WaveGlow, mode: str = "f64", seed: int = 0) -> list[CheckResult]:
    model.astype({"f32": np.float32, "f64": np.float64}[mode])
    name = next((k for k in GEOMETRY if model.config == preset(k)), None)
    return run_suite(model, name, fresh=False, seed=seed)
