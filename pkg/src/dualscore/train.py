"""Training loop, normalization at the largest noise level, and checkpoints.

The dataset is drawn once and fixed; minibatches resample indices with
replacement and draw fresh noise every visit. Because the model and the data
are radial, a sample contributes to the loss only through
(q, p, m, t) = (||y||^2, <y, z>, ||z||^2, t), which are sampled exactly from
the stored radius r = ||x||:

    u ~ N(0, 1) is the component of z along x, w ~ chi^2_{d-1} the rest,
    m = u^2 + w,  q = r^2 + 2 sqrt(t) r u + t m,  p = r u + sqrt(t) m.

This avoids materializing n x d arrays without changing the law of training.
"""

import base64
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .analytic import IsotropicGaussianMixture
from .model import ExactGsmEnergy, QuadMixEnergy
from .objective import LossBreakdown, sample_noise_level, stats_loss
from .rng import stream
from .threads import limited_workers

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite loss or gradient, with the offending step index."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class GsmSpec:
    """Dataset specification: an isotropic Gaussian scale mixture."""

    dim: int = 1000
    sigmas: tuple = (1.0, 4.0)
    weights: "tuple | None" = None
    n_samples: int = 100_000

    def build(self) -> IsotropicGaussianMixture:
        return IsotropicGaussianMixture.from_sigmas(
            self.dim, list(self.sigmas), None if self.weights is None else list(self.weights)
        )


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 20_000
    batch_size: int = 512
    learning_rate: float = 1e-4
    lr_halving_interval: "int | None" = None
    t_min: float = 1e-2
    t_max: float = 1e2
    data: GsmSpec = field(default_factory=GsmSpec)
    n_components: int = 2
    mlp_depth: int = 5
    mlp_width: int = 256
    norm_samples: int = 4096
    clip_norm: float = 1e3

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not (0.0 < self.t_min < self.t_max):
            raise ValueError("need 0 < t_min < t_max")
        if self.learning_rate <= 0 or self.norm_samples < 1:
            raise ValueError("invalid learning_rate or norm_samples")
        if self.lr_halving_interval is not None and self.lr_halving_interval < 1:
            raise ValueError("lr_halving_interval must be >= 1 or null")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = asdict(self.data)
        if d["data"]["weights"] is not None:
            d["data"]["weights"] = list(d["data"]["weights"])
        d["data"]["sigmas"] = list(d["data"]["sigmas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        data = d.pop("data", {})
        known_data = {f for f in GsmSpec.__dataclass_fields__}
        unknown = set(data) - known_data
        if unknown:
            raise ValueError(f"unknown data keys: {sorted(unknown)}")
        if "sigmas" in data:
            data["sigmas"] = tuple(data["sigmas"])
        if data.get("weights") is not None:
            data["weights"] = tuple(data["weights"])
        known = {f for f in cls.__dataclass_fields__} - {"data"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(data=GsmSpec(**data), **d)


@dataclass
class AdamState:
    """First/second moment estimates with the usual defaults."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, theta, grad, lr):
    """Bias-corrected Adam update; returns the new parameter vector."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainHistory:
    step: np.ndarray
    dsm: np.ndarray
    tsm: np.ndarray
    total: np.ndarray
    lr: np.ndarray
    grad_norm: np.ndarray
    clipped: np.ndarray

    def summary(self, max_points=200) -> dict:
        n = self.step.size
        stride = max(1, n // max_points)
        idx = list(range(0, n, stride))
        if idx[-1] != n - 1:
            idx.append(n - 1)
        return {
            "step": [int(self.step[i]) for i in idx],
            "total": [float(self.total[i]) for i in idx],
            "dsm": [float(self.dsm[i]) for i in idx],
            "tsm": [float(self.tsm[i]) for i in idx],
        }

    def rows(self):
        for i in range(self.step.size):
            yield (
                int(self.step[i]),
                float(self.dsm[i]),
                float(self.tsm[i]),
                float(self.total[i]),
                float(self.lr[i]),
                float(self.grad_norm[i]),
            )


def draw_dataset(mix: IsotropicGaussianMixture, n: int, rng):
    """Fixed finite dataset, stored as radii plus component labels."""
    radii, labels = mix.sample_radii(rng, n)
    return radii, labels


def _batch_stats(radii, idx, t, rng, dim):
    r = radii[idx]
    u = rng.standard_normal(idx.size)
    w = rng.chisquare(dim - 1, idx.size) if dim > 1 else np.zeros(idx.size)
    m = u * u + w
    sqrt_t = np.sqrt(t)
    q = r * r + 2.0 * sqrt_t * r * u + t * m
    p = r * u + sqrt_t * m
    return q, p, m


def train(config: TrainConfig, kind="dual", log_every=None):
    """Optimize a fresh model on a fixed dataset; returns (model, history).

    Deterministic given (config, seed, kind). The returned model is
    un-normalized; apply :func:`normalize` afterwards.
    """
    if kind not in ("dual", "single"):
        raise ValueError(f"unknown objective kind {kind!r}")
    mix = config.data.build()
    model = QuadMixEnergy.create(
        dim=config.data.dim,
        rng=stream(config.seed, "init", kind),
        n_components=config.n_components,
        depth=config.mlp_depth,
        width=config.mlp_width,
        t_min_offset=config.t_min,
    )
    radii, _ = draw_dataset(mix, config.data.n_samples, stream(config.seed, "dataset"))
    rng_batch = stream(config.seed, "batch", kind)
    rng_noise = stream(config.seed, "noise", kind)

    theta = model.theta
    adam = AdamState.zeros(theta.size)
    hist = {k: np.zeros(config.steps) for k in ("dsm", "tsm", "total", "lr", "gn")}
    clipped = np.zeros(config.steps, dtype=bool)

    with limited_workers():
        _run_steps(config, kind, model, radii, rng_batch, rng_noise, theta, adam,
                   hist, clipped, log_every)

    history = TrainHistory(
        step=np.arange(config.steps),
        dsm=hist["dsm"],
        tsm=hist["tsm"],
        total=hist["total"],
        lr=hist["lr"],
        grad_norm=hist["gn"],
        clipped=clipped,
    )
    return model, history


def _run_steps(config, kind, model, radii, rng_batch, rng_noise, theta, adam,
               hist, clipped, log_every):
    for step in range(config.steps):
        lr = config.learning_rate
        if config.lr_halving_interval:
            lr *= 0.5 ** (step // config.lr_halving_interval)
        idx = rng_batch.integers(0, radii.size, size=config.batch_size)
        t = sample_noise_level(rng_noise, config.t_min, config.t_max, config.batch_size)
        q, p, m = _batch_stats(radii, idx, t, rng_noise, config.data.dim)
        breakdown, grad = stats_loss(model, q, p, m, t, kind=kind)
        if not math.isfinite(breakdown.total):
            raise TrainingError(
                step,
                f"non-finite loss (dsm={breakdown.dsm}, tsm={breakdown.tsm}, "
                f"t in [{t.min():.3g}, {t.max():.3g}])",
            )
        gnorm = float(np.linalg.norm(grad))
        if gnorm > config.clip_norm:
            grad = grad * (config.clip_norm / gnorm)
            clipped[step] = True
        try:
            theta = adam_step(adam, theta, grad, lr)
        except ValueError as exc:
            raise TrainingError(step, str(exc)) from exc
        model.set_theta(theta)
        hist["dsm"][step] = breakdown.dsm
        hist["tsm"][step] = breakdown.tsm
        hist["total"][step] = breakdown.total
        hist["lr"][step] = lr
        hist["gn"][step] = gnorm
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            print(
                f"[{kind}] step {step:6d} dsm {breakdown.dsm:.5f} "
                f"tsm {breakdown.tsm:.6f} |g| {gnorm:.3g}"
            )


def normalize(model, mix: IsotropicGaussianMixture, t_max: float, rng, sample_count=4096):
    """Pin the mean energy at t_max to the Gaussian entropy (d/2)log(2 pi e t_max).

    Draws y = x + sqrt(t_max) z with x from the data distribution, then sets
    norm_offset so that the Monte-Carlo mean of U(y, t_max) equals the target.
    Returns the model (mutated) and the applied offset.
    """
    d = model.dim
    r, _ = mix.sample_radii(rng, sample_count)
    u = rng.standard_normal(sample_count)
    w = rng.chisquare(d - 1, sample_count) if d > 1 else np.zeros(sample_count)
    q = r * r + 2.0 * math.sqrt(t_max) * r * u + t_max * (u * u + w)
    mean_u = float(np.mean(model.energy_q(q, t_max)))
    target = 0.5 * d * math.log(2.0 * math.pi * math.e * t_max)
    offset = target - mean_u
    model.norm_offset += offset
    return model, offset


def train_and_normalize(config: TrainConfig, kind="dual", log_every=None):
    model, history = train(config, kind=kind, log_every=log_every)
    normalize(
        model,
        config.data.build(),
        config.t_max,
        stream(config.seed, "normalize", kind),
        config.norm_samples,
    )
    return model, history


# -- checkpoints ----------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode()


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def checkpoint_payload(model, config=None, rng_state=None, history_summary=None) -> dict:
    if isinstance(model, QuadMixEnergy):
        theta = model.theta.astype("<f8")
        section = {
            "kind": "quadmix",
            "dim": model.dim,
            "n_components": model.n_components,
            "t_min_offset": model.t_min_offset,
            "a_scale": model.a_scale,
            "b_scale": model.b_scale,
            "norm_offset": model.norm_offset,
            "theta_b64": base64.b64encode(theta.tobytes()).decode("ascii"),
            "shapes": [
                [list(ws), list(bs)] for ws, bs in model.mlp.shapes()
            ],
        }
    elif isinstance(model, ExactGsmEnergy):
        section = {
            "kind": "exact_gsm",
            "dim": model.dim,
            "sigmas": [float(s) for s in np.sqrt(model.mix.variances)],
            "weights": [float(w) for w in model.mix.weights],
            "norm_offset": model.norm_offset,
        }
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    return {
        "format_version": CHECKPOINT_VERSION,
        "model": section,
        "config": None if config is None else config.to_dict(),
        "rng_state": _sanitize(rng_state),
        "history": history_summary,
    }


def save_checkpoint(path, model, config=None, rng_state=None, history_summary=None):
    payload = checkpoint_payload(model, config, rng_state, history_summary)
    data = _canonical_json(_sanitize(payload))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, config or None, payload dict)."""
    with open(path, "rb") as fh:
        payload = json.loads(fh.read().decode())
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    section = payload["model"]
    if section["kind"] == "quadmix":
        from .model import TimeMlp

        shapes = section["shapes"]
        mlp = TimeMlp(
            weights=[np.zeros(tuple(ws)) for ws, _ in shapes],
            biases=[np.zeros(tuple(bs)) for _, bs in shapes],
        )
        model = QuadMixEnergy(
            dim=int(section["dim"]),
            n_components=int(section["n_components"]),
            mlp=mlp,
            t_min_offset=float(section["t_min_offset"]),
            norm_offset=float(section["norm_offset"]),
            a_scale=float(section["a_scale"]),
            b_scale=float(section["b_scale"]),
        )
        raw = base64.b64decode(section["theta_b64"])
        model.set_theta(np.frombuffer(raw, dtype="<f8"))
    elif section["kind"] == "exact_gsm":
        mix = IsotropicGaussianMixture.from_sigmas(
            int(section["dim"]), section["sigmas"], section["weights"]
        )
        model = ExactGsmEnergy(mix, norm_offset=float(section["norm_offset"]))
    else:
        raise ValueError(f"unknown model kind {section['kind']!r}")
    config = None
    if payload.get("config") is not None:
        config = TrainConfig.from_dict(payload["config"])
    return model, config, payload
