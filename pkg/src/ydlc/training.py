"""Rate-distortion training of codec models.

The loss is L = R + beta * D per luma pixel: R sums the model's -log2
likelihoods of the latents and hyper-latents under the additive-uniform-noise
quantization proxy, and D is the channel-weighted MSE expressed in 8-bit
units (the [0,1]-domain MSE times 255^2, which is the scale the beta presets
assume).  Chroma components carry explicit weights, (8,2,2)/12 by default or
(6,3,3)/12 for the chroma-favoring preset.

Optimization is Adam with a single learning-rate drop at a configured step
(half the schedule by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import codec as cd
from . import frames as fr
from .errors import ConfigError, DomainError

DISTORTION_SCALE = 255.0 ** 2
WEIGHT_PRESETS = {
    "luma-heavy": (8.0, 2.0, 2.0),
    "chroma-boost": (6.0, 3.0, 3.0),
}


@dataclass
class TrainConfig:
    codec: str
    n: int
    m: int
    beta: float
    steps: int
    weights: tuple = WEIGHT_PRESETS["luma-heavy"]
    batch_size: int = 8
    patch_size: int = 64
    lr: float = 1e-4
    lr_drop_step: int = 0       # 0 means steps // 2
    lr_drop_factor: float = 0.1
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 0  # 0 means final checkpoint only

    def validate(self) -> "TrainConfig":
        if self.codec not in cd.CODECS:
            raise ConfigError(f"unknown codec {self.codec!r}; choose from {cd.CODECS}")
        if self.n <= 0 or self.m <= 0:
            raise ConfigError(f"n and m must be positive, got {self.n}, {self.m}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigError(f"beta must be positive and finite, got {self.beta}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be at least 1")
        if len(self.weights) != 3 or any(w <= 0 for w in self.weights):
            raise ConfigError(f"weights must be three positive numbers, "
                              f"got {self.weights}")
        mult = cd.pad_multiple(self.codec)
        if self.patch_size % mult or self.patch_size <= 0:
            raise ConfigError(f"patch_size must be a positive multiple of {mult} "
                              f"for {self.codec}, got {self.patch_size}")
        if not (0 < self.lr and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 < self.lr_drop_factor <= 1):
            raise ConfigError(f"lr_drop_factor must be in (0,1], got {self.lr_drop_factor}")
        if self.lr_drop_step < 0 or self.lr_drop_step > self.steps:
            raise ConfigError(f"lr_drop_step must be in [0, steps], got {self.lr_drop_step}")
        if self.log_interval < 1 or self.checkpoint_interval < 0:
            raise ConfigError("bad log/checkpoint interval")
        return self

    def drop_step(self) -> int:
        return self.lr_drop_step if self.lr_drop_step else self.steps // 2

    def lr_at(self, step: int) -> float:
        """Step is 1-based; the dropped rate applies from the drop step on."""
        return self.lr * self.lr_drop_factor if step > self.drop_step() else self.lr


_CONFIG_FIELDS = {
    "codec": str, "n": int, "m": int, "beta": float, "steps": int,
    "weights": "weights", "batch_size": int, "patch_size": int, "lr": float,
    "lr_drop_step": int, "lr_drop_factor": float, "seed": int,
    "log_interval": int, "checkpoint_interval": int,
}
_REQUIRED_FIELDS = ("codec", "n", "m", "beta", "steps")


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    seen: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = _CONFIG_FIELDS[key]
        try:
            if kind == "weights":
                if val in WEIGHT_PRESETS:
                    seen[key] = WEIGHT_PRESETS[val]
                else:
                    parts = [float(p) for p in val.split(",")]
                    if len(parts) != 3:
                        raise ValueError
                    seen[key] = tuple(parts)
            else:
                seen[key] = kind(val)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {val!r} for {key}") from None
    missing = [k for k in _REQUIRED_FIELDS if k not in seen]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")
    return TrainConfig(**seen).validate()


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key in _CONFIG_FIELDS:
        val = getattr(cfg, key)
        if key == "weights":
            val = ",".join(repr(float(w)) for w in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Loss.

def weighted_distortion(mse_y, mse_u, mse_v, weights):
    """(w_y my + w_u mu + w_v mv) / (w_y + w_u + w_v); works on floats or graphs."""
    wy, wu, wv = (float(w) for w in weights)
    total = wy + wu + wv
    return (wy * mse_y + wu * mse_u + wv * mse_v) * (1.0 / total)


def _mse(a: ag.Tensor, b: ag.Tensor) -> ag.Tensor:
    return ag.mean(ag.square(ag.sub(a, b)))


def _component_mses(codec: str, inputs, outputs):
    if codec == "separate":
        mse_y = _mse(outputs[0], inputs[0])
        ur, vr = ag.split(outputs[1], [1, 1])
        ut, vt = ag.split(inputs[1], [1, 1])
        return mse_y, _mse(ur, ut), _mse(vr, vt)
    if codec == "six-channel":
        yr, ur, vr = ag.split(outputs[0], [4, 1, 1])
        yt, ut, vt = ag.split(inputs[0], [4, 1, 1])
        return _mse(yr, yt), _mse(ur, ut), _mse(vr, vt)
    y_t, uv_t = inputs[0]
    y_r, uv_r = outputs[0]
    ur, vr = ag.split(uv_r, [1, 1])
    ut, vt = ag.split(uv_t, [1, 1])
    return _mse(y_r, y_t), _mse(ur, ut), _mse(vr, vt)


def _noise_like(t: ag.Tensor, rng: np.random.Generator) -> ag.Tensor:
    return ag.Tensor(rng.uniform(-0.5, 0.5, t.shape).astype(np.float32))


def rd_loss(model: cd.CodecModel, y: np.ndarray, u: np.ndarray, v: np.ndarray,
            beta: float, weights, noise_rng: np.random.Generator):
    """One training objective evaluation under the noise proxy.

    ``y`` is (B,H,W) and ``u``/``v`` are (B,H/2,W/2), all float in [0,1].
    Returns (loss tensor, stats dict); the rate normalizer is luma pixels.
    """
    inputs = cd.pack_inputs(model.codec, y, u, v)
    bits = None
    outputs = []
    for part, inp in zip(model.parts, inputs):
        latent = cd.part_analysis(part, inp)
        z = cd.hyper_analysis(part, latent)
        latent_n = ag.add(latent, _noise_like(latent, noise_rng))
        z_n = ag.add(z, _noise_like(z, noise_rng))
        mu, sigma = cd.hyper_synthesis(part, z_n, latent.shape[2:])
        pmu, psig = cd.hyper_prior(part)
        part_bits = ag.add(
            ag.tsum(cd.gaussian_bits(latent_n, mu, sigma)),
            ag.tsum(cd.gaussian_bits(z_n, pmu, psig)))
        bits = part_bits if bits is None else ag.add(bits, part_bits)
        outputs.append(cd.part_synthesis(part, latent_n))

    luma_pixels = y.shape[0] * y.shape[1] * y.shape[2]
    rate = ag.mul_scalar(bits, 1.0 / luma_pixels)
    mse_y, mse_u, mse_v = _component_mses(model.codec, inputs, outputs)
    dist = weighted_distortion(mse_y, mse_u, mse_v, weights) * DISTORTION_SCALE
    loss = ag.add(rate, ag.mul_scalar(dist, beta))
    stats = {
        "rate_bpp": rate.item(),
        "distortion": dist.item(),
        "mse_y": mse_y.item() * DISTORTION_SCALE,
        "mse_u": mse_u.item() * DISTORTION_SCALE,
        "mse_v": mse_v.item() * DISTORTION_SCALE,
        "loss": loss.item(),
    }
    return loss, stats


# ---------------------------------------------------------------------------
# Data sampling and the loop.

def _to_float_planes(frames):
    return [fr.frame_to_float(f) for f in frames]


def sample_batch(planes, batch: int, patch: int, rng: np.random.Generator):
    """Random even-aligned luma patches (with matching chroma) from frames."""
    ys, us, vs = [], [], []
    half = patch // 2
    for _ in range(batch):
        yf, uf, vf = planes[int(rng.integers(0, len(planes)))]
        h, w = yf.shape
        r0 = 2 * int(rng.integers(0, (h - patch) // 2 + 1))
        c0 = 2 * int(rng.integers(0, (w - patch) // 2 + 1))
        ys.append(yf[r0:r0 + patch, c0:c0 + patch])
        us.append(uf[r0 // 2:r0 // 2 + half, c0 // 2:c0 // 2 + half])
        vs.append(vf[r0 // 2:r0 // 2 + half, c0 // 2:c0 // 2 + half])
    return np.stack(ys), np.stack(us), np.stack(vs)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, step, stats, lr):
        self.records.append({"step": step, "loss": stats["loss"],
                             "rate_bpp": stats["rate_bpp"],
                             "distortion": stats["distortion"], "lr": lr})

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("step,loss,rate_bpp,distortion,lr\n")
            for r in self.records:
                f.write(f"{r['step']},{r['loss']!r},{r['rate_bpp']!r},"
                        f"{r['distortion']!r},{r['lr']!r}\n")

    @staticmethod
    def read_csv(path) -> "TrainLog":
        log = TrainLog()
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "step,loss,rate_bpp,distortion,lr":
                raise ConfigError(f"{path}: unexpected training log header {header!r}")
            for line in f:
                step, loss, rate, dist, lr = line.strip().split(",")
                log.records.append({"step": int(step), "loss": float(loss),
                                    "rate_bpp": float(rate),
                                    "distortion": float(dist), "lr": float(lr)})
        return log


def train(cfg: TrainConfig, frames, ckpt_path=None, progress=None):
    """Train a fresh model on the given frames; returns (model, log).

    Checkpoints land at ``ckpt_path`` every ``checkpoint_interval`` steps
    (and always at the end) when a path is given.  ``progress`` is an
    optional callable fed (step, stats).
    """
    cfg = replace(cfg).validate()
    if not frames:
        raise ConfigError("no training frames supplied")
    for f in frames:
        if f.height < cfg.patch_size or f.width < cfg.patch_size:
            raise ConfigError(f"frame {f.width}x{f.height} smaller than patch "
                              f"{cfg.patch_size}")
    planes = _to_float_planes(frames)
    model = cd.new_model(cfg.codec, cfg.n, cfg.m, seed=cfg.seed)
    params = model.all_params()
    data_rng = np.random.default_rng(cfg.seed + 1)
    noise_rng = np.random.default_rng(cfg.seed + 2)
    log = TrainLog()
    for step in range(1, cfg.steps + 1):
        y, u, v = sample_batch(planes, cfg.batch_size, cfg.patch_size, data_rng)
        loss, stats = rd_loss(model, y, u, v, cfg.beta, cfg.weights, noise_rng)
        if not math.isfinite(stats["loss"]):
            raise DomainError(f"training diverged at step {step} "
                              f"(loss {stats['loss']})")
        ag.backward(loss)
        lr = cfg.lr_at(step)
        ag.adam_step(params, lr)
        if step == 1 or step == cfg.steps or step % cfg.log_interval == 0:
            log.add(step, stats, lr)
            if progress is not None:
                progress(step, stats)
        if (ckpt_path is not None and cfg.checkpoint_interval
                and step % cfg.checkpoint_interval == 0):
            cd.save_model(model, ckpt_path)
    if ckpt_path is not None:
        cd.save_model(model, ckpt_path)
    return model, log


def smoothed_losses(log: TrainLog, window: int = 200):
    """Moving average of the logged loss with the given step window."""
    steps = np.array([r["step"] for r in log.records])
    losses = np.array([r["loss"] for r in log.records])
    out = []
    for s in steps:
        mask = (steps > s - window) & (steps <= s)
        out.append(float(losses[mask].mean()))
    return steps.tolist(), out
