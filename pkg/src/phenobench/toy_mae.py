"""Desk-scale masked autoencoder with closed-form gradients and Lion updates.

The architecture keeps the MAE contract and nothing more: patches are
encoded linearly, only visible patches are encoded, their mean forms a
context vector, and every masked position is predicted by a linear decoder
applied to ``mask_token + context``. The loss is the mean squared error over
masked patches only.

Parameters::

    E   (latent, P)   encoder_weights      bE (latent,)  encoder_bias
    D   (P, latent)   decoder_weights      bD (P,)       decoder_bias
    m   (latent,)     mask_token

with ``P = patch_side**2 * channels``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baselines import ImagePlanes
from .errors import TrainingDivergedError, ValidationError

PARAM_NAMES = ("encoder_weights", "encoder_bias", "decoder_weights", "decoder_bias", "mask_token")
PATCH_SIDES = (8, 16)
MASK_RATIOS = (0.25, 0.75)


@dataclass(frozen=True)
class MaeConfig:
    patch_side: int = 8
    mask_ratio: float = 0.75
    channels: int = 6
    latent_dim: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    seed: int = 0
    init_scale: float = 0.02
    batch_size: int | None = None  # None: full batch
    eval_every: int = 10

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ValidationError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.patch_side < 1 or self.channels < 1 or self.latent_dim < 1:
            raise ValidationError("patch_side, channels and latent_dim must be positive")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not (0 <= self.beta1 <= 1 and 0 <= self.beta2 <= 1):
            raise ValidationError("betas must lie in [0, 1]")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be positive")

    @property
    def token_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels

    @classmethod
    def from_dict(cls, d: Mapping) -> "MaeConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown MaeConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class MaeModel:
    config: MaeConfig
    encoder_weights: np.ndarray
    encoder_bias: np.ndarray
    decoder_weights: np.ndarray
    decoder_bias: np.ndarray
    mask_token: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def replace(self, params: Mapping[str, np.ndarray]) -> "MaeModel":
        return MaeModel(self.config, **{k: params[k] for k in PARAM_NAMES})

    def check(self) -> None:
        L, P = self.config.latent_dim, self.config.token_dim
        want = {"encoder_weights": (L, P), "encoder_bias": (L,), "decoder_weights": (P, L),
                "decoder_bias": (P,), "mask_token": (L,)}
        for k, shape in want.items():
            v = getattr(self, k)
            if v.shape != shape:
                raise ValidationError(f"{k} has shape {v.shape}, expected {shape}")
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"{k} has non-finite entries")


def init_model(config: MaeConfig, rng: np.random.Generator | None = None) -> MaeModel:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    L, P = config.latent_dim, config.token_dim
    s = config.init_scale
    return MaeModel(config,
                    encoder_weights=rng.normal(0.0, s, (L, P)),
                    encoder_bias=np.zeros(L),
                    decoder_weights=rng.normal(0.0, s, (P, L)),
                    decoder_bias=np.zeros(P),
                    mask_token=np.zeros(L))


def zero_model(config: MaeConfig) -> MaeModel:
    L, P = config.latent_dim, config.token_dim
    return MaeModel(config, np.zeros((L, P)), np.zeros(L), np.zeros((P, L)), np.zeros(P),
                    np.zeros(L))


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, ImagePlanes) else np.asarray(image)


def patchify(image: ImagePlanes | np.ndarray, patch_side: int) -> np.ndarray:
    """Tokens in row-major grid order; each token is channel-major within its patch."""
    px = _pixels(image)
    c, h, w = px.shape
    p = patch_side
    if p < 1 or h % p or w % p:
        raise ValidationError(f"patch side {p} does not divide image {h}x{w}")
    grid = px.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)
    return grid.reshape((h // p) * (w // p), c * p * p).astype(np.float64)


def unpatchify(tokens: np.ndarray, channels: int, height: int, width: int,
               patch_side: int) -> np.ndarray:
    p = patch_side
    gh, gw = height // p, width // p
    t = np.asarray(tokens).reshape(gh, gw, channels, p, p)
    return t.transpose(2, 0, 3, 1, 4).reshape(channels, height, width)


@dataclass(frozen=True, eq=False)
class MaskPlan:
    n_tokens: int
    visible: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        vis = np.sort(np.asarray(self.visible, dtype=np.intp))
        msk = np.sort(np.asarray(self.masked, dtype=np.intp))
        if not np.array_equal(np.union1d(vis, msk), np.arange(self.n_tokens)) \
                or len(vis) + len(msk) != self.n_tokens:
            raise ValidationError("visible and masked must partition the token indices")
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "masked", msk)


def n_masked(n_tokens: int, mask_ratio: float) -> int:
    # Half-up rounding of mask_ratio * n_tokens.
    return int(math.floor(mask_ratio * n_tokens + 0.5))


def sample_mask(n_tokens: int, mask_ratio: float,
                rng: np.random.Generator | int) -> MaskPlan:
    if not 0 < mask_ratio < 1:
        raise ValidationError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if n_tokens < 2:
        raise ValidationError("need at least 2 tokens to mask")
    k = n_masked(n_tokens, mask_ratio)
    if k == 0 or k == n_tokens:
        raise ValidationError(f"mask_ratio {mask_ratio} on {n_tokens} tokens leaves an empty set")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    perm = rng.permutation(n_tokens)
    return MaskPlan(n_tokens, perm[k:], perm[:k])


def _context(model: MaeModel, tokens: np.ndarray, plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    if len(plan.visible) == 0:
        raise ValidationError("no visible tokens")
    if tokens.shape != (plan.n_tokens, model.config.token_dim):
        raise ValidationError(f"tokens have shape {tokens.shape}, expected "
                              f"({plan.n_tokens}, {model.config.token_dim})")
    vis_mean = tokens[plan.visible].mean(axis=0)
    # mean of (E t + bE) over visible tokens == E mean(t) + bE
    context = model.encoder_weights @ vis_mean + model.encoder_bias
    return vis_mean, model.mask_token + context


def forward(model: MaeModel, tokens: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Predictions for the masked positions, one row per ``plan.masked`` entry."""
    _, h = _context(model, np.asarray(tokens, dtype=np.float64), plan)
    pred = model.decoder_weights @ h + model.decoder_bias
    return np.broadcast_to(pred, (len(plan.masked), pred.shape[0])).copy()


def masked_mse(pred: np.ndarray, target_tokens: np.ndarray, plan: MaskPlan) -> float:
    """Mean squared error over masked positions and token components.

    ``pred`` is either aligned with ``plan.masked`` or a full ``n_tokens`` array.
    """
    if len(plan.masked) == 0:
        raise ValidationError("no masked tokens")
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[0] == plan.n_tokens:
        pred = pred[plan.masked]
    target = np.asarray(target_tokens, dtype=np.float64)[plan.masked]
    if pred.shape != target.shape:
        raise ValidationError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def backward(model: MaeModel, tokens: np.ndarray, plan: MaskPlan
             ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its exact gradient with respect to every parameter."""
    tokens = np.asarray(tokens, dtype=np.float64)
    vis_mean, h = _context(model, tokens, plan)
    pred = model.decoder_weights @ h + model.decoder_bias
    resid = pred[None, :] - tokens[plan.masked]
    n = resid.size
    loss = float(np.mean(resid ** 2))
    # Every masked position shares one prediction, so gradients go through the residual sum.
    g_pred = 2.0 * resid.sum(axis=0) / n
    g_h = model.decoder_weights.T @ g_pred
    grads = {
        "decoder_weights": np.outer(g_pred, h),
        "decoder_bias": g_pred,
        "mask_token": g_h,
        "encoder_bias": g_h.copy(),
        "encoder_weights": np.outer(g_h, vis_mean),
    }
    return loss, grads


@dataclass(eq=False)
class LionState:
    momentum: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "LionState":
        return cls({k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()})


def _sign_step(theta: np.ndarray, s: np.ndarray, lr: float) -> np.ndarray:
    """``theta - lr * s``, rounded toward ``theta`` wherever rounding overshoots ``lr``."""
    theta = np.asarray(theta, dtype=np.float64)
    new = theta - lr * s
    over = np.abs(new - theta) > lr
    while np.any(over):
        new[over] = np.nextafter(new[over], theta[over])
        over = np.abs(new - theta) > lr
    return new


def lion_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: LionState, lr: float, beta1: float = 0.9, beta2: float = 0.95,
              weight_decay: float = 0.0) -> tuple[dict[str, np.ndarray], LionState]:
    """One Lion update; inputs are not modified.

    ``c = b1 m + (1 - b1) g``; ``theta -= lr (sign(c) + wd theta)``;
    ``m = b2 m + (1 - b2) g``. ``sign(0) = 0``. The sign step is rounded toward
    ``theta`` so that with ``wd = 0`` no coordinate moves by more than ``lr``.
    """
    new_params, new_mom = {}, {}
    for k, theta in params.items():
        g = grads[k]
        m = state.momentum[k]
        if g.shape != theta.shape or m.shape != theta.shape:
            raise ValidationError(f"shape mismatch for {k}")
        c = beta1 * m + (1 - beta1) * g
        stepped = _sign_step(theta, np.sign(c), lr)
        new_params[k] = stepped - lr * weight_decay * theta if weight_decay else stepped
        new_mom[k] = beta2 * m + (1 - beta2) * g
    return new_params, LionState(new_mom)


def batch_backward(model: MaeModel, batch: Sequence[np.ndarray], plans: Sequence[MaskPlan]
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and gradient over images, accumulated in batch order."""
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in model.params().items()}
    for tokens, plan in zip(batch, plans):
        loss, g = backward(model, tokens, plan)
        total += loss
        for k in acc:
            acc[k] += g[k]
    n = len(batch)
    return total / n, {k: v / n for k, v in acc.items()}


def evaluate(model: MaeModel, batch: Sequence[np.ndarray], plans: Sequence[MaskPlan]) -> float:
    return float(np.mean([masked_mse(forward(model, t, p), t, p) for t, p in zip(batch, plans)]))


@dataclass
class LossCurve:
    steps: list[int] = field(default_factory=list)
    validation: list[float] = field(default_factory=list)
    train: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["step,validation_loss,train_loss"]
        for s, v, t in zip(self.steps, self.validation, self.train):
            lines.append(f"{s},{v!r},{t!r}")
        return "\n".join(lines) + "\n"


def train(config: MaeConfig, images: Sequence[ImagePlanes | np.ndarray], steps: int,
          validation: Sequence[ImagePlanes | np.ndarray] | None = None
          ) -> tuple[MaeModel, LossCurve]:
    """Train from ``config.seed``; fully deterministic for fixed inputs.

    Validation loss (held-out ``validation`` images, or the training images
    when none are given) uses masks drawn once and reused, and is recorded at
    step 0, every ``config.eval_every`` steps and after the last step.
    """
    if not images:
        raise ValidationError("need at least one training image")
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    toks = [patchify(im, config.patch_side) for im in images]
    if toks[0].shape[1] != config.token_dim:
        raise ValidationError(f"images have {toks[0].shape[1] // config.patch_side ** 2} channels, "
                              f"config expects {config.channels}")
    val_toks = toks if validation is None else [patchify(im, config.patch_side) for im in validation]
    n_tok = toks[0].shape[0]

    rng = np.random.default_rng(config.seed)
    model = init_model(config, rng)
    mask_rng = np.random.default_rng([config.seed, 1])
    val_plans = [sample_mask(t.shape[0], config.mask_ratio, mask_rng) for t in val_toks]
    batch_rng = np.random.default_rng([config.seed, 2])
    state = LionState.zeros_like(model.params())
    curve = LossCurve()

    def record(step, train_loss):
        v = evaluate(model, val_toks, val_plans)
        if not math.isfinite(v):
            raise TrainingDivergedError(f"validation loss {v} at step {step}")
        curve.steps.append(step)
        curve.validation.append(v)
        curve.train.append(train_loss)

    record(0, float("nan"))
    bs = config.batch_size or len(toks)
    for step in range(1, steps + 1):
        idx = (np.arange(len(toks)) if bs >= len(toks)
               else np.sort(batch_rng.choice(len(toks), size=bs, replace=False)))
        batch = [toks[i] for i in idx]
        plans = [sample_mask(n_tok, config.mask_ratio, mask_rng) for _ in idx]
        loss, grads = batch_backward(model, batch, plans)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step} (loss={loss})")
        params, state = lion_step(model.params(), grads, state, config.learning_rate,
                                  config.beta1, config.beta2, config.weight_decay)
        model = model.replace(params)
        if step % config.eval_every == 0 or step == steps:
            record(step, loss)
    return model, curve


def embed(model: MaeModel, image: ImagePlanes | np.ndarray) -> np.ndarray:
    """Mean encoder output over all tokens (no masking)."""
    tokens = patchify(image, model.config.patch_side)
    if tokens.shape[1] != model.config.token_dim:
        raise ValidationError(f"image token length {tokens.shape[1]} != {model.config.token_dim}")
    return model.encoder_weights @ tokens.mean(axis=0) + model.encoder_bias


def synthetic_images(n: int, side: int = 32, channels: int = 6, patch_side: int = 8,
                     rank: int = 4, noise: float = 0.05, seed: int = 0,
                     basis_seed: int = 0) -> list[ImagePlanes]:
    """Low-rank non-negative images: each patch mixes ``rank`` shared basis patches.

    Mixing weights are per image plus a small per-patch jitter, so the visible
    patches carry the information needed to reconstruct the masked ones.
    Sets drawn with different ``seed`` but equal ``basis_seed`` share a basis.
    """
    p_dim = patch_side * patch_side * channels
    basis = np.random.default_rng(basis_seed).uniform(0.0, 1.0, (rank, p_dim))
    rng = np.random.default_rng([basis_seed, seed])
    n_tok = (side // patch_side) ** 2
    out = []
    for _ in range(n):
        coef = rng.uniform(0.0, 1.0, rank)
        jitter = rng.normal(0.0, noise, (n_tok, rank))
        toks = np.clip((coef + jitter) @ basis, 0.0, None)
        out.append(ImagePlanes(unpatchify(toks, channels, side, side, patch_side)))
    return out


_MAGIC = b"PBMAE1\x00\x00"


def save_checkpoint(model: MaeModel, path: str | Path) -> None:
    """Binary dump: magic, u64 header length, JSON header, little-endian float64 arrays."""
    header = {
        "config": asdict(model.config),
        "seed": model.config.seed,
        "dtype": "<f8",
        "order": list(PARAM_NAMES),
        "shapes": {k: list(getattr(model, k).shape) for k in PARAM_NAMES},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for k in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(model, k), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> MaeModel:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    config = MaeConfig.from_dict(header["config"])
    offset = 16 + hlen
    arrays = {}
    for k in header["order"]:
        shape = tuple(header["shapes"][k])
        count = int(np.prod(shape)) if shape else 1
        arrays[k] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise ValidationError(f"{path}: trailing or missing bytes")
    model = MaeModel(config, **arrays)
    model.check()
    return model
