"""L1 training of the backbone with Adam and a two-phase patch curriculum.

Phase 1 trains on small LR patches, phase 2 fine-tunes on larger ones. The
learning rate halves every ``lr_half_every`` iterations; in phase 2 the
schedule either continues from the phase-1 iteration count or restarts.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .fileio import save_weights
from .image import ImageBuffer
from .metrics import psnr_over_set
from .model import ModelSpec, ModelWeights, forward_backward, init_weights, l1_loss, upscale

log = logging.getLogger(__name__)

Pair = tuple[ImageBuffer, ImageBuffer]

__all__ = ["TrainConfig", "AdamState", "LogRow", "adam_step", "l1_loss", "learning_rate",
           "load_config", "sample_patch", "train"]


@dataclass
class TrainConfig:
    scale: int = 3
    num_layers: int = 7
    channels: int = 32
    batch_size: int = 8
    patch_size: int = 64
    patch_size_finetune: int = 128
    iters_phase1: int = 2000
    iters_phase2: int = 500
    lr0: float = 1e-3
    lr_half_every: int = 800
    finetune_lr: str = "continue"  # or "reset"
    augment: bool = True
    seed: int = 0
    log_every: int = 50
    val_every: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.patch_size < 1 or self.patch_size_finetune < 1:
            raise ValueError("batch size and patch sizes must be positive")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.lr_half_every < 1:
            raise ValueError("lr_half_every must be >= 1")
        if self.iters_phase1 < 0 or self.iters_phase2 < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.finetune_lr not in ("continue", "reset"):
            raise ValueError(f"finetune_lr must be 'continue' or 'reset', got {self.finetune_lr!r}")

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(scale=self.scale, num_layers=self.num_layers, channels=self.channels)


def _parse_value(kind: type, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    return kind(raw)


def load_config(path: str | os.PathLike | None = None, **overrides) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments allowed); overrides win."""
    types = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type]
             for f in dataclasses.fields(TrainConfig)}
    values = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, raw = line.partition("=")
                key = key.strip()
                if not sep or key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
                values[key] = _parse_value(types[key], raw.strip())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def learning_rate(cfg: TrainConfig, it: int) -> float:
    return cfg.lr0 * 2.0 ** (-(it // cfg.lr_half_every))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


def sample_patch(pair: Pair, size: int, rng: np.random.Generator, scale: int,
                 augment: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Aligned LR/HR crop: LR at (i, j, size), HR at (s*i, s*j, s*size)."""
    lr, hr = pair
    if (hr.height, hr.width) != (scale * lr.height, scale * lr.width):
        raise ValueError(f"HR {hr.width}x{hr.height} is not {scale}x LR {lr.width}x{lr.height}")
    if lr.height < size or lr.width < size:
        raise ValueError(f"LR image {lr.width}x{lr.height} smaller than patch size {size}")
    i = int(rng.integers(0, lr.height - size + 1))
    j = int(rng.integers(0, lr.width - size + 1))
    lp = lr.pixels[i:i + size, j:j + size]
    hp = hr.pixels[scale * i:scale * (i + size), scale * j:scale * (j + size)]
    if augment:
        if rng.integers(0, 2):
            lp, hp = lp[:, ::-1], hp[:, ::-1]
        k = int(rng.integers(0, 4))
        lp, hp = np.rot90(lp, k), np.rot90(hp, k)
    return lp.astype(np.float32), hp.astype(np.float32)


class LogRow(NamedTuple):
    iter: int
    loss: float
    lr: float
    val_psnr: float


def evaluate(m: ModelWeights, pairs: Sequence[Pair]) -> float:
    return psnr_over_set([(upscale(lr, m), hr) for lr, hr in pairs])


def train(cfg: TrainConfig, dataset: Sequence[Pair], val: Sequence[Pair] = (),
          init: Optional[ModelWeights] = None, checkpoint: Optional[str | os.PathLike] = None,
          on_log: Optional[Callable[[LogRow], None]] = None) -> tuple[ModelWeights, list[LogRow]]:
    """Run both phases and return the final weights with the logged loss curve.

    With ``checkpoint`` set, the best weights by validation PSNR (or the
    latest, without a validation set) are written there, next to a ``.tsv``
    log of (iter, loss, lr, val_psnr).
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    m = init.copy() if init is not None else init_weights(cfg.model_spec, cfg.seed)
    if m.spec.scale != cfg.scale:
        raise ValueError(f"initial weights have scale {m.spec.scale}, config says {cfg.scale}")
    rng = np.random.default_rng(cfg.seed)
    params = m.named_params()
    state = AdamState()
    curve: list[LogRow] = []
    best = -math.inf
    running, count = 0.0, 0
    total = cfg.iters_phase1 + cfg.iters_phase2
    tsv = None
    if checkpoint is not None:
        tsv = open(os.fspath(checkpoint) + ".tsv", "w")
        tsv.write("iter\tloss\tlr\tval_psnr\n")
    try:
        for it in range(total):
            phase2 = it >= cfg.iters_phase1
            size = cfg.patch_size_finetune if phase2 else cfg.patch_size
            sched_it = it - cfg.iters_phase1 if phase2 and cfg.finetune_lr == "reset" else it
            lr = learning_rate(cfg, sched_it)
            picks = rng.integers(0, len(dataset), size=cfg.batch_size)
            patches = [sample_patch(dataset[k], size, rng, cfg.scale, cfg.augment) for k in picks]
            y = np.stack([p[0] for p in patches])
            x = np.stack([p[1] for p in patches])
            loss, grads = forward_backward(y, x, m)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss became {loss} at iteration {it}")
            adam_step(params, grads, state, lr)
            running += loss
            count += 1
            done = it + 1
            if done % cfg.log_every == 0 or done == total:
                val_psnr = math.nan
                if val and (done == total or (cfg.val_every and done % cfg.val_every == 0)):
                    val_psnr = evaluate(m, val)
                row = LogRow(done, running / count, lr, val_psnr)
                running, count = 0.0, 0
                curve.append(row)
                log.info("iter %d  loss %.4f  lr %.2e  val %.3f", *row)
                if on_log is not None:
                    on_log(row)
                if tsv is not None:
                    tsv.write("\t".join(str(v) for v in row) + "\n")
                    tsv.flush()
                    score = val_psnr if val else done
                    if not math.isnan(score) and score > best:
                        best = score
                        save_weights(m, checkpoint)
    finally:
        if tsv is not None:
            tsv.close()
    if checkpoint is not None and total == 0:
        save_weights(m, checkpoint)
    return m, curve
