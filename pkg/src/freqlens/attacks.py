"""White-box gradient attacks: FGSM and PGD under l-inf, C&W under l2.

All attacks take and return images in [0, 1] and work on batches
(B, C, H, W); a single (C, H, W) image is accepted too. ``model`` is either
a :class:`~freqlens.models.ModelParams` or any callable mapping an image
Tensor to a logits Tensor.

sign(0) is 0, so a pixel with zero loss gradient is left where it is.
Random starts draw from one RNG stream per sample, keyed on the attack seed
and the sample's global index, so results do not depend on batching.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .models import ModelParams, forward_logits, loss_ce
from .tensor import GradTape, Tensor

KINDS = ("fgsm", "pgd", "cw")
ATTACK_BATCH = 128


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    norm: float | None = None  # inf for fgsm/pgd, 2 for cw; derived when None
    step_size: float = 1 / 255
    iterations: int = 20
    random_start: bool = True
    cw_c: float = 100.0
    cw_kappa: float = 0.0
    cw_steps: int = 200
    cw_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        norm = self.norm
        if isinstance(norm, str):
            norm = math.inf if norm.lower() in ("inf", "linf") else float(norm)
        if norm is None:
            norm = 2.0 if self.kind == "cw" else math.inf
        object.__setattr__(self, "norm", float(norm))
        if self.kind == "cw" and self.norm != 2.0:
            raise ValueError("cw attacks are l2 (norm=2)")
        if self.kind != "cw" and self.norm != math.inf:
            raise ValueError(f"{self.kind} attacks are l-inf (norm=inf)")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0 or self.cw_steps < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.kind == "pgd" and self.step_size <= 0:
            raise ValueError("pgd step_size must be > 0")
        if self.kind == "cw" and self.cw_lr <= 0:
            raise ValueError("cw_lr must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm"] = "inf" if math.isinf(self.norm) else self.norm
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


def fgsm_config(epsilon=8 / 255, seed=0) -> AttackConfig:
    return AttackConfig(kind="fgsm", epsilon=epsilon, iterations=1, random_start=False, seed=seed)


def pgd20_config(seed=0, random_start=True) -> AttackConfig:
    return AttackConfig(kind="pgd", epsilon=8 / 255, step_size=1 / 255, iterations=20,
                        random_start=random_start, seed=seed)


def pgd10_train_config(seed=0) -> AttackConfig:
    return AttackConfig(kind="pgd", epsilon=8 / 255, step_size=2 / 255, iterations=10,
                        random_start=True, seed=seed)


def cw_config(seed=0) -> AttackConfig:
    return AttackConfig(kind="cw", epsilon=0.0, cw_c=100.0, cw_kappa=0.0, seed=seed)


@dataclass
class AdvResult:
    adversarial: np.ndarray
    perturbation: np.ndarray
    success: np.ndarray  # bool per sample: misclassified
    achieved_norm: np.ndarray  # per sample, in the attack's norm


Model = ModelParams | Callable[[Tensor], Tensor]


def _logits(model: Model, x: Tensor) -> Tensor:
    if isinstance(model, ModelParams):
        return forward_logits(model, x)
    return model(x)


def _batched(image, label):
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(label, dtype=np.int64)
    single = x.ndim == 3
    if single:
        x, y = x[None], y.reshape(1)
    if y.shape != (len(x),):
        raise ValueError(f"labels {y.shape} do not match batch of {len(x)}")
    return x, y, single


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the mean cross-entropy w.r.t. the images, plus the logits."""
    xt = Tensor(x, name="x")
    with GradTape() as tape:
        logits = _logits(model, xt)
        loss = loss_ce(logits, y)
    (g,) = tape.gradient(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("non-finite input gradient")
    return g, logits.data


def _predict(model: Model, x: np.ndarray) -> np.ndarray:
    return _logits(model, Tensor(x)).data.argmax(axis=1)


def _result(model, x0, adv, y, norm) -> AdvResult:
    delta = adv - x0
    flat = delta.reshape(len(delta), -1)
    achieved = np.abs(flat).max(axis=1) if math.isinf(norm) else np.sqrt((flat * flat).sum(axis=1))
    success = _predict(model, adv) != y
    return AdvResult(adv, delta, success, achieved)


def _unbatch(res: AdvResult, single: bool) -> AdvResult:
    if not single:
        return res
    return AdvResult(res.adversarial[0], res.perturbation[0], res.success[0], res.achieved_norm[0])


def _concat(parts: list[AdvResult]) -> AdvResult:
    return AdvResult(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                       ("adversarial", "perturbation", "success", "achieved_norm")))


def _project(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Clip into the eps-box around x0 and [0, 1], exact in floating point."""
    x = np.clip(x, np.clip(x0 - eps, 0.0, 1.0), np.clip(x0 + eps, 0.0, 1.0))
    # x0 +- eps can round one ulp outside the box; step those pixels back
    while True:
        over = (x - x0) > eps
        under = (x0 - x) > eps
        if not (over.any() or under.any()):
            return x
        x[over] = np.nextafter(x[over], -np.inf)
        x[under] = np.nextafter(x[under], np.inf)


def fgsm(model: Model, image, label, epsilon: float) -> AdvResult:
    """adv = clip(x + eps * sign(grad_x loss), 0, 1)."""
    x, y, single = _batched(image, label)
    parts = []
    for i in range(0, len(x), ATTACK_BATCH):
        xb, yb = x[i : i + ATTACK_BATCH], y[i : i + ATTACK_BATCH]
        if epsilon == 0:
            adv = xb.copy()
        else:
            g, _ = input_gradient(model, xb, yb)
            adv = _project(xb + epsilon * np.sign(g), xb, epsilon)
        parts.append(_result(model, xb, adv, yb, math.inf))
    return _unbatch(_concat(parts), single)


def _random_start(x0: np.ndarray, eps: float, key: tuple, offset: int) -> np.ndarray:
    noise = np.empty_like(x0)
    for i in range(len(x0)):
        rng = np.random.default_rng([*key, offset + i])
        noise[i] = rng.uniform(-eps, eps, size=x0.shape[1:])
    return noise


def pgd_steps(model: Model, x0: np.ndarray, y: np.ndarray, cfg: AttackConfig,
              key: tuple, offset: int = 0) -> np.ndarray:
    """Raw PGD loop on one batch; returns the adversarial images only."""
    eps, alpha = cfg.epsilon, cfg.step_size
    x = x0.copy()
    if cfg.random_start and eps > 0:
        x = _project(x0 + _random_start(x0, eps, key, offset), x0, eps)
    for _ in range(cfg.iterations):
        g, _ = input_gradient(model, x, y)
        x = _project(x + alpha * np.sign(g), x0, eps)
    return x


def pgd(model: Model, image, label, cfg: AttackConfig, index_offset: int = 0) -> AdvResult:
    """Projected sign-gradient ascent inside the l-inf ball intersected with [0, 1].

    ``index_offset`` is the global index of the first sample, used to pick its
    random-start stream.
    """
    if cfg.kind != "pgd":
        raise ValueError(f"pgd called with kind={cfg.kind!r}")
    x, y, single = _batched(image, label)
    parts = []
    for i in range(0, len(x), ATTACK_BATCH):
        xb, yb = x[i : i + ATTACK_BATCH], y[i : i + ATTACK_BATCH]
        adv = pgd_steps(model, xb, yb, cfg, (cfg.seed,), index_offset + i)
        parts.append(_result(model, xb, adv, yb, math.inf))
    return _unbatch(_concat(parts), single)


_TANH_SHRINK = 1.0 - 1e-6


def _cw_batch(model: Model, x0: np.ndarray, y: np.ndarray, cfg: AttackConfig):
    # optimize in tanh space: x = (tanh(w) + 1) / 2, Adam on w
    w = np.arctanh((2.0 * x0 - 1.0) * _TANH_SHRINK)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    best = x0.copy()
    best_norm = np.full(len(x0), np.inf)
    found = np.zeros(len(x0), dtype=bool)
    last = x0.copy()
    for step in range(cfg.cw_steps + 1):
        wt = Tensor(w)
        with GradTape() as tape:
            xa = T.scale(T.tanh(wt), 0.5) + 0.5
            d = xa - Tensor(x0)
            logits = _logits(model, xa)
            hinge = T.relu(T.margin(logits, y) + cfg.cw_kappa)
            loss = T.total(d * d) + T.scale(T.total(hinge), cfg.cw_c)
        if not np.isfinite(loss.data):
            raise NonFiniteGradientError("non-finite C&W objective")
        last = xa.data.copy()
        norms = np.sqrt(((last - x0) ** 2).reshape(len(x0), -1).sum(axis=1))
        hit = (logits.data.argmax(axis=1) != y) & (norms < best_norm)
        best[hit] = last[hit]
        best_norm[hit] = norms[hit]
        found |= hit
        if step == cfg.cw_steps:
            break
        (g,) = tape.gradient(loss, [wt])
        t = step + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - cfg.cw_lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + adam_eps)
    out = np.where(found[:, None, None, None], best, last)
    return np.clip(out, 0.0, 1.0)


def cw_l2(model: Model, image, label, cfg: AttackConfig) -> AdvResult:
    """Untargeted C&W l2 with fixed trade-off constant (no binary search).

    Minimizes ||delta||^2 + c * max(z_y - max_{j != y} z_j, -kappa) and returns
    the lowest-norm misclassified iterate, or the last iterate if none was.
    """
    if cfg.kind != "cw":
        raise ValueError(f"cw_l2 called with kind={cfg.kind!r}")
    x, y, single = _batched(image, label)
    parts = []
    for i in range(0, len(x), ATTACK_BATCH):
        xb, yb = x[i : i + ATTACK_BATCH], y[i : i + ATTACK_BATCH]
        adv = _cw_batch(model, xb, yb, cfg)
        parts.append(_result(model, xb, adv, yb, 2.0))
    return _unbatch(_concat(parts), single)


def run_attack(model: Model, images, labels, cfg: AttackConfig, index_offset: int = 0) -> AdvResult:
    if cfg.kind == "fgsm":
        return fgsm(model, images, labels, cfg.epsilon)
    if cfg.kind == "pgd":
        return pgd(model, images, labels, cfg, index_offset)
    return cw_l2(model, images, labels, cfg)
