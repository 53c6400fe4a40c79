"""Adversarial search over transform parameter boxes.

Two optimizers maximize the model loss at a sample: projected gradient
ascent (white-box, sign steps scaled per-parameter by box width) and a
(1+N) evolution strategy with Gaussian mutation (black-box, output-only).
Both start at the neutral point, keep best-so-far semantics, and are
deterministic given the config seed. Per-sample streams are derived from
(seed, sample id), so batch results do not depend on dataset order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import derive_seed, substream
from .transforms import TransformDescriptor, box_widths, project

LOSS_KINDS = ("cross_entropy", "margin")


@dataclass
class AttackConfig:
    steps: int = 40
    step_frac: float = 0.05
    loss: str = "cross_entropy"
    early_stop_on_flip: bool = False
    population: int = 16
    mutation_frac: float = 0.1
    restarts: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 < self.step_frac <= 1.0):
            raise ValueError("step_frac must be in (0, 1]")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")


@dataclass
class AttackResult:
    theta_best: dict[str, np.ndarray]
    loss_trace: list[float] = field(default_factory=list)
    pred_clean: int = 0
    pred_adv: int = 0
    fooled: bool = False
    queries: int = 0


def loss_value(logits: np.ndarray, label: int, kind: str) -> float:
    """Scalar attack objective from one logits row (higher = worse for the model)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if kind == "cross_entropy":
        m = z.max()
        return float(np.log(np.exp(z - m).sum()) + m - z[label])
    if kind == "margin":
        others = np.delete(z, label)
        return float(others.max() - z[label])
    raise ValueError(f"unknown loss kind {kind!r}")


def _traced_loss(logits: Tensor, label: int, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return ad.cross_entropy(logits, np.array([label]))
    # margin subgradient: +1 on the strongest other logit, -1 on the true one
    z = logits.data[0]
    other = int(np.argmax(np.delete(z, label)))
    if other >= label:
        other += 1
    coeff = np.zeros_like(z)
    coeff[other] = 1.0
    coeff[label] = -1.0
    return ad.tsum(ad.mul(logits, Tensor(coeff[None, :])))


def _to_batch(image: Tensor) -> Tensor:
    h, w, c = image.shape
    return ad.transpose(ad.reshape(image, (1, h, w, c)), (0, 3, 1, 2))


def hwc_to_nchw(images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def _predict_label(model, image_hwc: np.ndarray) -> tuple[int, np.ndarray]:
    logits = np.asarray(model.predict(hwc_to_nchw(image_hwc)))[0]
    return int(np.argmax(logits)), logits


def _random_theta(desc: TransformDescriptor, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        s.name: rng.uniform(s.lo, s.hi, size=s.shape).astype(np.float32) for s in desc.specs
    }


class _Best:
    """Best-so-far candidate shared across restarts."""

    def __init__(self):
        self.loss = -np.inf
        self.theta: dict[str, np.ndarray] | None = None
        self.pred = 0

    def offer(self, loss: float, theta: dict[str, np.ndarray], pred: int) -> bool:
        if loss > self.loss:
            self.loss = loss
            self.theta = {k: v.copy() for k, v in theta.items()}
            self.pred = pred
            return True
        return False


def pgd_attack(
    model,
    image: np.ndarray,
    label: int,
    transform: TransformDescriptor,
    cfg: AttackConfig,
    pred_clean: int | None = None,
) -> AttackResult:
    """Projected sign-gradient ascent on the transform parameters."""
    cfg.validate()
    if not transform.differentiable:
        raise ValueError(
            f"transform {transform.kind!r} is not differentiable; use stochastic_attack"
        )
    image = np.asarray(image, dtype=np.float32)
    queries = 0
    if pred_clean is None:
        pred_clean, _ = _predict_label(model, image)
        queries += 1
    widths = box_widths(transform)
    rng = substream(cfg.seed)
    best = _Best()
    trace: list[float] = []

    def evaluate(theta, need_grad: bool):
        nonlocal queries
        leaves = {s.name: Tensor(theta[s.name], requires_grad=True) for s in transform.specs}
        out = transform.apply(Tensor(image), leaves)
        logits = model.forward(_to_batch(out))
        queries += 1
        lv = loss_value(logits.data[0], label, cfg.loss)
        grads = None
        if need_grad:
            ad.backward(_traced_loss(logits, label, cfg.loss))
            grads = {
                name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                for name, leaf in leaves.items()
            }
        return lv, int(np.argmax(logits.data[0])), grads

    for restart in range(cfg.restarts):
        theta = (
            transform.neutral_params()
            if restart == 0
            else project(_random_theta(transform, rng), transform)
        )
        lv, pred, grads = evaluate(theta, need_grad=True)
        best.offer(lv, theta, pred)
        trace.append(best.loss)
        stopped = False
        for step_i in range(cfg.steps):
            if cfg.early_stop_on_flip and best.pred != pred_clean:
                stopped = True
                break
            stepped = {
                name: theta[name] + cfg.step_frac * widths[name] * np.sign(grads[name])
                for name in theta
            }
            theta = project(stepped, transform)
            last = step_i == cfg.steps - 1  # final iterate needs no gradient
            lv, pred, grads = evaluate(theta, need_grad=not last)
            best.offer(lv, theta, pred)
            trace.append(best.loss)
        if stopped or (cfg.early_stop_on_flip and best.pred != pred_clean):
            break

    return AttackResult(
        theta_best=best.theta,
        loss_trace=trace,
        pred_clean=pred_clean,
        pred_adv=best.pred,
        fooled=(pred_clean == label) and (best.pred != pred_clean),
        queries=queries,
    )


def stochastic_attack(
    model,
    image: np.ndarray,
    label: int,
    transform: TransformDescriptor,
    cfg: AttackConfig,
    pred_clean: int | None = None,
) -> AttackResult:
    """(1+N) evolution strategy over the parameter box, output-only access."""
    cfg.validate()
    image = np.asarray(image, dtype=np.float32)
    queries = 0
    if pred_clean is None:
        pred_clean, _ = _predict_label(model, image)
        queries += 1
    widths = box_widths(transform)
    rng = substream(cfg.seed)
    best = _Best()
    trace: list[float] = []

    def evaluate(theta):
        nonlocal queries
        out = transform.apply_np(image, theta)
        logits = np.asarray(model.predict(hwc_to_nchw(out)))[0]
        queries += 1
        return loss_value(logits, label, cfg.loss), int(np.argmax(logits))

    def flipped() -> bool:
        return cfg.early_stop_on_flip and best.pred != pred_clean

    for restart in range(cfg.restarts):
        parent = (
            transform.neutral_params()
            if restart == 0
            else project(_random_theta(transform, rng), transform)
        )
        lv, pred = evaluate(parent)
        best.offer(lv, parent, pred)
        parent_loss = lv
        trace.append(best.loss)
        if flipped():
            break
        for _ in range(cfg.steps):
            champion = None
            for _k in range(cfg.population):
                mutant = {
                    name: parent[name]
                    + cfg.mutation_frac
                    * widths[name]
                    * rng.standard_normal(size=parent[name].shape).astype(np.float32)
                    for name in parent
                }
                mutant = project(mutant, transform)
                lv, pred = evaluate(mutant)
                best.offer(lv, mutant, pred)
                if champion is None or lv > champion[0]:
                    champion = (lv, mutant)
                if flipped():
                    break
            if champion is not None and champion[0] > parent_loss:
                parent_loss, parent = champion[0], champion[1]
            trace.append(best.loss)
            if flipped():
                break
        if flipped():
            break

    return AttackResult(
        theta_best=best.theta,
        loss_trace=trace,
        pred_clean=pred_clean,
        pred_adv=best.pred,
        fooled=(pred_clean == label) and (best.pred != pred_clean),
        queries=queries,
    )


def batch_attack(
    model,
    samples: list[tuple[np.ndarray, int]],
    transform: TransformDescriptor,
    cfg: AttackConfig,
    optimizer: str = "pgd",
    ids: list[int] | None = None,
    jobs: int = 1,
) -> list[AttackResult]:
    """Attack every sample; clean-misclassified ones are recorded unattacked.

    Per-sample seeds derive from (cfg.seed, sample id), ids defaulting to
    positions, so outputs follow their inputs under permutation. With
    jobs > 1 samples run on a thread pool; results keep input order.
    """
    if not samples:
        raise ValueError("batch_attack requires a nonempty dataset")
    if optimizer not in ("pgd", "stochastic"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if ids is None:
        ids = list(range(len(samples)))
    if len(ids) != len(samples):
        raise ValueError("ids and samples length mismatch")
    attack_fn = pgd_attack if optimizer == "pgd" else stochastic_attack

    def run_one(pos: int) -> AttackResult:
        image, label = samples[pos]
        pred_clean, _ = _predict_label(model, image)
        if pred_clean != label:
            return AttackResult(
                theta_best=transform.neutral_params(),
                loss_trace=[],
                pred_clean=pred_clean,
                pred_adv=pred_clean,
                fooled=False,
                queries=1,
            )
        sub_cfg = AttackConfig(**{**cfg.__dict__, "seed": derive_seed(cfg.seed, "attack", ids[pos])})
        result = attack_fn(model, image, label, transform, sub_cfg, pred_clean=pred_clean)
        result.queries += 1  # the clean pass above
        return result

    if jobs <= 1:
        return [run_one(i) for i in range(len(samples))]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, range(len(samples))))
