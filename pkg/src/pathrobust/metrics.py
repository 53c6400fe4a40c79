"""Robustness metrics and report files assembled from attack results.

Fooling rate is defined over clean-correct samples only: among samples
the model classifies correctly without perturbation, the fraction whose
prediction changes under the optimized transform. Clean-misclassified
samples are never attacked and keep their clean prediction, which makes
perturbed_accuracy = clean_accuracy - fooling_rate * n_correct_clean / n
an identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackResult


@dataclass
class SampleRecord:
    index: int
    label: int
    pred_clean: int
    pred_adv: int
    fooled: bool
    best_loss: float


@dataclass
class RunReport:
    transform: str
    optimizer: str
    config: dict
    clean_accuracy: float
    perturbed_accuracy: float
    fooling_rate: float | None
    n_samples: int
    n_correct_clean: int
    mean_queries: float
    per_sample: list[SampleRecord]


def _check_lengths(results: list[AttackResult], labels) -> np.ndarray:
    if not results:
        raise ValueError("no attack results to aggregate")
    labels = np.asarray(labels)
    if len(labels) != len(results):
        raise ValueError(f"{len(results)} results vs {len(labels)} labels")
    return labels


def fooling_rate(results: list[AttackResult], labels) -> float | None:
    """Fraction of clean-correct samples whose prediction flipped; None if
    no sample was clean-correct."""
    labels = _check_lengths(results, labels)
    correct = [r for r, y in zip(results, labels) if r.pred_clean == y]
    if not correct:
        return None
    flipped = sum(1 for r in correct if r.pred_adv != r.pred_clean)
    return flipped / len(correct)


def accuracy_delta(results: list[AttackResult], labels) -> tuple[float, float]:
    """(clean accuracy, perturbed accuracy); unattacked samples keep their
    clean prediction under perturbation."""
    labels = _check_lengths(results, labels)
    n = len(results)
    clean = sum(1 for r, y in zip(results, labels) if r.pred_clean == y)
    pert = sum(1 for r, y in zip(results, labels) if r.pred_adv == y)
    return clean / n, pert / n


def build_report(
    transform_name: str,
    optimizer: str,
    config: dict,
    results: list[AttackResult],
    labels,
    ids=None,
) -> RunReport:
    labels = _check_lengths(results, labels)
    if ids is None:
        ids = list(range(len(results)))
    clean_acc, pert_acc = accuracy_delta(results, labels)
    rate = fooling_rate(results, labels)
    per_sample = [
        SampleRecord(
            index=int(i),
            label=int(y),
            pred_clean=r.pred_clean,
            pred_adv=r.pred_adv,
            fooled=r.fooled,
            best_loss=float(max(r.loss_trace)) if r.loss_trace else 0.0,
        )
        for i, r, y in zip(ids, results, labels)
    ]
    return RunReport(
        transform=transform_name,
        optimizer=optimizer,
        config=config,
        clean_accuracy=clean_acc,
        perturbed_accuracy=pert_acc,
        fooling_rate=rate,
        n_samples=len(results),
        n_correct_clean=sum(1 for r, y in zip(results, labels) if r.pred_clean == y),
        mean_queries=float(np.mean([r.queries for r in results])),
        per_sample=per_sample,
    )


def canonical_json(obj) -> str:
    """Key-sorted, compact, UTF-8 JSON with a trailing newline; reserializing
    a parse of it reproduces the bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


def report_to_dict(runs: list[RunReport], seed: int, model_digest: str) -> dict:
    return {
        "runs": [asdict(r) for r in runs],
        "seed": int(seed),
        "model_digest": model_digest,
    }


def emit_report(
    runs: list[RunReport],
    out_dir,
    seed: int,
    model_digest: str,
    pairs: list[tuple[str, int, np.ndarray, np.ndarray]] | None = None,
) -> Path:
    """Write report.json (canonical form) and optional clean/adv PNG pairs.

    ``pairs`` entries are (subdir, index, clean image, adversarial image)
    in [0,1] HWC; one subdirectory per run keeps indices from colliding.
    """
    from .data import write_png

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        path.write_text(canonical_json(report_to_dict(runs, seed, model_digest)), encoding="utf-8")
        if pairs:
            for subdir, index, clean_img, adv_img in pairs:
                pair_dir = out_dir / "pairs" / subdir
                pair_dir.mkdir(parents=True, exist_ok=True)
                write_png(clean_img, pair_dir / f"{index}_clean.png")
                write_png(adv_img, pair_dir / f"{index}_adv.png")
    except OSError as e:
        raise OSError(f"failed writing report under {out_dir}: {e}") from e
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def summary_table(reports: list[dict]) -> str:
    """Merge parsed report.json payloads into a plain-text summary table."""
    header = f"{'transform':<24} {'optimizer':<11} {'clean':>7} {'pert':>7} {'fool':>7} {'n':>5}"
    lines = [header, "-" * len(header)]
    for rep in reports:
        for run in rep.get("runs", []):
            rate = run["fooling_rate"]
            lines.append(
                f"{run['transform']:<24} {run['optimizer']:<11} "
                f"{run['clean_accuracy']:>7.3f} {run['perturbed_accuracy']:>7.3f} "
                f"{(f'{rate:.3f}' if rate is not None else 'n/a'):>7} {run['n_samples']:>5}"
            )
    return "\n".join(lines)
