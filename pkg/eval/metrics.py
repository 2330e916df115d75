import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import stats
from sklearn.metrics import confusion_matrix

from services.data.cycles import CardiacCycle, group_by_recording
from services.errors import DataError
from services.model.branched_cnn import BranchedCnn, Posterior, fuse_recording
from services.observability.langfuse_client import observe

logger = logging.getLogger(__name__)


def _ratio(num: float, den: float) -> float:
    return float(num) / den if den else 0.0


def sensitivity(tp: int, fn: int) -> float:
    return _ratio(tp, tp + fn)


def specificity(tn: int, fp: int) -> float:
    return _ratio(tn, tn + fp)


def macc(sens: float, spec: float) -> float:
    # Modified accuracy: mean of sensitivity and specificity
    return (sens + spec) / 2


def precision(tp: int, fp: int) -> float:
    return _ratio(tp, tp + fp)


def f1_score(tp: int, fp: int, fn: int) -> float:
    return _ratio(2 * tp, 2 * tp + fp + fn)


class EvalReport(BaseModel):
    sensitivity: float
    specificity: float
    macc: float
    precision: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_domain_accuracy: Dict[int, float] = Field(default_factory=dict)
    avg_domain_accuracy: float = 0.0
    excluded_domains: List[int] = Field(default_factory=list)
    n_recordings: int = 0

    @property
    def min_domain_accuracy(self) -> float:
        return min(self.per_domain_accuracy.values()) if self.per_domain_accuracy else 0.0


def report_from_counts(tp: int, fp: int, tn: int, fn: int, per_domain_accuracy: Optional[Dict[int, float]] = None,
                       excluded_domains: Sequence[int] = ()) -> EvalReport:
    sens, spec = sensitivity(tp, fn), specificity(tn, fp)
    per_domain = dict(per_domain_accuracy or {})
    return EvalReport(
        sensitivity=sens,
        specificity=spec,
        macc=macc(sens, spec),
        precision=precision(tp, fp),
        f1=f1_score(tp, fp, fn),
        tp=tp, fp=fp, tn=tn, fn=fn,
        per_domain_accuracy=per_domain,
        avg_domain_accuracy=float(np.mean(list(per_domain.values()))) if per_domain else 0.0,
        excluded_domains=list(excluded_domains),
        n_recordings=tp + fp + tn + fn,
    )


def report_from_predictions(labels: Sequence[int], predictions: Sequence[int],
                            domains: Optional[Sequence[int]] = None,
                            expected_domains: Optional[Iterable[int]] = None) -> EvalReport:
    """Labels and predictions are 0 (Normal) / 1 (Abnormal), one per recording."""
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    if labels.shape != predictions.shape:
        raise DataError(f"{labels.size} labels for {predictions.size} predictions")
    tn, fp, fn, tp = (int(v) for v in confusion_matrix(labels, predictions, labels=[0, 1]).ravel())

    per_domain: Dict[int, float] = {}
    excluded: List[int] = []
    if domains is not None:
        domains = np.asarray(domains, dtype=int)
        wanted = sorted(set(expected_domains) if expected_domains is not None else set(domains.tolist()))
        for d in wanted:
            mask = domains == d
            if not mask.any():
                logger.warning("Domain %d has no recordings; excluded from the domain average", d)
                excluded.append(d)
                continue
            per_domain[d] = float(np.mean(labels[mask] == predictions[mask]))
    return report_from_counts(tp, fp, tn, fn, per_domain, excluded)


def predict_recordings(model: BranchedCnn, cycles: Sequence[CardiacCycle]) -> pd.DataFrame:
    """One row per recording: fused posterior and hard label."""
    if not cycles:
        raise DataError("no cycles to evaluate")
    probs = model.predict_proba(cycles)
    by_id = {id(c): p for c, p in zip(cycles, probs)}
    rows = []
    for rec_id, group in group_by_recording(cycles).items():
        fused, label = fuse_recording(
            [Posterior.from_probs(by_id[id(c)]) for c in group], model.config.fusion_threshold
        )
        rows.append({
            "recording_id": rec_id,
            "domain": group[0].domain_id,
            "label": group[0].label.index,
            "p_abnormal": fused.p_abnormal,
            "prediction": label.index,
            "n_cycles": len(group),
        })
    return pd.DataFrame(rows)


@observe(name="evaluate")
def evaluate(model: BranchedCnn, cycles: Sequence[CardiacCycle],
             expected_domains: Optional[Iterable[int]] = None) -> EvalReport:
    table = predict_recordings(model, cycles)
    return report_from_predictions(table["label"], table["prediction"], table["domain"], expected_domains)


def mcnemar_test(labels: Sequence[int], pred_a: Sequence[int], pred_b: Sequence[int]) -> Tuple[float, float]:
    """Paired significance of two classifiers on the same recordings.

    Exact binomial test when fewer than 25 discordant pairs, otherwise chi-square
    with continuity correction. Returns (statistic, p_value).
    """
    labels, pred_a, pred_b = (np.asarray(v, dtype=int) for v in (labels, pred_a, pred_b))
    if not labels.shape == pred_a.shape == pred_b.shape:
        raise DataError("McNemar's test needs paired predictions of equal length")
    correct_a, correct_b = pred_a == labels, pred_b == labels
    b = int(np.sum(correct_a & ~correct_b))
    c = int(np.sum(~correct_a & correct_b))
    n = b + c
    if n == 0:
        return 0.0, 1.0
    if n < 25:
        return float(min(b, c)), float(stats.binomtest(min(b, c), n, 0.5).pvalue)
    statistic = (abs(b - c) - 1) ** 2 / n
    return float(statistic), float(stats.chi2.sf(statistic, 1))


def render_markdown(report: EvalReport, title: str = "Evaluation Report") -> str:
    lines = [f"# {title}", "", "## Summary"]
    for key in ("sensitivity", "specificity", "macc", "precision", "f1", "avg_domain_accuracy"):
        lines.append(f"- **{key}**: {getattr(report, key):.4f}")
    lines += [
        "",
        "## Confusion counts",
        f"- tp={report.tp} fp={report.fp} tn={report.tn} fn={report.fn} ({report.n_recordings} recordings)",
        "",
        "## Per-domain accuracy",
        "| domain | accuracy |",
        "|---|---|",
    ]
    lines += [f"| {d} | {acc:.4f} |" for d, acc in sorted(report.per_domain_accuracy.items())]
    if report.excluded_domains:
        lines += ["", f"Excluded (no recordings): {', '.join(map(str, report.excluded_domains))}"]
    return "\n".join(lines) + "\n"
