"""
Maximum-likelihood classification, majority-vote fusion and evaluation.
"""

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

from flowhmm.exceptions import DataError, ShapeError
from flowhmm.hmm import HmmModel
from flowhmm.logger import get_logger
from flowhmm.numerics import FloatArray, RngStream

logger = get_logger("classify")


@dataclass
class ClassifierBank:
    """One trained model per class."""

    models: List[HmmModel]
    class_labels: List[str]

    def __post_init__(self) -> None:
        if not self.models:
            raise DataError("A classifier bank needs at least one model")
        if len(self.models) != len(self.class_labels):
            raise DataError(f"{len(self.models)} models for {len(self.class_labels)} labels")
        if len(set(self.class_labels)) != len(self.class_labels):
            raise DataError(f"Class labels are not unique: {self.class_labels}")
        dims = {model.dim for model in self.models}
        if len(dims) != 1:
            raise ShapeError(f"Class models disagree on the feature dimension: {sorted(dims)}")

    @classmethod
    def from_models(cls, models: Sequence[HmmModel]) -> "ClassifierBank":
        """Use each model's own label."""
        return cls(list(models), [model.label for model in models])

    @property
    def dim(self) -> int:
        return self.models[0].dim

    @property
    def kind(self) -> str:
        return self.models[0].kind


@dataclass
class Prediction:
    """Decision for one utterance."""

    utterance_id: str
    label: str
    scores: FloatArray = field(default_factory=lambda: np.zeros(0))
    tie: bool = False


def prediction_from_scores(
    scores: npt.ArrayLike, labels: Sequence[str], utterance_id: str = ""
) -> Prediction:
    """Argmax decision; exact ties go to the lowest class index and are flagged."""
    values = np.asarray(scores, dtype=np.float64)
    if values.shape != (len(labels),):
        raise ShapeError(f"{values.shape[0]} scores for {len(labels)} classes")
    best = int(np.argmax(values))
    tie = int(np.count_nonzero(values == values[best])) > 1
    return Prediction(utterance_id, labels[best], values, tie)


def classify(bank: ClassifierBank, seq: npt.ArrayLike, utterance_id: str = "") -> Prediction:
    """Score a sequence under every class model and pick the most likely class."""
    scores = np.array([model.log_likelihood(np.asarray(seq)) for model in bank.models])
    prediction = prediction_from_scores(scores, bank.class_labels, utterance_id)
    if prediction.tie:
        logger.debug(f"Tied scores for utterance {utterance_id!r}; chose {prediction.label}")
    return prediction


def classify_all(
    bank: ClassifierBank, utterances: Sequence[Tuple[str, FloatArray]], jobs: int = 1
) -> List[Prediction]:
    """Classify many utterances; output order follows the input."""
    if jobs <= 1:
        return [classify(bank, seq, utt) for utt, seq in utterances]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(classify, bank, seq, utt) for utt, seq in utterances]
        return [future.result() for future in futures]


def vote(labels: Sequence[str], rng: RngStream) -> str:
    """
    Fuse decisions of several model families.

    A label with at least two votes wins (ties between such labels, possible with four or
    more voters, are drawn at random); with no agreement a label is drawn uniformly from the
    distinct candidates.
    """
    if len(labels) < 2:
        raise DataError(f"Voting needs at least 2 decisions, got {len(labels)}")
    counts = Counter(labels)
    top = max(counts.values())
    if top >= 2:
        leaders = [label for label, count in counts.items() if count == top]
        if len(leaders) == 1:
            return leaders[0]
        return leaders[int(rng.integers(len(leaders)))]
    candidates = list(counts)
    return candidates[int(rng.integers(len(candidates)))]


def fuse(prediction_sets: Sequence[Sequence[Prediction]], rng: RngStream) -> List[Prediction]:
    """Vote utterance by utterance over aligned prediction lists."""
    if len(prediction_sets) < 2:
        raise DataError("Fusion needs predictions from at least 2 model families")
    lengths = {len(preds) for preds in prediction_sets}
    if len(lengths) != 1:
        raise DataError(f"Prediction lists have different lengths: {sorted(lengths)}")
    fused = []
    for row in zip(*prediction_sets):
        ids = {p.utterance_id for p in row}
        if len(ids) != 1:
            raise DataError(f"Prediction lists are not aligned: {sorted(ids)}")
        fused.append(Prediction(row[0].utterance_id, vote([p.label for p in row], rng)))
    return fused


def sample_ratio(class_counts: npt.ArrayLike) -> FloatArray:
    """Training count of each class relative to the largest class."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 0):
        raise DataError("Class counts must be a non-empty list of non-negative numbers")
    largest = counts.max()
    if largest == 0:
        raise DataError("Sample ratio is undefined when every class is empty")
    return counts / largest


@dataclass
class EvalReport:
    """Accuracy, class-wise and support-weighted metrics, and the confusion matrix."""

    labels: List[str]
    accuracy: float
    precision: FloatArray
    recall: FloatArray
    f1: FloatArray
    support: npt.NDArray[np.int64]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: npt.NDArray[np.int64]
    sample_ratios: Optional[FloatArray] = None
    categories: Dict[str, str] = field(default_factory=dict)

    @property
    def per_class_accuracy(self) -> FloatArray:
        """Fraction of each class's utterances classified correctly (class-wise recall)."""
        return self.recall

    def to_dict(self) -> Dict[str, Any]:
        classes = []
        for i, label in enumerate(self.labels):
            entry: Dict[str, Any] = {
                "label": label,
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
                "f1": float(self.f1[i]),
                "support": int(self.support[i]),
            }
            if self.sample_ratios is not None:
                entry["sample_ratio"] = float(self.sample_ratios[i])
            if label in self.categories:
                entry["category"] = self.categories[label]
            classes.append(entry)
        return {
            "accuracy": self.accuracy,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "classes": classes,
            "confusion": self.confusion.tolist(),
            "labels": list(self.labels),
        }

    def render(self, by_class: bool = False) -> str:
        """Plain-text report."""
        lines = [
            f"accuracy           {100 * self.accuracy:6.2f}%",
            f"weighted precision {100 * self.weighted_precision:6.2f}%",
            f"weighted recall    {100 * self.weighted_recall:6.2f}%",
            f"weighted F1        {100 * self.weighted_f1:6.2f}%",
        ]
        if by_class:
            width = max(5, max(len(label) for label in self.labels))
            header = f"{'class':<{width}}  {'acc%':>7}  {'prec%':>7}  {'F1%':>7}  {'support':>7}"
            if self.sample_ratios is not None:
                header += f"  {'ratio%':>7}"
            if self.categories:
                header += "  category"
            lines += ["", header]
            for i, label in enumerate(self.labels):
                row = (
                    f"{label:<{width}}  {100 * self.recall[i]:7.2f}  "
                    f"{100 * self.precision[i]:7.2f}  {100 * self.f1[i]:7.2f}  "
                    f"{int(self.support[i]):7d}"
                )
                if self.sample_ratios is not None:
                    row += f"  {100 * self.sample_ratios[i]:7.2f}"
                if self.categories:
                    row += f"  {self.categories.get(label, '-')}"
                lines.append(row)
        return "\n".join(lines) + "\n"


def evaluate(
    predicted: Sequence[str],
    truth: Sequence[str],
    labels: Optional[Sequence[str]] = None,
    train_counts: Optional[Mapping[str, int]] = None,
    categories: Optional[Mapping[str, str]] = None,
) -> EvalReport:
    """
    Compare predicted and true labels.

    Args:
        predicted: Predicted label per utterance
        truth: True label per utterance
        labels: Class order (default: sorted union of both label sets)
        train_counts: Training utterances per class, for the sample-ratio column
        categories: Optional label -> category grouping column

    Returns:
        EvalReport
    """
    if len(predicted) != len(truth):
        raise DataError(f"{len(predicted)} predictions for {len(truth)} reference labels")
    if not truth:
        raise DataError("Nothing to evaluate")
    order = list(labels) if labels is not None else sorted(set(truth) | set(predicted))
    precision, recall, f1, support = precision_recall_fscore_support(
        truth, predicted, labels=order, zero_division=0
    )
    weighted = precision_recall_fscore_support(
        truth, predicted, labels=order, average="weighted", zero_division=0
    )
    ratios = None
    if train_counts is not None:
        ratios = sample_ratio([train_counts.get(label, 0) for label in order])
    return EvalReport(
        labels=order,
        accuracy=float(accuracy_score(truth, predicted)),
        precision=np.asarray(precision, dtype=np.float64),
        recall=np.asarray(recall, dtype=np.float64),
        f1=np.asarray(f1, dtype=np.float64),
        support=np.asarray(support, dtype=np.int64),
        weighted_precision=float(weighted[0]),
        weighted_recall=float(weighted[1]),
        weighted_f1=float(weighted[2]),
        confusion=np.asarray(confusion_matrix(truth, predicted, labels=order), dtype=np.int64),
        sample_ratios=ratios,
        categories=dict(categories or {}),
    )
