"""
Evaluation Protocol

WHAT:
    - randomized per-class train/test splits (20 per family, 300 benign)
    - accuracy, ransomware detection rate (RDR), benign detection rate (BDR)
    - repeated trials with derived seeds, mean confusion matrix
    - leave-one-family-out zero-day detection
    - feature-set sweep

Class order follows the dataset's class table with benign last, so RDR/BDR
work for both the 10-class and the collapsed 2-class matrices.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from peguard.core.errors import (
    ExclusionViolation,
    InsufficientSamples,
    PeguardError,
    TrialError,
    UnknownFamily,
    ZeroDenominator,
)
from peguard.ml.config import ClassifierConfig
from peguard.ml.model import predict_batch, train
from peguard.ml.rng import derive_seed, make_rng
from peguard.services.features import FeatureSetId, LabeledDataset
from peguard.services.labels import BENIGN, BINARY_CLASS_NAMES, ClassLabel

logger = logging.getLogger(__name__)

TEST_PER_FAMILY = 20
BENIGN_TEST = 300
ZERO_DAY_BENIGN_TEST_FRACTION = 0.15


# =========================
# SPLITS
# =========================
@dataclass(frozen=True)
class SplitPlan:
    test_counts: Dict[str, int]
    train_counts: Dict[str, int]
    seed: int

    @classmethod
    def for_dataset(
        cls,
        data: LabeledDataset,
        seed: int,
        test_per_family: int = TEST_PER_FAMILY,
        benign_test: int = BENIGN_TEST,
    ) -> "SplitPlan":
        """Fixed test counts per class; every remaining row trains."""
        test, train_counts = {}, {}
        for name, available in data.class_counts.items():
            test[name] = benign_test if name == BENIGN else test_per_family
            train_counts[name] = max(available - test[name], 0)
        return cls(test, train_counts, seed)

    def required(self, name: str) -> int:
        return self.test_counts.get(name, 0) + self.train_counts.get(name, 0)


def split_trial(data: LabeledDataset, plan: SplitPlan) -> Tuple[LabeledDataset, LabeledDataset]:
    """Per-class sampling without replacement, rows visited in hash order."""
    data = data.sorted_by_hash()
    labels = data.label_indices()
    rng = make_rng(plan.seed)
    train_idx, test_idx = [], []

    for index, name in enumerate(data.class_names):
        rows = np.flatnonzero(labels == index)
        need_test = plan.test_counts.get(name, 0)
        need_train = plan.train_counts.get(name, 0)
        if len(rows) < need_test + need_train:
            raise InsufficientSamples(name, len(rows), need_test + need_train)
        shuffled = rng.permutation(rows)
        test_idx.extend(shuffled[:need_test].tolist())
        train_idx.extend(shuffled[need_test:need_test + need_train].tolist())

    return data.subset(sorted(train_idx)), data.subset(sorted(test_idx))


# =========================
# METRICS
# =========================
@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted; the last class is benign."""

    class_names: Tuple[str, ...]
    counts: np.ndarray

    @classmethod
    def from_pairs(cls, true: Sequence[int], predicted: Sequence[int], class_names: Sequence[str]) -> "ConfusionMatrix":
        k = len(class_names)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(true, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cls(tuple(class_names), counts)

    @classmethod
    def mean(cls, matrices: Sequence["ConfusionMatrix"]) -> "ConfusionMatrix":
        stacked = np.stack([m.counts.astype(np.float64) for m in matrices])
        return cls(matrices[0].class_names, stacked.mean(axis=0))

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def accuracy(self) -> float:
        if self.total == 0:
            raise ZeroDenominator("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def collapse_binary(self) -> "ConfusionMatrix":
        """Merge every non-benign class into one malicious class."""
        b = len(self.class_names) - 1
        c = self.counts
        counts = np.array([
            [c[:b, :b].sum(), c[:b, b].sum()],
            [c[b, :b].sum(), c[b, b]],
        ])
        return ConfusionMatrix(BINARY_CLASS_NAMES, counts)

    def to_csv(self) -> str:
        frame = pd.DataFrame(self.counts, index=list(self.class_names), columns=list(self.class_names))
        frame.index.name = "true\\predicted"
        return frame.to_csv(lineterminator="\n")


def compute_rdr(cm: ConfusionMatrix) -> float:
    """Share of ransomware test rows predicted as any ransomware class."""
    b = len(cm.class_names) - 1
    detected = cm.counts[:b, :b].sum()
    missed = cm.counts[:b, b].sum()
    if detected + missed == 0:
        raise ZeroDenominator("no ransomware rows in the test set")
    return float(detected / (detected + missed))


def compute_bdr(cm: ConfusionMatrix) -> float:
    b = len(cm.class_names) - 1
    kept = cm.counts[b, b]
    flagged = cm.counts[b, :b].sum()
    if kept + flagged == 0:
        raise ZeroDenominator("no benign rows in the test set")
    return float(kept / (kept + flagged))


# =========================
# TRIALS
# =========================
@dataclass(frozen=True, eq=False)
class TrialResult:
    trial: int
    seed: int
    accuracy: float
    rdr: float
    bdr: float
    confusion: ConfusionMatrix
    train_seconds: float = 0.0
    predict_seconds: float = 0.0


@dataclass(frozen=True, eq=False)
class EvalReport:
    family: str
    set_id: FeatureSetId
    base_seed: int
    trials: Tuple[TrialResult, ...]

    def _values(self, metric: str) -> np.ndarray:
        return np.array([getattr(t, metric) for t in self.trials], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self._values(metric).mean())

    def std(self, metric: str) -> float:
        return float(self._values(metric).std())

    @property
    def mean_confusion(self) -> ConfusionMatrix:
        return ConfusionMatrix.mean([t.confusion for t in self.trials])

    def summary(self) -> Dict[str, float]:
        out = {}
        for metric in ("accuracy", "rdr", "bdr"):
            out[f"{metric}_mean"] = self.mean(metric)
            out[f"{metric}_std"] = self.std(metric)
        return out

    def timing(self) -> Dict[str, float]:
        return {
            "train_seconds_mean": self.mean("train_seconds"),
            "predict_seconds_mean": self.mean("predict_seconds"),
        }

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "set_id": self.set_id.value,
            "base_seed": self.base_seed,
            "n_trials": len(self.trials),
            **self.summary(),
            "timing": self.timing(),
            "class_names": list(self.mean_confusion.class_names),
            "mean_confusion": self.mean_confusion.counts.tolist(),
            "trials": [
                {
                    "trial": t.trial,
                    "seed": t.seed,
                    "accuracy": t.accuracy,
                    "rdr": t.rdr,
                    "bdr": t.bdr,
                    "confusion": t.confusion.counts.tolist(),
                }
                for t in self.trials
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def trials_csv(self) -> str:
        """One row per trial; timings are left out so the file is reproducible."""
        frame = pd.DataFrame(
            [(t.trial, t.accuracy, t.rdr, t.bdr) for t in self.trials],
            columns=["trial", "accuracy", "rdr", "bdr"],
        )
        return frame.to_csv(index=False, lineterminator="\n")


def _evaluate(model, test: LabeledDataset) -> Tuple[ConfusionMatrix, float]:
    start = time.perf_counter()
    predicted, _ = predict_batch(model, test.matrix())
    elapsed = time.perf_counter() - start
    return ConfusionMatrix.from_pairs(test.label_indices(), predicted, test.class_names), elapsed


def run_trial(data: LabeledDataset, config: ClassifierConfig, trial: int, base_seed: int) -> TrialResult:
    seed = derive_seed(base_seed, trial)
    try:
        train_set, test_set = split_trial(data, SplitPlan.for_dataset(data, seed))
        start = time.perf_counter()
        model = train(config.with_seed(seed), train_set)
        train_seconds = time.perf_counter() - start
        cm, predict_seconds = _evaluate(model, test_set)
        result = TrialResult(
            trial, seed, cm.accuracy(), compute_rdr(cm), compute_bdr(cm), cm, train_seconds, predict_seconds
        )
    except PeguardError as e:
        raise TrialError(trial, e) from e
    logger.info(
        f"Trial {trial}: accuracy={result.accuracy:.4f} rdr={result.rdr:.4f} bdr={result.bdr:.4f}"
    )
    return result


def run_trials(
    data: LabeledDataset,
    config: ClassifierConfig,
    n_trials: int,
    base_seed: int,
    jobs: int = 1,
) -> EvalReport:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        trials = tuple(pool.map(lambda i: run_trial(data, config, i, base_seed), range(n_trials)))
    report = EvalReport(config.family, data.set_id, base_seed, trials)
    logger.info(
        f"{config.family} on {data.set_id.name}, {n_trials} trials: "
        f"accuracy {report.mean('accuracy'):.4f} ± {report.std('accuracy'):.4f}"
    )
    return report


def sweep_feature_sets(
    data: LabeledDataset,
    config: ClassifierConfig,
    n_trials: int,
    base_seed: int,
    set_ids: Optional[Sequence[FeatureSetId]] = None,
    jobs: int = 1,
) -> Dict[FeatureSetId, EvalReport]:
    """Same splits and seeds for every feature set; only the columns change."""
    if set_ids is None:
        set_ids = [s for s in FeatureSetId if s.size <= data.set_id.size]
    return {
        s: run_trials(data.project(s), config, n_trials, base_seed, jobs)
        for s in map(FeatureSetId.parse, set_ids)
    }


# =========================
# ZERO-DAY
# =========================
@dataclass(frozen=True)
class ZeroDayResult:
    held_out: str
    detection_rate: float
    trial_rates: Tuple[float, ...]
    benign_detection_rate: float
    n_held_out: int
    classifier: str = ""


def resolve_family(name: str, class_names: Sequence[str]) -> str:
    """Case-insensitive family lookup; a '-like' suffix is accepted."""
    wanted = name.strip().lower()
    if wanted.endswith("-like"):
        wanted = wanted[: -len("-like")]
    for candidate in class_names:
        if candidate != BENIGN and candidate.lower() == wanted:
            return candidate
    raise UnknownFamily(f"{name!r} is not one of {[c for c in class_names if c != BENIGN]}")


def _binary_name(label: ClassLabel) -> str:
    return BENIGN if label.is_benign else BINARY_CLASS_NAMES[0]


@dataclass
class _ZeroDayTrial:
    rate: float
    benign_rate: float


def zero_day_eval(
    data: LabeledDataset,
    held_out: str,
    config: ClassifierConfig,
    n_trials: int,
    base_seed: int,
    benign_test_fraction: float = ZERO_DAY_BENIGN_TEST_FRACTION,
) -> ZeroDayResult:
    """Binary model on the other families vs benign; held-out family never trains."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    family = resolve_family(held_out, data.class_names)
    data = data.sorted_by_hash()
    held = data.subset(i for i, r in enumerate(data.rows) if r.label.name == family)
    if len(held) == 0:
        raise UnknownFamily(f"no samples of {family} in the dataset")
    held_hashes = set(held.hashes())

    binary = data.relabel(lambda label: None if label.name == family else _binary_name(label), BINARY_CLASS_NAMES)
    benign_index = BINARY_CLASS_NAMES.index(BENIGN)
    labels = binary.label_indices()
    malicious_rows = np.flatnonzero(labels != benign_index)
    benign_rows = np.flatnonzero(labels == benign_index)
    n_benign_test = int(round(benign_test_fraction * len(benign_rows)))

    trials: List[_ZeroDayTrial] = []
    for trial in range(n_trials):
        seed = derive_seed(base_seed, trial)
        shuffled = make_rng(seed).permutation(benign_rows)
        benign_test = binary.subset(sorted(shuffled[:n_benign_test].tolist()))
        train_set = binary.subset(sorted([*malicious_rows.tolist(), *shuffled[n_benign_test:].tolist()]))

        leaked = held_hashes.intersection(train_set.hashes())
        if leaked:
            raise ExclusionViolation(f"{len(leaked)} {family} samples reached the training set")
        logger.info(f"Zero-day {family} trial {trial}: exclusion verified, {len(train_set)} training rows")

        try:
            model = train(config.with_seed(seed), train_set)
        except PeguardError as e:
            raise TrialError(trial, e) from e
        predicted, _ = predict_batch(model, held.matrix())
        rate = float(np.mean(predicted != benign_index))
        benign_rate = float("nan")
        if len(benign_test):
            benign_pred, _ = predict_batch(model, benign_test.matrix())
            benign_rate = float(np.mean(benign_pred == benign_index))
        trials.append(_ZeroDayTrial(rate, benign_rate))

    result = ZeroDayResult(
        held_out=family,
        detection_rate=float(np.mean([t.rate for t in trials])),
        trial_rates=tuple(t.rate for t in trials),
        benign_detection_rate=float(np.mean([t.benign_rate for t in trials])),
        n_held_out=len(held),
        classifier=config.family,
    )
    logger.info(f"Zero-day {family} ({config.family}): detection rate {result.detection_rate:.4f}")
    return result


def zero_day_table(
    data: LabeledDataset,
    config: ClassifierConfig,
    n_trials: int,
    base_seed: int,
    families: Optional[Sequence[str]] = None,
) -> List[ZeroDayResult]:
    if families is None:
        families = [name for name, count in data.class_counts.items() if name != BENIGN and count > 0]
    return [zero_day_eval(data, f, config, n_trials, base_seed) for f in families]
