"""
Per-sample timing of the three scanning stages: parse, extract, predict.

Timings use time.perf_counter after a warm-up pass and run on a single
thread. Fewer files than the sample floor are cycled until the floor is met.
"""

import logging
import statistics
import time
from dataclasses import dataclass
from itertools import cycle, islice
from typing import Dict, List, Sequence

from peguard.ml.model import TrainedModel, predict
from peguard.services.features import extract_features
from peguard.services.pe_format import parse_pe

logger = logging.getLogger(__name__)

WARMUP_ITERATIONS = 10
MIN_SAMPLES = 100
STAGES = ("parse", "extract", "predict")


@dataclass(frozen=True)
class StageTiming:
    stage: str
    samples: int
    mean_ms: float
    median_ms: float


@dataclass(frozen=True)
class BenchReport:
    family: str
    stages: Dict[str, StageTiming]

    def lines(self) -> List[str]:
        return [
            f"{t.stage} mean_ms={t.mean_ms:.4f} median_ms={t.median_ms:.4f} samples={t.samples}"
            for t in self.stages.values()
        ]


def bench(
    files: Sequence[bytes],
    model: TrainedModel,
    min_samples: int = MIN_SAMPLES,
    warmup: int = WARMUP_ITERATIONS,
) -> BenchReport:
    if not files:
        raise ValueError("bench needs at least one PE file")
    n = max(min_samples, len(files))
    timings: Dict[str, List[float]] = {stage: [] for stage in STAGES}

    def one(data: bytes, record: bool) -> None:
        t0 = time.perf_counter()
        pe = parse_pe(data)
        t1 = time.perf_counter()
        vector = extract_features(pe, model.set_id)
        t2 = time.perf_counter()
        predict(model, vector)
        t3 = time.perf_counter()
        if record:
            timings["parse"].append((t1 - t0) * 1e3)
            timings["extract"].append((t2 - t1) * 1e3)
            timings["predict"].append((t3 - t2) * 1e3)

    for data in islice(cycle(files), warmup):
        one(data, record=False)
    for data in islice(cycle(files), n):
        one(data, record=True)

    stages = {
        stage: StageTiming(stage, len(values), statistics.fmean(values), statistics.median(values))
        for stage, values in timings.items()
    }
    logger.info(f"Benchmarked {n} samples against a {model.family} model")
    return BenchReport(model.family, stages)
