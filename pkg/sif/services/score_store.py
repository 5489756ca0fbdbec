"""Score CSV files: resumable writing and reading back into records."""

import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Type

import pandas as pd

from sif.errors import DataFormatError, InfluenceError, SifError
from sif.models import SCORE_COLUMNS, MiSplit, SifRecord
from sif.services.attacks import MAX_FAILURE_RATE, members_sampler
from sif.services.data import LabeledDataset
from sif.services.influence import Scorer, score_samples
from sif.services.target_models import Checkpoint

logger = logging.getLogger(__name__)


def _read_frame(path: str) -> pd.DataFrame:
    # %.17g on write plus round_trip parsing reproduces every float bit
    return pd.read_csv(path, float_precision="round_trip")


def read_scores(path: str) -> List[SifRecord]:
    frame = _read_frame(path)
    missing = set(SCORE_COLUMNS) - set(frame.columns)
    if missing:
        raise DataFormatError(f"{path}: missing columns {sorted(missing)}")
    return [SifRecord.from_row(row) for row in frame.to_dict("records")]


def provenance_path(path: str) -> str:
    return f"{path}.provenance.json"


class ScoreWriter:
    """Single writer for one score file; rewrites it atomically, sorted by sample id.

    A sidecar JSON next to the CSV holds the scorer descriptor and the
    checkpoint fingerprint the rows were computed with. Rows from any other
    scorer settings or checkpoint are discarded on resume.
    """

    def __init__(self, path: str, scorer: Scorer, fingerprint: str = "", flush_every: int = 100):
        self.path = path
        self.scorer = scorer
        self.fingerprint = fingerprint
        self.flush_every = max(1, flush_every)
        self.rows: Dict[int, dict] = {}
        self.fresh = 0
        self._pending = 0

    def provenance(self) -> dict:
        return {"scorer": self.scorer.descriptor(), "checkpoint": self.fingerprint}

    def _matches(self, frame: pd.DataFrame) -> Optional[str]:
        """None when the stored rows were produced by this writer's settings, else the reason."""
        sidecar = provenance_path(self.path)
        if not os.path.exists(sidecar):
            return "no provenance file"
        with open(sidecar) as fh:
            stored = json.load(fh)
        expected = json.loads(json.dumps(self.provenance()))
        if stored.get("checkpoint") != expected["checkpoint"]:
            return "checkpoint fingerprint changed"
        if stored.get("scorer") != expected["scorer"]:
            return "scorer settings changed"
        lissa = self.scorer.lissa
        stamp = (lissa.repeats, lissa.depth, lissa.damping, lissa.seed)
        for row in frame.to_dict("records"):
            if (int(row["r"]), int(row["d"]), float(row["lambda"]), int(row["seed"])) != stamp:
                return f"sample {int(row['sample_id'])} was scored with other LiSSA settings"
        return None

    def resume(self) -> int:
        """
        Load rows already on disk that this writer would have produced.

        Returns:
            Number of rows kept; stale rows are dropped and rescored
        """
        if not os.path.exists(self.path):
            return 0
        frame = _read_frame(self.path)
        missing = set(SCORE_COLUMNS) - set(frame.columns)
        if missing:
            raise DataFormatError(f"{self.path}: missing columns {sorted(missing)}")
        kinds = set(frame["scorer"])
        if kinds - {self.scorer.kind}:
            raise DataFormatError(
                f"{self.path} holds {sorted(kinds)} scores, expected {self.scorer.kind}"
            )
        stale = self._matches(frame)
        if stale is not None:
            logger.warning("discarding %d rows of %s: %s", len(frame), self.path, stale)
            return 0
        for row in frame.to_dict("records"):
            self.rows[int(row["sample_id"])] = {column: row[column] for column in SCORE_COLUMNS}
        logger.warning("resuming %s: %d samples already scored", self.path, len(self.rows))
        return len(self.rows)

    @property
    def done(self) -> set:
        return set(self.rows)

    def add(self, record: SifRecord) -> None:
        lissa = self.scorer.lissa
        self.rows[record.sample_id] = record.to_row(lissa.repeats, lissa.depth, lissa.damping, lissa.seed)
        self.fresh += 1
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        sidecar = provenance_path(self.path)
        with open(f"{sidecar}.tmp", "w") as fh:
            json.dump(self.provenance(), fh, indent=2, sort_keys=True)
        os.replace(f"{sidecar}.tmp", sidecar)
        frame = pd.DataFrame([self.rows[k] for k in sorted(self.rows)], columns=SCORE_COLUMNS)
        tmp = f"{self.path}.tmp"
        frame.to_csv(tmp, index=False, float_format="%.17g")
        os.replace(tmp, self.path)
        self._pending = 0

    def records(self) -> List[SifRecord]:
        return [SifRecord.from_row(self.rows[k]) for k in sorted(self.rows)]


@dataclass
class ScoredSubset:
    """Records for the requested ids plus what this call spent scoring."""

    records: List[SifRecord]
    fresh: int
    seconds: float

    @property
    def seconds_per_sample(self) -> Optional[float]:
        """Wall time per newly scored sample; None when everything was resumed."""
        return self.seconds / self.fresh if self.fresh else None


def score_to_file(
    path: str,
    scorer: Scorer,
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    split: MiSplit,
    sample_ids: Sequence[int],
    threads: int = 1,
    flush_every: int = 100,
    budget_error: Type[SifError] = InfluenceError,
) -> ScoredSubset:
    """
    Score the ids not yet in ``path`` and leave a complete, sorted file behind.

    Args:
        path: Score CSV; rows from other settings or another checkpoint are rescored
        scorer: Score kind and LiSSA settings
        checkpoint: Frozen target model
        dataset: Dataset the split indexes into
        split: Member/non-member split, used for the Hessian sampler and ground truth
        sample_ids: Ids to score
        threads: Worker threads; scores do not depend on it
        flush_every: Rewrite the file after this many new rows
        budget_error: Raised when more than 1% of the samples fail

    Returns:
        ScoredSubset with the records of ``sample_ids`` that could be scored
    """
    writer = ScoreWriter(path, scorer, checkpoint.fingerprint, flush_every)
    writer.resume()
    todo = [int(i) for i in sample_ids if int(i) not in writer.done]
    started = time.perf_counter()
    _, failures = score_samples(
        scorer, checkpoint, dataset, todo, members_sampler(dataset, split, scorer),
        membership=split.membership, threads=threads, on_record=writer.add, progress=True,
    )
    seconds = time.perf_counter() - started
    writer.flush()
    if len(failures) > MAX_FAILURE_RATE * max(1, len(sample_ids)):
        raise budget_error(f"scoring failed on {len(failures)} samples: {sorted(failures)}")
    if failures:
        logger.warning("%d samples could not be scored: %s", len(failures), sorted(failures))
    wanted = {int(i) for i in sample_ids}
    records = [record for record in writer.records() if record.sample_id in wanted]
    return ScoredSubset(records, writer.fresh, seconds)
