"""Count metrics and ablation tables.

``mse`` keeps the crowd-counting literature's label but is the *root* mean
squared error, so ``mae <= mse`` always holds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SampleResult:
    sample_id: str
    truth: float
    predicted: float

    @property
    def abs_error(self) -> float:
        return abs(self.truth - self.predicted)

    def to_record(self) -> dict:
        return {"id": self.sample_id, "gt": self.truth, "pred": self.predicted, "abs_err": self.abs_error}


@dataclass
class EvalReport:
    mae: float
    mse: float
    per_sample: list[SampleResult] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_sample)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for s in self.per_sample:
                f.write(json.dumps(s.to_record()) + "\n")


def evaluate(pairs, ids=None) -> EvalReport:
    """MAE and root-MSE over ``(truth, predicted)`` count pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate needs at least one (truth, prediction) pair")
    if ids is None:
        ids = [str(i) for i in range(len(pairs))]
    elif len(ids) != len(pairs):
        raise ValueError(f"{len(ids)} ids for {len(pairs)} pairs")
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    resid = arr[:, 0] - arr[:, 1]
    mae = float(np.mean(np.abs(resid)))
    mse = float(math.sqrt(np.mean(resid ** 2)))
    per = [SampleResult(str(i), float(g), float(p)) for i, (g, p) in zip(ids, arr)]
    return EvalReport(mae, mse, per)


# -- tables -------------------------------------------------------------------

@dataclass
class AblationTable:
    rows: list[tuple[str, float, float, int]]  # (name, mae, mse, n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "mae", "mse", "n"])
        for name, mae, mse, n in self.rows:
            w.writerow([name, repr(mae), repr(mse), n])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def pretty(self) -> str:
        width = max([len("name")] + [len(r[0]) for r in self.rows])
        lines = [f"{'name':<{width}}  {'MAE':>10}  {'MSE':>10}  {'N':>5}",
                 "-" * (width + 31)]
        for name, mae, mse, n in self.rows:
            lines.append(f"{name:<{width}}  {mae:>10.4f}  {mse:>10.4f}  {n:>5d}")
        return "\n".join(lines)

    def __str__(self):
        return self.pretty()


def ablation_table(evals) -> AblationTable:
    """Rows sorted by MAE (ties keep input order). ``evals``: dict or (name, report) pairs."""
    items = list(evals.items()) if isinstance(evals, dict) else list(evals)
    if not items:
        raise ValueError("ablation_table needs at least one named report")
    rows = [(str(name), float(r.mae), float(r.mse), r.n) for name, r in items]
    rows.sort(key=lambda r: r[1])
    return AblationTable(rows)


def read_table_csv(text: str) -> AblationTable:
    reader = csv.DictReader(io.StringIO(text))
    return AblationTable([(r["name"], float(r["mae"]), float(r["mse"]), int(r["n"])) for r in reader])
