"""Attack reports, vulnerability heatmaps and learning curves on disk."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParseError

CURVE_HEADER = ("epoch", "loss", "test_accuracy")


@dataclass
class AttackReport:
    """Outcome of attacking a pool of correctly classified negative samples.

    ``heatmap[node, time]`` counts every flip made in a successful attack.
    """

    pool_size: int
    successes: int
    heatmap: np.ndarray
    max_steps: int
    flip_histogram: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.int64)
        if self.heatmap.ndim != 2:
            raise DimensionError(f"heatmap must be 2-D, got shape {self.heatmap.shape}")
        self.flip_histogram = {int(k): int(v) for k, v in self.flip_histogram.items()}
        if self.pool_size < 1:
            raise ContractError("attack pool is empty")
        if not 0 <= self.successes <= self.pool_size:
            raise ContractError(f"successes {self.successes} outside [0, {self.pool_size}]")
        if np.any(self.heatmap < 0):
            raise ContractError("heatmap counts must be non-negative")

    @property
    def asr(self) -> float:
        return self.successes / self.pool_size

    @property
    def total_flips(self) -> int:
        return int(self.heatmap.sum())

    @property
    def avg_flips(self) -> float | None:
        return self.total_flips / self.successes if self.successes else None

    def argmax_cell(self) -> tuple[int, int] | None:
        if not self.heatmap.any():
            return None
        node, time = np.unravel_index(int(np.argmax(self.heatmap)), self.heatmap.shape)
        return int(node), int(time)

    def to_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "successes": self.successes,
            "asr": self.asr,
            "avg_flips": self.avg_flips,
            "max_steps": self.max_steps,
            "heatmap": self.heatmap.tolist(),
            "flip_histogram": {str(k): v for k, v in sorted(self.flip_histogram.items())},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> AttackReport:
        return cls(
            pool_size=payload["pool_size"],
            successes=payload["successes"],
            heatmap=np.array(payload["heatmap"], dtype=np.int64),
            max_steps=payload["max_steps"],
            flip_histogram={int(k): v for k, v in payload.get("flip_histogram", {}).items()},
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttackReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def save_report(report: AttackReport, path: str | Path) -> None:
    write_json(report.to_dict(), path)


def load_report(path: str | Path) -> AttackReport:
    return AttackReport.from_dict(read_json(path))


def write_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# heatmaps


def write_heatmap_csv(heatmap: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(heatmap, dtype=np.int64):
            writer.writerow(int(v) for v in row)


def read_heatmap_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh)]
    try:
        matrix = np.array([[int(v) for v in row] for row in rows], dtype=np.int64)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if matrix.ndim != 2:
        raise ParseError(f"{path}: rows have unequal length")
    return matrix


def heatmap_svg(heatmap: np.ndarray, cell: int = 60, title: str | None = None) -> str:
    """Grid of count-labelled cells; darker grey means more flips."""
    heatmap = np.asarray(heatmap, dtype=np.int64)
    n_nodes, n_times = heatmap.shape
    peak = int(heatmap.max()) if heatmap.size else 0
    left, top = 70, 40 if title else 20
    width = left + n_times * cell + 20
    height = top + n_nodes * cell + 50
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">'
    ]
    if title:
        parts.append(f'<text x="{width / 2:g}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    for node in range(n_nodes):
        y = top + node * cell
        parts.append(f'<text x="{left - 8}" y="{y + cell / 2 + 4:g}" text-anchor="end" font-size="12">{node}</text>')
        for time in range(n_times):
            count = int(heatmap[node, time])
            shade = 255 - round(255 * count / peak) if peak else 255
            ink = "#ffffff" if shade < 128 else "#000000"
            x = left + time * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},{shade})" stroke="#444444"/>'
            )
            parts.append(
                f'<text x="{x + cell / 2:g}" y="{y + cell / 2 + 4:g}" text-anchor="middle" '
                f'font-size="12" fill="{ink}">{count}</text>'
            )
    for time in range(n_times):
        x = left + time * cell + cell / 2
        parts.append(f'<text x="{x:g}" y="{top + n_nodes * cell + 16}" text-anchor="middle" font-size="12">{time}</text>')
    parts.append(
        f'<text x="{left + n_times * cell / 2:g}" y="{top + n_nodes * cell + 38}" text-anchor="middle" font-size="13">Time</text>'
    )
    parts.append(
        f'<text x="16" y="{top + n_nodes * cell / 2:g}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {top + n_nodes * cell / 2:g})">Node</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_heatmap(report: AttackReport | np.ndarray, path_csv: str | Path, path_svg: str | Path, title: str | None = None) -> None:
    heatmap = report.heatmap if isinstance(report, AttackReport) else np.asarray(report)
    write_heatmap_csv(heatmap, path_csv)
    Path(path_svg).write_text(heatmap_svg(heatmap, title=title), encoding="utf-8")


# ---------------------------------------------------------------------------
# learning curves


def emit_curves(rows: Sequence[Sequence[float]], path_csv: str | Path) -> None:
    if not rows:
        raise ContractError("no curve rows to write")
    with open(path_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for epoch, loss, acc in rows:
            writer.writerow([int(epoch), repr(float(loss)), repr(float(acc))])


def read_curves(path_csv: str | Path) -> list[tuple[int, float, float]]:
    with open(path_csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CURVE_HEADER:
            raise ParseError(f"{path_csv}: expected header {','.join(CURVE_HEADER)}", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path_csv}: expected 3 columns", line=lineno)
            rows.append((int(row[0]), float(row[1]), float(row[2])))
    return rows


# ---------------------------------------------------------------------------
# before/after comparison


def compare_reports(before: AttackReport, after: AttackReport) -> dict:
    if before.heatmap.shape != after.heatmap.shape:
        raise DimensionError(f"heatmap shapes differ: {before.heatmap.shape} vs {after.heatmap.shape}")
    ratio = after.asr / before.asr if before.asr > 0 else None
    return {
        "asr_before": before.asr,
        "asr_after": after.asr,
        "ratio": ratio,
        "argmax_before": _cell(before.argmax_cell()),
        "argmax_after": _cell(after.argmax_cell()),
        "heatmap_delta": (after.heatmap - before.heatmap).tolist(),
    }


def _cell(cell: tuple[int, int] | None) -> list[int] | None:
    return None if cell is None else list(cell)
