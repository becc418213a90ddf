"""CSV output and JSONL trajectory logs.

CSV files are UTF-8 with LF endings, a header row and a fixed column
order; floats are written with 17 significant digits so they round-trip.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from otblab.baselines import AdvantageTable, GroupBatch
from otblab.rewards import Trajectory


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} fields, header has {len(columns)}")
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return write_text(path, csv_text(columns, rows))


# -- trajectory logs -------------------------------------------------------

ADVANTAGE_COLUMNS = ("step", "group", "member", "t", "token", "advantage")


def trajectory_record(traj: Trajectory, **extra) -> dict:
    rec = dict(extra)
    rec["prompt_id"] = traj.prompt_id
    rec["tokens"] = list(traj.tokens)
    rec["rewards"] = [float(r) for r in traj.rewards]
    if traj.step_dists is not None:
        rec["dists"] = [[float(p) for p in row] for row in traj.step_dists]
    else:
        rec["sampled_probs"] = [float(p) for p in traj.sampled_probs]
        rec["dist_sq_norms"] = [float(s) for s in traj.dist_sq_norms]
    if traj.behavior_logprobs is not None:
        rec["behavior_logprobs"] = [float(v) for v in traj.behavior_logprobs]
    return rec


def trajectory_line(traj: Trajectory, **extra) -> str:
    return json.dumps(trajectory_record(traj, **extra), separators=(",", ":")) + "\n"


_ALLOWED = {"prompt_id", "tokens", "rewards", "dists", "sampled_probs", "dist_sq_norms",
            "behavior_logprobs", "step", "group"}


class LogFormatError(ValueError):
    pass


def parse_trajectory(obj) -> tuple[Trajectory, int, int]:
    """Build a trajectory from one log object; returns ``(traj, step, group)``."""
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    unknown = set(obj) - _ALLOWED
    if unknown:
        raise ValueError(f"unknown key(s): {', '.join(sorted(unknown))}")
    for key in ("prompt_id", "tokens", "rewards"):
        if key not in obj:
            raise ValueError(f"missing key {key!r}")
    if "dists" in obj:
        traj = Trajectory(obj["prompt_id"], obj["tokens"], obj["rewards"],
                          step_dists=np.array(obj["dists"], dtype=np.float64),
                          behavior_logprobs=obj.get("behavior_logprobs"))
    elif "sampled_probs" in obj and "dist_sq_norms" in obj:
        traj = Trajectory(obj["prompt_id"], obj["tokens"], obj["rewards"],
                          sampled_probs=obj["sampled_probs"], dist_sq_norms=obj["dist_sq_norms"],
                          behavior_logprobs=obj.get("behavior_logprobs"))
    else:
        raise ValueError("need 'dists' or both 'sampled_probs' and 'dist_sq_norms'")
    return traj, int(obj.get("step", 0)), int(obj.get("group", 0))


def read_trajectory_log(path: Path) -> Iterator[tuple[Trajectory, int, int]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield parse_trajectory(json.loads(line))
            except (ValueError, TypeError) as exc:
                raise LogFormatError(f"{path}:{lineno}: malformed trajectory record: {exc}") from None


def read_groups(path: Path) -> list[tuple[int, int, GroupBatch]]:
    """Group log lines by ``(step, group, prompt_id)`` in first-seen order."""
    buckets: dict = {}
    for traj, step, group in read_trajectory_log(path):
        buckets.setdefault((step, group, traj.prompt_id), []).append(traj)
    out = []
    for (step, group, _), members in buckets.items():
        try:
            out.append((step, group, GroupBatch.of(members)))
        except ValueError as exc:
            raise LogFormatError(f"{path}: step {step} group {group}: {exc}") from None
    return out


def advantage_rows(step: int, group_index: int, group: GroupBatch, table: AdvantageTable):
    for i, m in enumerate(group.members):
        for k in range(m.length):
            yield (step, group_index, i, k + 1, m.tokens[k], float(table.values[i, k]))
