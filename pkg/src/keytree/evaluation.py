"""Dataset loading, batch evaluation and accuracy / efficiency reporting."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from keytree.backends import Backends
from keytree.errors import DatasetFormatError, DuplicateUid, EmptyDataset, EmptyInput, KeyTreeError, TaskFailed
from keytree.pipeline import STAGES, PipelineConfig, RunRecord, run_video
from keytree.prompts import QATask
from keytree.tree import canonical_json

PROFILE_COLUMNS = STAGES + ("overall",)


def load_dataset(path) -> list[QATask]:
    """Read a JSON array of task objects; uids must be unique."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetFormatError(f"cannot read dataset {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"dataset {path} is not valid JSON: {e}") from None
    if not isinstance(data, list):
        raise DatasetFormatError("dataset must be a JSON array of tasks")
    tasks, seen = [], set()
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise DatasetFormatError("task must be a JSON object", i)
        try:
            task = QATask.from_dict(obj)
        except DatasetFormatError as e:
            raise DatasetFormatError(str(e), i) from None
        if task.uid in seen:
            raise DuplicateUid(f"duplicate uid {task.uid!r}", i)
        seen.add(task.uid)
        tasks.append(task)
    return tasks


def feature_path(asset_dir, video_id: str) -> Path:
    return Path(asset_dir) / f"{video_id}.vtrf"


@dataclass
class TaskOutcome:
    uid: str
    gold: str | None
    correct: bool | None
    prediction: str | None
    captions_used: int | None
    llm_calls: int | None


@dataclass
class EvalReport:
    n_tasks: int
    scored: int
    correct: int
    accuracy: float | None
    strict_accuracy: float | None
    avg_captions: float | None
    avg_llm_calls: float | None
    stage_time_totals: dict[str, float]
    per_task: list[TaskOutcome]
    failures: list[tuple[str, str]]
    records: list[RunRecord] = field(default_factory=list, repr=False)
    config: dict = field(default_factory=dict)

    def predictions(self) -> dict[str, str]:
        return {t.uid: t.prediction for t in self.per_task if t.prediction is not None}

    def to_dict(self, mask_timings: bool = False) -> dict:
        totals = {k: 0.0 for k in self.stage_time_totals} if mask_timings else dict(self.stage_time_totals)
        return {
            "n_tasks": self.n_tasks,
            "scored": self.scored,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "strict_accuracy": self.strict_accuracy,
            "avg_captions": self.avg_captions,
            "avg_llm_calls": self.avg_llm_calls,
            "stage_time_totals": totals,
            "per_task": [
                {
                    "uid": t.uid,
                    "gold": t.gold,
                    "correct": t.correct,
                    "prediction": t.prediction,
                    "captions_used": t.captions_used,
                    "llm_calls": t.llm_calls,
                }
                for t in self.per_task
            ],
            "failures": [{"uid": u, "error": e} for u, e in self.failures],
            "config": self.config,
        }

    def to_json(self, mask_timings: bool = False) -> bytes:
        return canonical_json(self.to_dict(mask_timings))

    def text_table(self) -> str:
        lines = [f"{'uid':<24} {'pred':>4} {'gold':>4} {'ok':>3} {'caps':>5} {'calls':>5}"]
        for t in self.per_task:
            ok = "-" if t.correct is None else ("y" if t.correct else "n")
            lines.append(
                f"{t.uid:<24} {t.prediction or '-':>4} {t.gold or '-':>4} {ok:>3} "
                f"{'-' if t.captions_used is None else t.captions_used:>5} {'-' if t.llm_calls is None else t.llm_calls:>5}"
            )
        acc = "n/a" if self.accuracy is None else f"{self.accuracy:.4f}"
        lines.append(f"accuracy {acc} ({self.correct}/{self.scored}), failures {len(self.failures)}")
        if self.avg_captions is not None:
            lines.append(f"avg captions {self.avg_captions:.2f}, avg LLM calls {self.avg_llm_calls:.2f}")
        return "\n".join(lines) + "\n"


def evaluate(
    tasks: list[QATask],
    asset_dir,
    cfg: PipelineConfig,
    backends: Backends,
    parallelism: int = 1,
    examples: str | None = None,
    echo_config: dict | None = None,
) -> EvalReport:
    """Run every task (at most ``parallelism`` at once); per-task failures are recorded, not raised."""
    if not tasks:
        raise EmptyDataset("dataset holds no tasks")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(task: QATask):
        try:
            return run_video(task, feature_path(asset_dir, task.video_id), cfg, backends, examples, echo_config)
        except (TaskFailed, KeyTreeError) as e:
            return e

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        results = list(pool.map(one, tasks))
    report = build_report(tasks, results)
    report.config = echo_config if echo_config is not None else {"pipeline": cfg.to_dict()}
    return report


def build_report(tasks: list[QATask], results: list) -> EvalReport:
    per_task, failures, records = [], [], []
    scored = correct = 0
    for task, res in zip(tasks, results):
        if isinstance(res, RunRecord):
            records.append(res)
            ok = None if task.answer is None else res.answer.prediction == task.answer_letter
            if ok is not None:
                scored += 1
                correct += ok
            per_task.append(TaskOutcome(task.uid, task.answer_letter, ok, res.answer.prediction, res.captions_used, res.llm_calls))
        else:
            failures.append((task.uid, str(res)))
            per_task.append(TaskOutcome(task.uid, task.answer_letter, None if task.answer is None else False, None, None, None))
    with_answer = sum(t.answer is not None for t in tasks)
    totals = {s: sum(r.stage_times.get(s, 0.0) for r in records) for s in STAGES}
    return EvalReport(
        n_tasks=len(tasks),
        scored=scored,
        correct=correct,
        accuracy=correct / scored if scored else None,
        strict_accuracy=correct / with_answer if with_answer else None,
        avg_captions=sum(r.captions_used for r in records) / len(records) if records else None,
        avg_llm_calls=sum(r.llm_calls for r in records) / len(records) if records else None,
        stage_time_totals=totals,
        per_task=per_task,
        failures=failures,
        records=records,
    )


def efficiency_profile(records: list[RunRecord]) -> dict[str, dict[str, float]]:
    """Per-stage means and totals, columns ordered captioning, keyframe selection, QA, overall."""
    if not records:
        raise EmptyInput("efficiency_profile needs at least one record")
    totals = {s: sum(r.stage_times.get(s, 0.0) for r in records) for s in STAGES}
    totals["overall"] = sum(totals[s] for s in STAGES)
    n = len(records)
    return {c: {"mean": totals[c] / n, "total": totals[c]} for c in PROFILE_COLUMNS}


def render_profile(profile: dict[str, dict[str, float]]) -> str:
    head = "".join(f"{c:>20}" for c in ("",) + PROFILE_COLUMNS)
    rows = [head]
    for stat in ("mean", "total"):
        rows.append(f"{stat:>20}" + "".join(f"{profile[c][stat]:>20.4f}" for c in PROFILE_COLUMNS))
    return "\n".join(rows) + "\n"
