"""End-to-end run: adaptive breadth expansion, relevance-guided depth expansion, LLM reasoning."""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from keytree.backends import Backends
from keytree.clustering import KMeansOptions, derive_seed, kmeans
from keytree.errors import ConfigError, LengthMismatch, ParseFailure, RecordFormatError, TaskFailed
from keytree.features import FeatureSet, load_features, normalize
from keytree.prompts import (
    AnswerRecord,
    QATask,
    parse_qa_response,
    parse_relevance_response,
    render_qa_prompt,
    render_relevance_prompt,
)
from keytree.tree import (
    RelevanceLevel,
    TreeNode,
    VideoTree,
    collect_keyframes,
    expand_node,
    layer_from_assignment,
    tree_from_dict,
    tree_to_dict,
)

log = logging.getLogger(__name__)

STAGES = ("captioning", "keyframe_selection", "qa")


@dataclass(frozen=True)
class PipelineConfig:
    k_init: int = 8
    max_breadth: int = 32
    rele_num_thresh: int = 4
    branch_width: int = 4
    max_depth: int = 3
    seed: int = 0
    fps: float = 1.0

    def __post_init__(self):
        problems = []
        if self.k_init < 1:
            problems.append("k_init must be >= 1")
        if self.k_init > self.max_breadth:
            problems.append("k_init must not exceed max_breadth")
        if not 1 <= self.rele_num_thresh <= self.max_breadth:
            problems.append("rele_num_thresh must be in 1..max_breadth")
        if self.branch_width < 2:
            problems.append("branch_width must be >= 2")
        if self.max_depth not in (2, 3):
            problems.append("max_depth must be 2 or 3")
        if not self.fps > 0:
            problems.append("fps must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    uid: str
    video_id: str
    k_sequence: list[int]
    relevance_by_cluster: list[RelevanceLevel]
    tree: VideoTree
    keyframes_used: list[int]
    captions_used: int
    llm_calls: int
    llm_requests: int
    captioner_calls: int
    stage_times: dict[str, float]
    answer: AnswerRecord
    scoring_rounds: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self, mask_timings: bool = False) -> dict:
        times = {k: 0.0 for k in self.stage_times} if mask_timings else dict(self.stage_times)
        return {
            "uid": self.uid,
            "video_id": self.video_id,
            "k_sequence": list(self.k_sequence),
            "relevance_by_cluster": [int(r) for r in self.relevance_by_cluster],
            "tree": tree_to_dict(self.tree),
            "keyframes_used": list(self.keyframes_used),
            "captions_used": self.captions_used,
            "llm_calls": self.llm_calls,
            "llm_requests": self.llm_requests,
            "captioner_calls": self.captioner_calls,
            "stage_times": times,
            "answer": self.answer.to_dict(),
            "scoring_rounds": self.scoring_rounds,
            "warnings": list(self.warnings),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        try:
            return cls(
                uid=str(d["uid"]),
                video_id=str(d["video_id"]),
                k_sequence=[int(k) for k in d["k_sequence"]],
                relevance_by_cluster=[RelevanceLevel(r) for r in d["relevance_by_cluster"]],
                tree=tree_from_dict(d["tree"]),
                keyframes_used=[int(f) for f in d["keyframes_used"]],
                captions_used=int(d["captions_used"]),
                llm_calls=int(d["llm_calls"]),
                llm_requests=int(d.get("llm_requests", d["llm_calls"])),
                captioner_calls=int(d["captioner_calls"]),
                stage_times={str(k): float(v) for k, v in d["stage_times"].items()},
                answer=AnswerRecord.from_dict(d["answer"]),
                scoring_rounds=list(d.get("scoring_rounds", [])),
                warnings=list(d.get("warnings", [])),
                config=dict(d.get("config", {})),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise RecordFormatError(f"malformed run record: {e!r}") from None

    @property
    def overall_time(self) -> float:
        return sum(self.stage_times.values())


class _RunState:
    """Counters and timers accumulated over one run."""

    def __init__(self):
        self.stage_times = {s: 0.0 for s in STAGES}
        self.captioned: set[int] = set()
        self.llm_calls = 0
        self.llm_requests = 0
        self.warnings: list[str] = []

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stage_times[stage] += time.perf_counter() - t0

    def caption(self, backends: Backends, video_id: str, frame: int) -> str:
        with self.timed("captioning"):
            cap = backends.caption(video_id, frame)
        self.captioned.add(frame)
        return cap.text

    def ask(self, backends: Backends, prompt: str, parse, fallback, what: str) -> AnswerRecord:
        """One logical LLM call: a retry on parse failure, then the degraded fallback."""
        self.llm_calls += 1
        text = ""
        for attempt in (1, 2):
            self.llm_requests += 1
            text = backends.complete(prompt)
            try:
                return parse(text)
            except ParseFailure as e:
                self.warnings.append(f"{what}: unparseable response (attempt {attempt}): {e}")
        rec = fallback(text)
        rec.degraded = True
        self.warnings.append(f"{what}: degraded to fallback answer")
        return rec


@dataclass
class BreadthResult:
    nodes: list[TreeNode]
    relevance: list[RelevanceLevel]
    k_sequence: list[int]
    rounds: list[dict]


def adaptive_breadth_expansion(
    fs: FeatureSet,
    task: QATask,
    cfg: PipelineConfig,
    backends: Backends,
    examples: str | None = None,
    state: _RunState | None = None,
) -> BreadthResult:
    """Cluster, caption and score at k = k_init, 2*k_init, ... until enough clusters are highly relevant.

    If the threshold is never met the last clustering computed (largest k
    within ``max_breadth``) is kept.
    """
    state = state or _RunState()
    k = cfg.k_init
    if fs.n < k:
        state.warnings.append(f"InsufficientFrames: {fs.n} frames < k_init={k}; cluster count clamped")
    k_sequence, rounds = [], []
    nodes: list[TreeNode] = []
    relevance: list[RelevanceLevel] = []
    while k <= cfg.max_breadth:
        k_sequence.append(k)
        with state.timed("keyframe_selection"):
            opts = KMeansOptions(seed=derive_seed(cfg.seed, f"breadth/{k}"))
            assignment = kmeans(fs.vectors, k, opts, frame_indices=fs.frame_indices)
            nodes = layer_from_assignment(assignment, fs)
        captions = [state.caption(backends, fs.video_id, n.keyframe) for n in nodes]
        n_caps = len(captions)
        with state.timed("keyframe_selection"):
            prompt = render_relevance_prompt(captions, task, examples)
            rec = state.ask(
                backends,
                prompt,
                lambda text: parse_relevance_response(text, n_caps),
                lambda text: AnswerRecord("A", "", 1, text, [RelevanceLevel.MEDIUM] * n_caps),
                f"scoring k={k}",
            )
        relevance = list(rec.relevance)
        high = sum(r == RelevanceLevel.HIGH for r in relevance)
        rounds.append(
            {
                "k": k,
                "k_eff": assignment.k_eff,
                "relevance": [int(r) for r in relevance],
                "high_count": high,
                "draft_prediction": rec.prediction,
                "degraded": rec.degraded,
                "parse_warnings": list(rec.warnings),
            }
        )
        if high >= cfg.rele_num_thresh:
            break
        if assignment.k_eff < k:
            state.warnings.append(f"only {assignment.k_eff} distinct clusters available at k={k}; stopping breadth expansion")
            break
        k *= 2
    return BreadthResult(nodes, relevance, k_sequence, rounds)


def depth_expansion(
    nodes: list[TreeNode],
    relevance: list[RelevanceLevel],
    cfg: PipelineConfig,
    fs: FeatureSet,
) -> VideoTree:
    if len(nodes) != len(relevance):
        raise LengthMismatch(f"{len(relevance)} relevance scores for {len(nodes)} level-1 nodes")
    roots = [
        expand_node(node, rel, cfg.branch_width, cfg.max_depth, fs, seed=cfg.seed)
        for node, rel in zip(nodes, relevance)
    ]
    roots.sort(key=lambda n: n.keyframe)
    return VideoTree(fs.video_id, roots, cfg.to_dict())


def answer_query(
    tree: VideoTree,
    task: QATask,
    backends: Backends,
    examples: str | None = None,
    state: _RunState | None = None,
) -> AnswerRecord:
    state = state or _RunState()
    captions = [state.caption(backends, tree.video_id, f) for f in collect_keyframes(tree)]
    with state.timed("qa"):
        prompt = render_qa_prompt(captions, task, examples)
        return state.ask(
            backends,
            prompt,
            parse_qa_response,
            lambda text: AnswerRecord("A", "", 1, text),
            "qa",
        )


def run_video(
    task: QATask,
    feature_path,
    cfg: PipelineConfig,
    backends: Backends,
    examples: str | None = None,
    echo_config: dict | None = None,
) -> RunRecord:
    """Run the whole pipeline for one task. Any failure is re-raised as TaskFailed carrying the uid."""
    try:
        state = _RunState()
        with state.timed("keyframe_selection"):
            fs = normalize(load_features(Path(feature_path), fps=cfg.fps, video_id=task.video_id))
        state.warnings.extend(fs.warnings)
        breadth = adaptive_breadth_expansion(fs, task, cfg, backends, examples, state)
        with state.timed("keyframe_selection"):
            tree = depth_expansion(breadth.nodes, breadth.relevance, cfg, fs)
        answer = answer_query(tree, task, backends, examples, state)
        keyframes = collect_keyframes(tree)
        return RunRecord(
            uid=task.uid,
            video_id=task.video_id,
            k_sequence=breadth.k_sequence,
            relevance_by_cluster=breadth.relevance,
            tree=tree,
            keyframes_used=keyframes,
            captions_used=len(keyframes),
            llm_calls=state.llm_calls,
            llm_requests=state.llm_requests,
            captioner_calls=len(state.captioned),
            stage_times=dict(state.stage_times),
            answer=answer,
            scoring_rounds=breadth.rounds,
            warnings=state.warnings,
            config=echo_config if echo_config is not None else {"pipeline": cfg.to_dict()},
        )
    except TaskFailed:
        raise
    except Exception as e:
        raise TaskFailed(task.uid, e) from e
