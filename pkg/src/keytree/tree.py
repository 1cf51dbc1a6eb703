"""Hierarchical keyframe tree: construction, relevance-guided expansion, traversal and export."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

from keytree.clustering import ClusterAssignment, KMeansOptions, SubtreeSpec, keyframe_of, subcluster
from keytree.errors import InvalidDepth, MismatchedFrameCount, RecordFormatError
from keytree.features import FeatureSet


class RelevanceLevel(enum.IntEnum):
    LOW = 1
    MEDIUM = 2
    HIGH = 3


@dataclass
class TreeNode:
    node_id: str
    level: int
    member_frames: list[int]
    keyframe: int
    relevance: RelevanceLevel | None = None
    children: list["TreeNode"] = field(default_factory=list)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass
class VideoTree:
    video_id: str
    roots: list[TreeNode]
    config_snapshot: dict = field(default_factory=dict)

    @property
    def k_final(self) -> int:
        return len(self.roots)

    def nodes(self):
        for r in self.roots:
            yield from r.walk()

    def node_count(self) -> int:
        return sum(1 for _ in self.nodes())

    def depth(self) -> int:
        return max(n.level for n in self.nodes())


def layer_from_assignment(assignment: ClusterAssignment, fs: FeatureSet) -> list[TreeNode]:
    """Level-1 nodes, one per realized cluster, ordered by keyframe."""
    if len(assignment.labels) != fs.n:
        raise MismatchedFrameCount(f"assignment covers {len(assignment.labels)} frames, feature set has {fs.n}")
    nodes = []
    for c in range(assignment.k_eff):
        rows = assignment.members(c)
        members = fs.frame_indices[rows]
        kf = keyframe_of(members, fs.vectors[rows], assignment.centroids[c])
        nodes.append(TreeNode("", 1, sorted(int(i) for i in members), kf))
    nodes.sort(key=lambda n: n.keyframe)
    for i, node in enumerate(nodes):
        node.node_id = str(i)
    return nodes


def _from_spec(spec: SubtreeSpec, node_id: str, level: int) -> TreeNode:
    node = TreeNode(node_id, level, list(spec.member_frames), spec.keyframe)
    node.children = [_from_spec(c, f"{node_id}.{i}", level + 1) for i, c in enumerate(spec.children)]
    return node


def expand_node(
    node: TreeNode,
    relevance: RelevanceLevel,
    w: int,
    max_depth: int,
    fs: FeatureSet,
    seed: int = 0,
    opts: KMeansOptions | None = None,
) -> TreeNode:
    """Attach children to a level-1 node according to its relevance.

    Low gets nothing, Medium one level of ``w`` sub-clusters, High two levels
    (one when ``max_depth == 2``).
    """
    if max_depth not in (2, 3):
        raise InvalidDepth(f"max_depth must be 2 or 3, got {max_depth}")
    if node.level != 1:
        raise ValueError(f"only level-1 nodes are expanded (got level {node.level})")
    relevance = RelevanceLevel(relevance)
    out = TreeNode(node.node_id, 1, list(node.member_frames), node.keyframe, relevance)
    if relevance == RelevanceLevel.LOW:
        return out
    levels = 1 if relevance == RelevanceLevel.MEDIUM else min(2, max_depth - 1)
    rows = fs.rows_of(node.member_frames)
    base = opts or KMeansOptions()
    sub_opts = replace(base, seed=seed)
    specs = subcluster(fs.frame_indices[rows], fs.vectors[rows], w, levels, sub_opts, path=node.node_id)
    out.children = [_from_spec(s, f"{node.node_id}.{i}", 2) for i, s in enumerate(specs)]
    return out


def collect_keyframes(tree: VideoTree) -> list[int]:
    """Keyframes of every node at every level, deduplicated, in temporal order."""
    return sorted({n.keyframe for n in tree.nodes()})


def check_tree(tree: VideoTree, all_frames=None, max_depth: int = 3) -> None:
    """Assert the structural invariants (partitioning, levels, keyframe membership)."""

    def check(node: TreeNode, level: int):
        assert node.level == level, f"{node.node_id}: level {node.level} != {level}"
        assert level <= max_depth, f"{node.node_id}: deeper than {max_depth}"
        assert node.member_frames and node.member_frames == sorted(node.member_frames)
        assert node.keyframe in node.member_frames, f"{node.node_id}: keyframe not a member"
        if level >= 2:
            assert node.relevance is None, f"{node.node_id}: scored below level 1"
        if node.children:
            union = sorted(f for c in node.children for f in c.member_frames)
            assert union == node.member_frames, f"{node.node_id}: children do not partition members"
        for c in node.children:
            check(c, level + 1)

    for r in tree.roots:
        check(r, 1)
    if all_frames is not None:
        union = sorted(f for r in tree.roots for f in r.member_frames)
        assert union == sorted(int(i) for i in all_frames), "roots do not partition the video"


# -- export ---------------------------------------------------------------------------------------


def node_to_dict(node: TreeNode) -> dict:
    return {
        "id": node.node_id,
        "level": node.level,
        "members": list(node.member_frames),
        "keyframe": node.keyframe,
        "relevance": None if node.relevance is None else int(node.relevance),
        "children": [node_to_dict(c) for c in node.children],
    }


def node_from_dict(d: dict) -> TreeNode:
    rel = d["relevance"]
    return TreeNode(
        str(d["id"]),
        int(d["level"]),
        [int(i) for i in d["members"]],
        int(d["keyframe"]),
        None if rel is None else RelevanceLevel(rel),
        [node_from_dict(c) for c in d["children"]],
    )


def tree_to_dict(tree: VideoTree) -> dict:
    return {
        "video_id": tree.video_id,
        "k_final": tree.k_final,
        "config": tree.config_snapshot,
        "roots": [node_to_dict(r) for r in tree.roots],
    }


def tree_from_dict(d: dict) -> VideoTree:
    try:
        tree = VideoTree(str(d["video_id"]), [node_from_dict(r) for r in d["roots"]], dict(d.get("config") or {}))
    except (KeyError, TypeError, ValueError) as e:
        raise RecordFormatError(f"malformed tree: {e!r}") from None
    return tree


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n").encode("utf-8")


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def tree_to_dot(tree: VideoTree) -> str:
    lines = [f"digraph {_dot_quote(tree.video_id)} {{", "  node [shape=box];"]
    for n in tree.nodes():
        rel = "unscored" if n.relevance is None else str(int(n.relevance))
        lines.append(f"  {_dot_quote(n.node_id)} [label={_dot_quote(f'{n.node_id}|{n.keyframe}|{rel}')}];")
    for n in tree.nodes():
        for c in n.children:
            lines.append(f"  {_dot_quote(n.node_id)} -> {_dot_quote(c.node_id)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_tree(tree: VideoTree, format: str = "structured") -> bytes:
    """Serialize a tree as canonical JSON (``structured``) or a DOT digraph (``graph``)."""
    if format == "structured":
        return canonical_json(tree_to_dict(tree))
    if format == "graph":
        return tree_to_dot(tree).encode("utf-8")
    raise ValueError(f"unknown export format {format!r}")


def import_tree(data: bytes) -> VideoTree:
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise RecordFormatError(f"tree export is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise RecordFormatError("tree export must be a JSON object")
    return tree_from_dict(obj)
