import json
from pathlib import Path

import numpy as np
import pytest

from keytree.backends import BackendConfig, Backends, CaptionStore, Captioner, ScriptEntry, ScriptedLLM
from keytree.features import make_feature_set
from keytree.prompts import QATask

GOLDEN = Path(__file__).parent / "golden"


def blobs(centers, per_blob, spread=0.01, seed=0):
    """Points scattered tightly around each center, blob by blob in frame order."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    pts = [c + rng.normal(0, spread, centers.shape[1]) for c in centers for _ in range(per_blob)]
    return np.asarray(pts)


def scripted(responses, captions=None):
    """Backends with an in-memory scripted LLM and a dict-backed caption table."""
    llm = ScriptedLLM([ScriptEntry(r) for r in responses])
    return Backends(llm, Captioner(DictCaptioner(captions), "mock"), BackendConfig(llm_endpoint="mock:inline"))


class DictCaptioner:
    """Captions every frame as "frame <i>" unless overridden."""

    def __init__(self, captions=None):
        self.captions = captions or {}

    def lookup(self, video_id, frame_index):
        return frame_index, self.captions.get(frame_index, f"#C frame {frame_index}")


def scoring_response(levels, letter="A"):
    return f"prediction: {letter}, explanation: scripted, confidence: 50, frame relevance: [{', '.join(map(str, levels))}]"


@pytest.fixture
def task():
    return QATask("t0", "vid", "What does C do?", ("cook", "read", "run", "sleep", "swim"), 1)


@pytest.fixture
def write_lines(tmp_path):
    def _write(name, records):
        p = tmp_path / name
        p.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        return p

    return _write


@pytest.fixture
def demo_fs():
    return make_feature_set("vid", blobs([[0, 0], [5, 5]], 4))


def nested_blobs(k, w, seed=0, dim=8, leaf_points=2):
    """k top clusters, each of w sub-clusters, each of w leaf blobs with ``leaf_points`` points.

    Scales are separated by two orders of magnitude so every split is
    unambiguous; returns (vectors, labels) with labels = (top, mid, leaf).
    """
    rng = np.random.default_rng(seed)
    unit = lambda: (lambda v: v / np.linalg.norm(v))(rng.normal(size=dim))
    vecs, labels = [], []
    for a in range(k):
        ca = 1e4 * unit()
        for b in range(w):
            cb = ca + 1e2 * unit()
            for c in range(w):
                cc = cb + 1.0 * unit()
                for _ in range(leaf_points):
                    vecs.append(cc + 1e-3 * rng.normal(size=dim))
                    labels.append((a, b, c))
    return np.asarray(vecs), labels
