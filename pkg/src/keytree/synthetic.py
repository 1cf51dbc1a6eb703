"""Synthetic keyword benchmark with planted evidence.

Each video has four scenes. Every scene is a blob of "generic" frames whose
caption names the place, plus a smaller offset sub-blob of frames whose
caption names an object. The question names the target scene; the correct
option is the object hidden in that scene, and each distractor option is the
object hidden in another scene. Because hidden frames are never the keyframe
of a whole scene, the answer only reaches the final prompt when the target
scene is expanded in depth, i.e. when relevance routing works.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from keytree.features import make_feature_set, write_features

SCENES = ("kitchen", "garden", "garage", "office")
OBJECTS = ("zebra mug", "copper kettle", "rubber hose", "leather wallet", "paper lantern")
DIM = 16
GENERIC_FRAMES = 8
HIDDEN_FRAMES = 4


def build_video(video_id: str, hidden_objects: dict[str, str], seed: int):
    """Return (FeatureSet, {frame: caption}) for one synthetic video."""
    rng = np.random.default_rng(seed)
    vectors, captions = [], {}
    frame = 0
    for s, scene in enumerate(SCENES):
        base = np.zeros(DIM)
        base[s] = 10.0
        hidden = base.copy()
        hidden[8 + s] = 3.0
        for _ in range(GENERIC_FRAMES):
            vectors.append(base + rng.normal(0, 0.05, DIM))
            captions[frame] = f"#C C stands in the {scene}"
            frame += 1
        for _ in range(HIDDEN_FRAMES):
            vectors.append(hidden + rng.normal(0, 0.05, DIM))
            captions[frame] = f"#C C lifts the {hidden_objects[scene]}"
            frame += 1
    # float32 round-trip so in-memory and on-disk features agree exactly
    vecs = np.asarray(vectors, dtype=np.float32).astype(np.float64)
    return make_feature_set(video_id, vecs, fps=1.0), captions


def keyword_suite(n_tasks: int = 4, seed: int = 0) -> list[dict]:
    """Task specs: target scene rotates, objects are shuffled per task."""
    rng = np.random.default_rng(seed)
    specs = []
    for t in range(n_tasks):
        target = SCENES[t % len(SCENES)]
        objects = list(OBJECTS)
        rng.shuffle(objects)
        hidden = dict(zip(SCENES, objects[:4]))
        options = [objects[0], objects[1], objects[2], objects[3], objects[4]]
        order = rng.permutation(5)
        options = [options[i] for i in order]
        answer = options.index(hidden[target])
        specs.append(
            {
                "uid": f"syn-{t}",
                "video_id": f"synvid{t}",
                "question": f"Which object does C handle while in the {target}?",
                "options": options,
                "answer": answer,
                "hidden": hidden,
                "seed": seed * 1000 + t,
            }
        )
    return specs


def write_suite(out_dir, n_tasks: int = 4, seed: int = 0) -> Path:
    """Write features, caption stores and ``dataset.json`` under ``out_dir``; returns the dataset path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = []
    for spec in keyword_suite(n_tasks, seed):
        fs, caps = build_video(spec["video_id"], spec["hidden"], spec["seed"])
        write_features(fs, out / f"{spec['video_id']}.vtrf")
        with open(out / f"{spec['video_id']}.captions.jsonl", "w", encoding="utf-8") as f:
            for frame in sorted(caps):
                f.write(json.dumps({"frame": frame, "text": caps[frame]}) + "\n")
        dataset.append({k: spec[k] for k in ("uid", "video_id", "question", "options", "answer")})
    path = out / "dataset.json"
    path.write_text(json.dumps(dataset, indent=2) + "\n", encoding="utf-8")
    return path
