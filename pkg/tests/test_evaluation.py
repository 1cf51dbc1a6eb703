import json

import pytest

from keytree.backends import BackendConfig, build_backends
from keytree.errors import DatasetFormatError, DuplicateUid, EmptyDataset, EmptyInput
from keytree.evaluation import build_report, efficiency_profile, evaluate, load_dataset, render_profile
from keytree.pipeline import PipelineConfig, RunRecord
from keytree.synthetic import write_suite

TASK = {"uid": "a", "video_id": "v", "question": "q", "options": ["1", "2", "3", "4", "5"], "answer": 2}
CFG = PipelineConfig(4, 4, 1, 2, 3)


def dataset(tmp_path, tasks):
    p = tmp_path / "d.json"
    p.write_text(json.dumps(tasks))
    return p


def test_load_two_tasks(tmp_path):
    tasks = load_dataset(dataset(tmp_path, [TASK, dict(TASK, uid="b", answer=None)]))
    assert [t.uid for t in tasks] == ["a", "b"]
    assert tasks[1].answer is None


@pytest.mark.parametrize(
    "bad, err",
    [
        (dict(TASK, options=["1", "2", "3", "4"]), DatasetFormatError),
        (dict(TASK, answer=7), DatasetFormatError),
        ({"uid": "x"}, DatasetFormatError),
        (TASK, DuplicateUid),
    ],
    ids=["four-options", "answer-7", "missing-fields", "duplicate"],
)
def test_load_rejects(tmp_path, bad, err):
    with pytest.raises(err) as e:
        load_dataset(dataset(tmp_path, [TASK, bad]))
    assert e.value.index == 1


def test_load_not_an_array(tmp_path):
    with pytest.raises(DatasetFormatError):
        load_dataset(dataset(tmp_path, TASK))


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    d = tmp_path_factory.mktemp("suite")
    return d, load_dataset(write_suite(d))


def run(suite, endpoint, parallel=1, tasks=None):
    d, all_tasks = suite
    b = build_backends(BackendConfig(llm_endpoint=endpoint, captioner=f"store:{d}"))
    return evaluate(tasks or all_tasks, d, CFG, b, parallel), b


def test_keyword_suite_accuracy(suite):
    report, _ = run(suite, "mock:keyword")
    assert report.accuracy == 1.0 and report.correct == 4 and report.failures == []


def test_sabotaged_scorer_loses(suite):
    report, _ = run(suite, "mock:keyword-inverted")
    assert report.accuracy < 1.0


def test_order_and_parallelism_invariant(suite):
    d, tasks = suite
    a, _ = run(suite, "mock:keyword", 1)
    b, _ = run(suite, "mock:keyword", 4, list(reversed(tasks)))
    assert a.accuracy == b.accuracy
    assert a.predictions() == b.predictions()
    assert a.to_json(mask_timings=True) == run(suite, "mock:keyword", 3)[0].to_json(mask_timings=True)


def test_captions_sum_equals_cache_misses(suite):
    # one breadth round per task, so every captioned frame is also used
    report, b = run(suite, "mock:keyword")
    assert all(len(r.k_sequence) == 1 for r in report.records)
    assert sum(r.captions_used for r in report.records) == b.captioner.misses


def test_failures_recorded_not_fatal(suite, tmp_path):
    d, tasks = suite
    ghost = type(tasks[0])("ghost", "missing", "q", tuple("abcde"), 0)
    report, _ = run(suite, "mock:keyword", tasks=tasks + [ghost])
    assert report.n_tasks == 5 and report.scored == 4
    assert report.accuracy == 1.0 and report.strict_accuracy == 0.8
    assert [u for u, _ in report.failures] == ["ghost"]
    assert "ghost" not in report.predictions()


def test_unanswered_tasks_excluded_from_accuracy(suite):
    d, tasks = suite
    blind = [type(t)(t.uid, t.video_id, t.question, t.options, None) for t in tasks[:2]]
    report, _ = run(suite, "mock:keyword", tasks=blind + tasks[2:])
    assert report.scored == 2 and report.accuracy == 1.0
    assert report.avg_captions == sum(r.captions_used for r in report.records) / 4


def test_empty_dataset(suite):
    with pytest.raises(EmptyDataset):
        evaluate([], suite[0], CFG, build_backends(BackendConfig()), 1)


def fake_record(times):
    return RunRecord("u", "v", [1], [], None, [], 0, 2, 2, 0, dict(zip(("captioning", "keyframe_selection", "qa"), times)), None)


def test_efficiency_profile_means():
    prof = efficiency_profile([fake_record([1, 2, 3]), fake_record([3, 4, 5])])
    assert [prof[c]["mean"] for c in ("captioning", "keyframe_selection", "qa", "overall")] == [2, 3, 4, 9]
    assert list(prof) == ["captioning", "keyframe_selection", "qa", "overall"]
    single = efficiency_profile([fake_record([1, 2, 3])])
    assert single["qa"]["mean"] == 3 and single["overall"]["total"] == 6
    assert render_profile(prof).splitlines()[0].split() == ["captioning", "keyframe_selection", "qa", "overall"]
    with pytest.raises(EmptyInput):
        efficiency_profile([])


def test_text_table(suite):
    report, _ = run(suite, "mock:keyword")
    table = report.text_table()
    assert "accuracy 1.0000 (4/4), failures 0" in table
    assert len(table.splitlines()) == 1 + 4 + 2
