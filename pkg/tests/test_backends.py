import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keytree.backends import (
    API_KEY_ENV,
    BackendConfig,
    CaptionStore,
    Captioner,
    ChatCompletionLLM,
    HttpCaptioner,
    KeywordLLM,
    ScriptEntry,
    ScriptedLLM,
    build_backends,
    build_llm,
    load_script,
)
from keytree.errors import BackendRefusal, CaptionMissing, ConfigError, FormatError, ScriptExhausted, TransportError
from keytree.prompts import QATask, render_qa_prompt, render_relevance_prompt


def completion(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def live(handler, **cfg):
    return ChatCompletionLLM(BackendConfig(llm_endpoint="http://llm.test/v1/chat/completions", **cfg), "sk-x",
                             httpx.MockTransport(handler))


def test_script_single_response_then_exhausted():
    llm = ScriptedLLM([ScriptEntry("prediction: A, ...")])
    assert llm.complete("anything") == "prediction: A, ..."
    with pytest.raises(ScriptExhausted):
        llm.complete("again")


def test_script_matching_and_order(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text("\n".join(json.dumps(e) for e in [
        {"response": "first"}, {"match": "cats", "response": "about cats"}, {"response": "second"}]) + "\n")
    llm = ScriptedLLM(load_script(p))
    assert llm.complete("dogs") == "first"
    assert llm.complete("many cats") == "about cats"
    assert llm.complete("cats again") == "second"


def test_bad_script_line(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"response": "ok"}\n{"nope": 1}\n')
    with pytest.raises(FormatError) as e:
        load_script(p)
    assert e.value.record == 1


def test_live_request_body_and_auth():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=completion("prediction: C"))

    llm = live(handler, temperature=0.7, model_name="m1")
    assert llm.complete("hello") == "prediction: C"
    assert seen["body"] == {"model": "m1", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.7}
    assert seen["auth"] == "Bearer sk-x"


def test_live_500_twice_is_transport_error():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500, text="boom")

    with pytest.raises(TransportError):
        live(handler, max_retries=1).complete("x")
    assert len(calls) == 2


def test_live_retry_then_success():
    responses = iter([httpx.Response(503), httpx.Response(200, json=completion("ok"))])
    assert live(lambda r: next(responses)).complete("x") == "ok"


def test_live_connect_error_retried():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(TransportError):
        live(handler, max_retries=2).complete("x")


def test_live_4xx_is_refusal_with_body():
    with pytest.raises(BackendRefusal) as e:
        live(lambda r: httpx.Response(401, text="bad key")).complete("x")
    assert e.value.status == 401 and "bad key" in str(e.value)


def test_api_key_from_environment(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "env-key")
    llm = build_llm(BackendConfig(llm_endpoint="https://x.test/v1"),
                    transport=httpx.MockTransport(lambda r: httpx.Response(200, json=completion(r.headers["authorization"]))))
    assert llm.complete("p") == "Bearer env-key"


def test_http_captioner_wire_format():
    def handler(request):
        body = json.loads(request.content)
        return httpx.Response(200, json={"text": f"{body['video_id']}@{body['frame']}"})

    cap = Captioner(HttpCaptioner(BackendConfig(captioner="http://cap.test/"), None, httpx.MockTransport(handler)), "live")
    c = cap.get_caption("v1", 12)
    assert (c.text, c.source, c.frame_index) == ("v1@12", "live", 12)


@pytest.fixture
def store(tmp_path):
    p = tmp_path / "v.captions.jsonl"
    p.write_text('{"frame": 10, "text": "ten"}\n{"frame": 12, "text": "twelve"}\n')
    return CaptionStore(p, snap_window=1)


def test_store_tie_goes_to_lower_key(store):
    assert store.lookup("v", 11) == (10, "ten")
    assert store.lookup("v", 13) == (12, "twelve")


def test_store_outside_window(store):
    with pytest.raises(CaptionMissing):
        store.lookup("v", 20)


def test_store_read_once_and_cached(store):
    cap = Captioner(store, "store")
    a = cap.get_caption("v", 10)
    b = cap.get_caption("v", 10)
    cap.get_caption("v", 12)
    assert a is b
    assert store.file_reads == 1 and cap.misses == 2


def test_store_directory_layout(tmp_path):
    (tmp_path / "abc.captions.jsonl").write_text('{"frame": 0, "text": " hi "}\n')
    b = build_backends(BackendConfig(captioner=f"store:{tmp_path}"))
    c = b.caption("abc", 0)
    assert c.text == "hi" and c.source == "store"


def test_store_missing_file(tmp_path):
    with pytest.raises(CaptionMissing):
        CaptionStore(tmp_path / "none.jsonl").lookup("v", 0)


@settings(max_examples=80, deadline=None)
@given(st.sets(st.integers(0, 60), min_size=1, max_size=15), st.integers(0, 70), st.integers(0, 4))
def test_store_never_exceeds_window(tmp_path_factory, keys, frame, window):
    p = tmp_path_factory.mktemp("cs") / "v.jsonl"
    p.write_text("".join(json.dumps({"frame": k, "text": f"t{k}"}) + "\n" for k in keys))
    s = CaptionStore(p, window)
    nearest = min(abs(k - frame) for k in keys)
    if nearest > window:
        with pytest.raises(CaptionMissing):
            s.lookup("v", frame)
    else:
        key, text = s.lookup("v", frame)
        assert abs(key - frame) == nearest and text == f"t{key}"
        assert key == min(k for k in keys if abs(k - frame) == nearest)


def test_backend_config_validation():
    with pytest.raises(ConfigError):
        BackendConfig(temperature=-1)
    with pytest.raises(ConfigError):
        build_llm(BackendConfig(llm_endpoint="ftp://x"))


TASK = QATask("u", "v", "Which object does C handle while in the garage?",
              ("zebra mug", "rubber hose", "paper lantern", "copper kettle", "leather wallet"))


def test_keyword_scorer_and_inverted():
    caps = ["#C C stands in the kitchen", "#C C stands in the garage", "#C C lifts the rubber hose"]
    prompt = render_relevance_prompt(caps, TASK)
    assert KeywordLLM().complete(prompt).endswith("frame relevance: [1, 3, 1]")
    assert KeywordLLM(inverted=True).complete(prompt).endswith("frame relevance: [3, 1, 3]")


def test_keyword_reasoner_counts_option_hits():
    caps = ["#C C lifts the rubber hose", "#C C lifts the rubber hose", "#C C lifts the zebra mug"]
    out = KeywordLLM().complete(render_qa_prompt(caps, TASK))
    assert out.startswith("prediction: B,")
    assert "frame relevance" not in out
