import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
import torch

from i2a.errors import InstructionParseError, OfflineError, RequestRejected, TransportError
from i2a.instructions import (
    FEW_SHOT_EXAMPLES,
    GUIDELINE_SENTENCE,
    LLM_KEY_ENV,
    ChatCompletionClient,
    HTTPCaptioner,
    Instruction,
    InstructionCache,
    InstructionGenerator,
    PromptTemplate,
    builtin_prompts,
    caption,
    generate_instruction,
    load_examples,
    parse_edit,
    with_retries,
)

PANDA = "a panda bear is looking at the camera"


class StubLLM:
    def __init__(self, reply='{"input": "x", "edit": "Add bamboo in background.", "output": "y"}'):
        self.reply = reply
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        return self.reply


class StubCaptioner:
    def __init__(self, text=PANDA):
        self.text = text
        self.calls = 0

    def caption(self, image):
        self.calls += 1
        return self.text


def test_builtin_prompts_exact():
    prompts = builtin_prompts()
    assert [p.text for p in prompts] == [
        "make it at night", "make it in snow", "make it a sketch painting", "make it a vintage photo"]
    assert all(p.source == "manual" for p in prompts)
    assert builtin_prompts() == prompts


def test_instruction_validation():
    with pytest.raises(ValueError):
        Instruction("  ")
    with pytest.raises(ValueError):
        Instruction("x", source="other")


def test_template_contents_and_order():
    template = PromptTemplate(num_examples=5)
    text = template.render(PANDA, "giant panda")
    assert GUIDELINE_SENTENCE in text
    assert "without altering the inherent nature or category of objects within the image" in text
    lines = [json.loads(line) for line in text.splitlines() if line.startswith("{")]
    shots, query = lines[:-1], lines[-1]
    assert len(shots) == 5
    assert [s["input"] for s in shots] == [e[0] for e in FEW_SHOT_EXAMPLES[:5]]
    assert query == {"input": PANDA, "category": "giant panda", "edit": "", "output": ""}
    assert template.render(PANDA, "giant panda") == text


def test_template_extra_examples(tmp_path):
    path = tmp_path / "extra.jsonl"
    path.write_text(json.dumps({"input": "a cat", "edit": "make it blue", "output": "a blue cat", "category": "cat"}) + "\n")
    template = PromptTemplate(extra_examples=load_examples(path))
    assert len(template.shots) == len(FEW_SHOT_EXAMPLES) + 1
    assert template.shots[-1][0] == "a cat"


def test_template_requires_category_rule():
    with pytest.raises(ValueError):
        PromptTemplate(intro="Write edits.")


def test_caption_paths():
    stub = StubCaptioner()
    assert caption(None, stub) == PANDA
    assert caption(None, stub, metadata_caption="from metadata") == "from metadata"
    assert stub.calls == 1
    with pytest.raises(InstructionParseError):
        caption(None, StubCaptioner("  "))
    with pytest.raises(OfflineError):
        caption(None, None)


def test_generate_instruction_from_stub():
    llm = StubLLM()
    inst = generate_instruction(PANDA, "giant panda", llm)
    assert inst == Instruction("Add bamboo in background.", "generated", "giant panda")
    assert len(llm.prompts) == 1 and PANDA in llm.prompts[0]
    with pytest.raises(ValueError):
        generate_instruction("", "giant panda", llm)
    with pytest.raises(InstructionParseError):
        generate_instruction(PANDA, "giant panda", StubLLM('{"input": "x", "output": "y"}'))


@pytest.mark.parametrize("response, expected", [
    ('{"edit": "make it red"}', "make it red"),
    ('Sure! {"input": "a", "category": "b", "edit": "add snow", "output": "c"} done', "add snow"),
    ("{“input”: “a”, “edit”: “turn off the light”, “output”: “b”}", "turn off the light"),
    ("make it blue\n", "make it blue"),
    ('Edit: "on Mars"', "on Mars"),
])
def test_parse_edit_variants(response, expected):
    assert parse_edit(response) == expected


@pytest.mark.parametrize("response", ["", "   ", '{"input": "a"}', '{"edit": ""}'])
def test_parse_edit_errors(response):
    with pytest.raises(InstructionParseError):
        parse_edit(response)


def test_with_retries_backoff():
    delays, attempts = [], []

    def flaky():
        attempts.append(1)
        if len(attempts) < 3:
            raise TransportError("down")
        return "ok"

    assert with_retries(flaky, 3, 0.5, sleep=delays.append) == "ok"
    assert delays == [0.5, 1.0]
    with pytest.raises(TransportError):
        with_retries(lambda: (_ for _ in ()).throw(OSError("x")), 2, 0.1, sleep=lambda s: None)


def test_cache_round_trip_and_concurrency(tmp_path):
    path = tmp_path / "cache.json"
    cache = InstructionCache(path)
    threads = [threading.Thread(target=cache.put, args=(f"id{i % 5}", "cap", f"edit {i}")) for i in range(40)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(cache) == 5
    reloaded = InstructionCache(path)
    assert reloaded.get("id0") == cache.get("id0")
    assert reloaded.get("missing") is None


def test_generator_caches_and_offline(tmp_path):
    llm, cap = StubLLM(), StubCaptioner()
    cache = InstructionCache(tmp_path / "c.json")
    gen = InstructionGenerator(llm, cap, cache=cache)
    first = gen.instruction_for("img1", torch.zeros(2, 2, 3), "giant panda")
    again = gen.instruction_for("img1", torch.zeros(2, 2, 3), "giant panda")
    assert first.text == again.text == "Add bamboo in background."
    assert len(llm.prompts) == 1 and cap.calls == 1

    offline = InstructionGenerator(llm, cap, cache=InstructionCache(tmp_path / "c.json"), offline=True)
    assert offline.instruction_for("img1").text == "Add bamboo in background."
    with pytest.raises(OfflineError):
        offline.instruction_for("img2", metadata_caption="a cat")
    assert len(llm.prompts) == 1 and cap.calls == 1


def test_generate_many_respects_in_flight_cap(tmp_path):
    active, peak = [0], [0]
    lock = threading.Lock()

    class SlowLLM(StubLLM):
        def complete(self, prompt):
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            threading.Event().wait(0.02)
            with lock:
                active[0] -= 1
            return '{"edit": "make it red"}'

    gen = InstructionGenerator(SlowLLM(), StubCaptioner(), cache=InstructionCache(tmp_path / "c.json"), max_in_flight=2)
    out = gen.generate_many([{"image_id": f"i{k}", "caption": "a cat"} for k in range(8)])
    assert len(out) == 8 and peak[0] <= 2


class _Handler(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        status, payload = type(self).script.pop(0)
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.script, _Handler.seen = [], []
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}", _Handler
    httpd.shutdown()


def test_chat_client_retries_server_errors(server, monkeypatch):
    url, handler = server
    monkeypatch.setenv(LLM_KEY_ENV, "secret")
    handler.script = [(503, {}), (200, {"choices": [{"message": {"content": '{"edit": "add snow"}'}}]})]
    client = ChatCompletionClient(url, "gpt-4", base_delay=0.0)
    assert parse_edit(client.complete("hello")) == "add snow"
    assert len(handler.seen) == 2
    body, auth = handler.seen[-1]
    assert auth == "Bearer secret"
    assert body["model"] == "gpt-4" and body["temperature"] == 0.0
    assert body["messages"][0]["content"] == "hello"


def test_chat_client_does_not_retry_client_errors(server):
    url, handler = server
    handler.script = [(401, {"error": "bad key"})]
    with pytest.raises(RequestRejected):
        ChatCompletionClient(url, "gpt-4", base_delay=0.0).complete("hello")
    assert len(handler.seen) == 1


def test_chat_client_gives_up(server):
    url, handler = server
    handler.script = [(500, {})] * 3
    with pytest.raises(TransportError):
        ChatCompletionClient(url, "gpt-4", attempts=3, base_delay=0.0).complete("hello")
    assert len(handler.seen) == 3


def test_http_captioner(server):
    url, handler = server
    handler.script = [(200, {"caption": PANDA})]
    assert HTTPCaptioner(url).caption(torch.rand(4, 4, 3)) == PANDA
    body, _ = handler.seen[0]
    assert isinstance(body["image"], str) and len(body["image"]) > 0
