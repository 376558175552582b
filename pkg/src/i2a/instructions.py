"""Edit instructions: the built-in prompts and caption-to-instruction generation.

Generation is two hops: a captioner describes the image, then a language model
is shown a fixed guideline block and few-shot records and asked to fill in the
``edit`` field of a query record built from the caption and object category.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

from i2a.errors import InstructionParseError, OfflineError, RequestRejected, TransportError

log = logging.getLogger(__name__)

LLM_KEY_ENV = "I2A_LLM_API_KEY"
CAPTION_KEY_ENV = "I2A_CAPTION_API_KEY"

BUILTIN_PROMPTS = (
    "make it at night",
    "make it in snow",
    "make it a sketch painting",
    "make it a vintage photo",
)

GUIDELINE_SENTENCE = (
    "You are now tasked with generating image editing instructions for an advanced image editing "
    "algorithm. When given an image caption, your role is to produce a corresponding image editing "
    "instruction without altering the inherent nature or category of objects within the image."
)

GUIDELINES = (
    'Do not alter the primary category of objects. For instance, if the caption mentions a "beer glass", '
    'avoid instructions that would change it to a "wine glass".',
    'Preserve the natural and typical attributes of objects. Hence, if the caption mentions a "green mamba", '
    "don't instruct to change its color, given that green mambas are characteristically green.",
    'Ensure that the resulting scene remains plausible. For example, if the caption says, "a young orangutan '
    'standing on a rock", refrain from suggesting changes like "make the rock green", which would create an '
    "unnatural scenario.",
    "Refrain from introducing drastic global alterations like changing indoor scenes to outdoor.",
    'Be aware of potential errors in the captions and adhere to the object "category".',
    "Prioritize Simplicity. Keep the edits straightforward and uncomplicated.",
)

# input, edit, output, category
FEW_SHOT_EXAMPLES = (
    ("a close up of a gun on a soldier's shoulder", "as if it were a drawing",
     "a drawing of a gun on a soldier's shoulder", "assault rifle"),
    ("a small chinchilla is being fed a toothbrush", "make the chinchilla white",
     "a white chinchilla is being fed by a syringe", "syringe"),
    ("a close up of a spider with orange legs", "as a painting",
     "a painting of close up of a cockroach with orange legs", "cockroach"),
    ("an old theater curtain with a light shining through it", "turn off the light",
     "an old theater curtain without light shining through it", "theater curtain"),
    ("a laptop computer sitting on a desk with a keyboard", "make it black",
     "a black laptop computer sitting on a desk with a keyboard", "notebook"),
    ("a dog standing on a dirt road next to a pole", "make it at night",
     "a dog standing on a dirt road next to a pole during the night", "malinois"),
    ("a black and white photo of a spiral garden", "make it more colourful",
     "a colourful photo of a spiral garden", "maze"),
    ("a close up of a curtain with a pattern on it", "make it blue",
     "a close up of a blue curtain with a pattern on it", "shower curtain"),
    ("a large dinosaur statue with a big mouth", "add some snow",
     "a large dinosaur statue with a big mouth in snow", "triceratops"),
    ("a bug on the hood of a car", "on Mars", "a bug on the hood of a car on Mars", "walking stick"),
    ("a woman wearing a black jacket next to a vending machine", "change the jacket to a cape",
     "a woman wearing a black cape next to a vending machine", "vending machine"),
    ("a brown and tan pitcher with a handle on a table", "Make it look like an old photograph",
     "an old photograph of a brown and tan pitcher with a handle on a table", "pitcher"),
    ("a metal gate with a shadow on it", "as if it was a painting",
     "a painting of a metal gate with a shadow on it", "turnstile"),
    ("a green jeep parked in front of a white building", "make the jeep red",
     "a red jeep parked in front of a white building", "jeep"),
)


@dataclass(frozen=True)
class Instruction:
    text: str
    source: str = "manual"  # "manual" or "generated"
    category: Optional[str] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("instruction text must be non-empty")
        if self.source not in ("manual", "generated"):
            raise ValueError(f"unknown instruction source {self.source!r}")


def builtin_prompts() -> list[Instruction]:
    """The four general-purpose edits applied to every image."""
    return [Instruction(text, "manual") for text in BUILTIN_PROMPTS]


def _record(input_: str, edit: str, output: str, category: str, query: bool = False) -> str:
    if query:
        fields = {"input": input_, "category": category, "edit": "", "output": ""}
    else:
        fields = {"input": input_, "edit": edit, "output": output, "category": category}
    return json.dumps(fields, ensure_ascii=False)


@dataclass
class PromptTemplate:
    """Guidelines, few-shot records and the query block sent to the language model.

    ``extra_examples`` holds user-supplied records appended after the built-in
    ones; ``num_examples`` truncates the combined list.
    """

    intro: str = GUIDELINE_SENTENCE
    guidelines: tuple[str, ...] = GUIDELINES
    examples: tuple[tuple[str, str, str, str], ...] = FEW_SHOT_EXAMPLES
    extra_examples: list[tuple[str, str, str, str]] = field(default_factory=list)
    num_examples: Optional[int] = None

    def __post_init__(self):
        if "without altering the inherent nature or category of objects within the image" not in self.intro:
            raise ValueError("template intro must keep the category-preservation rule")

    @property
    def shots(self) -> list[tuple[str, str, str, str]]:
        shots = list(self.examples) + list(self.extra_examples)
        return shots if self.num_examples is None else shots[: self.num_examples]

    def render(self, caption: str, category: str) -> str:
        lines = [self.intro, "", "Guidelines:"]
        lines += [f"{i}. {rule}" for i, rule in enumerate(self.guidelines, 1)]
        lines += ["", "Here are some examples:", ""]
        lines += [_record(*shot) for shot in self.shots]
        lines += ["", "Please write edits for the following samples:", ""]
        lines.append(_record(caption, "", "", category, query=True))
        return "\n".join(lines)


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class Captioner(Protocol):
    def caption(self, image) -> str: ...


def with_retries(fn: Callable[[], str], attempts: int = 3, base_delay: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep) -> str:
    """Call ``fn`` up to ``attempts`` times with exponential backoff on transport failures."""
    last = None
    for attempt in range(attempts):
        try:
            return fn()
        except (OSError, TransportError) as exc:  # requests' errors subclass OSError
            last = exc
            log.warning("request failed (attempt %d/%d): %s", attempt + 1, attempts, exc)
            if attempt + 1 < attempts:
                sleep(base_delay * 2**attempt)
    raise TransportError(f"giving up after {attempts} attempts: {last}") from last


def post_json(endpoint: str, payload: dict, api_key_env: str, timeout: float) -> dict:
    """POST JSON with an optional bearer key from the environment.

    Server errors and 429 raise :class:`TransportError` (retried by
    :func:`with_retries`); other 4xx raise :class:`RequestRejected` (not retried).
    """
    import requests

    headers = {"Content-Type": "application/json"}
    key = os.environ.get(api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    resp = requests.post(endpoint, json=payload, headers=headers, timeout=timeout)
    if resp.status_code >= 500 or resp.status_code == 429:
        raise TransportError(f"HTTP {resp.status_code} from {endpoint}")
    if resp.status_code >= 400:
        raise RequestRejected(f"HTTP {resp.status_code} from {endpoint}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as exc:
        raise InstructionParseError(f"non-JSON response from {endpoint}") from exc


class ChatCompletionClient:
    """Minimal client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = LLM_KEY_ENV,
                 temperature: float = 0.0, timeout: float = 60.0, attempts: int = 3, base_delay: float = 0.5):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout = timeout
        self.attempts = attempts
        self.base_delay = base_delay

    def _post(self, payload: dict) -> dict:
        return post_json(self.endpoint, payload, self.api_key_env, self.timeout)

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        body = with_retries(lambda: self._post(payload), self.attempts, self.base_delay)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise InstructionParseError(f"unexpected completion payload: {body!r}") from exc


class HTTPCaptioner:
    """Posts a base64 PNG as ``{"image": ...}`` and reads ``{"caption": ...}`` back."""

    def __init__(self, endpoint: str, api_key_env: str = CAPTION_KEY_ENV, timeout: float = 60.0,
                 attempts: int = 3, base_delay: float = 0.5):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.attempts = attempts
        self.base_delay = base_delay

    def _post(self, payload: dict) -> dict:
        return post_json(self.endpoint, payload, self.api_key_env, self.timeout)

    def caption(self, image) -> str:
        from i2a.harness import to_png_bytes

        payload = {"image": base64.b64encode(to_png_bytes(image)).decode("ascii")}
        body = with_retries(lambda: self._post(payload), self.attempts, self.base_delay)
        return str(body.get("caption", ""))


def caption(image, captioner: Optional[Captioner], metadata_caption: Optional[str] = None) -> str:
    """Caption ``image``; a caption from dataset metadata short-circuits the captioner."""
    if metadata_caption:
        return metadata_caption
    if captioner is None:
        raise OfflineError("no caption in metadata and no captioner configured")
    text = captioner.caption(image).strip()
    if not text:
        raise InstructionParseError("captioner returned an empty caption")
    return text


_EDIT_FIELD = re.compile(r"[\"“”']edit[\"“”']\s*:\s*[\"“”](.*?)[\"“”]\s*[,}]", re.S)


def parse_edit(response: str) -> str:
    """Pull the edit out of a model response.

    Accepts a bare edit string or a record like
    ``{"input": ..., "edit": "...", ...}``, including curly quotes.
    """
    text = response.strip()
    if not text:
        raise InstructionParseError("empty response")
    if "{" in text:
        start, end = text.find("{"), text.rfind("}")
        candidate = text[start : end + 1]
        try:
            record = json.loads(candidate)
            if isinstance(record, dict) and "edit" in record:
                edit = str(record["edit"]).strip()
                if edit:
                    return edit
        except json.JSONDecodeError:
            pass
        match = _EDIT_FIELD.search(candidate)
        if match and match.group(1).strip():
            return match.group(1).strip()
        raise InstructionParseError(f"no edit field in response: {response!r}")
    edit = text.splitlines()[0].strip().strip("\"“”'").strip()
    if edit.lower().startswith("edit:"):
        edit = edit[5:].strip().strip("\"“”'")
    if not edit:
        raise InstructionParseError(f"no edit in response: {response!r}")
    return edit


def generate_instruction(caption_text: str, category: str, llm: LLMClient,
                         template: Optional[PromptTemplate] = None) -> Instruction:
    """One completion request turning a caption and category into an edit instruction."""
    if not caption_text or not caption_text.strip():
        raise ValueError("caption must be non-empty")
    template = template or PromptTemplate()
    prompt = template.render(caption_text.strip(), category)
    response = llm.complete(prompt)
    try:
        edit = parse_edit(response)
    except InstructionParseError:
        log.error("unparseable LLM response: %r", response)
        raise
    return Instruction(edit, "generated", category)


class InstructionCache:
    """JSON file mapping image-id to ``{"caption": ..., "instruction": ...}``.

    Writes are serialized and atomic (write-then-rename); concurrent writers to
    one id keep the last value.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._data = json.loads(self.path.read_text()) if self.path.exists() else {}

    def get(self, image_id: str) -> Optional[dict]:
        with self._lock:
            entry = self._data.get(image_id)
            return dict(entry) if entry else None

    def put(self, image_id: str, caption_text: str, instruction: str) -> None:
        with self._lock:
            self._data[image_id] = {"caption": caption_text, "instruction": instruction}
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_text(json.dumps(self._data, indent=2, sort_keys=True))
            os.replace(tmp, self.path)

    def __len__(self):
        with self._lock:
            return len(self._data)


class InstructionGenerator:
    """Caption and instruct images, with caching and an offline mode.

    In offline mode no client is ever called: captions must come from
    metadata and instructions from the cache.
    """

    def __init__(self, llm: Optional[LLMClient] = None, captioner: Optional[Captioner] = None,
                 template: Optional[PromptTemplate] = None, cache: Optional[InstructionCache] = None,
                 offline: bool = False, max_in_flight: int = 4):
        self.llm = llm
        self.captioner = captioner
        self.template = template or PromptTemplate()
        self.cache = cache
        self.offline = offline
        self.max_in_flight = max_in_flight

    def instruction_for(self, image_id: str, image=None, category: str = "",
                        metadata_caption: Optional[str] = None) -> Instruction:
        cached = self.cache.get(image_id) if self.cache else None
        if cached and cached.get("instruction"):
            return Instruction(cached["instruction"], "generated", category or None)
        if self.offline:
            raise OfflineError(f"no cached instruction for {image_id!r} in offline mode")
        if self.llm is None:
            raise OfflineError("no language model client configured")
        text = caption(image, self.captioner, metadata_caption)
        instruction = generate_instruction(text, category, self.llm, self.template)
        if self.cache is not None:
            self.cache.put(image_id, text, instruction.text)
        return instruction

    def generate_many(self, items: Iterable[dict]) -> dict[str, Instruction]:
        """``items`` carry ``image_id`` and optionally ``image``, ``category``, ``caption``."""
        items = list(items)

        def one(item):
            return item["image_id"], self.instruction_for(
                item["image_id"], item.get("image"), item.get("category") or "", item.get("caption"))

        with ThreadPoolExecutor(max_workers=max(1, self.max_in_flight)) as pool:
            return dict(pool.map(one, items))


def load_examples(path) -> list[tuple[str, str, str, str]]:
    """Read extra few-shot records (JSON lines with input/edit/output/category)."""
    shots = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            shots.append((rec["input"], rec["edit"], rec["output"], rec["category"]))
    return shots
