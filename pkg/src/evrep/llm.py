"""Uniform captioning/recognition interface over LLM backends.

Three backends share one request surface:

  * ``MockBackend`` -- deterministic, in-process. Captions describe the
    dominant of nine 3x3 grid cells by mean intensity plus the dominant
    color channel (e.g. "bright region center, red dominant"); an
    all-zero image yields "uniform dark image". Recognition prompts are
    answered with the class whose name hash is nearest the image hash.
  * ``ReplayBackend`` -- serves recorded fixtures keyed by
    (prompt SHA-256, image SHA-256); see ``RecordingBackend`` for the
    capture side.
  * ``HttpBackend`` -- OpenAI-style ``POST {endpoint}/chat/completions``
    with the image inlined as a base64 PNG data URL. Retries 429s with
    exponential backoff; all calls are capped by a concurrency semaphore.

Backends never receive parameter updates; they are read-only oracles.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import BackendError, HTTPError, RateLimited, ReplayMiss, Timeout
from .representation import quantize_u8

CAPTION_PROMPT = "Describe the main object in this image in one sentence."
_RECOGNITION_PREFIX = (
    "Which one of the following categories best matches the image? "
    "Answer with the category name only: "
)

_GRID_ROWS = ("top", "middle", "bottom")
_GRID_COLS = ("left", "center", "right")


@dataclass
class CaptionRequest:
    image: object  # RepImage, TencodeFrame, or (H, W, 3) array in [0, 1]
    prompt: str = CAPTION_PROMPT
    max_tokens: int = 64
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass
class LLMResponse:
    text: str
    backend_id: str
    latency_ms: float = 0.0
    token_usage: dict | None = None


@dataclass
class BackendConfig:
    kind: str = "mock"  # mock | replay | http
    endpoint: str = ""
    model: str = ""
    auth_env: str = "EVREP_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 3
    concurrency: int = 4
    fixture_path: str = ""
    record_path: str = ""   # capture fixture while using the http backend
    image_resize: int = 0   # if > 0, resize to (n, n) before upload

    def __post_init__(self):
        if self.kind not in ("mock", "replay", "http"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint and self.model):
            raise ValueError("http backend requires endpoint and model")
        if self.kind == "replay" and not self.fixture_path:
            raise ValueError("replay backend requires fixture_path")


def image_sha256(image) -> str:
    """Content hash over the 8-bit quantized pixels plus dimensions."""
    arr = quantize_u8(image)
    h = hashlib.sha256()
    h.update(f"{arr.shape[0]}x{arr.shape[1]}:".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode()).hexdigest()


def recognition_prompt(class_list) -> str:
    return _RECOGNITION_PREFIX + ", ".join(class_list) + "."


def caption(backend, request: CaptionRequest) -> LLMResponse:
    return backend.caption(request)


def recognize(backend, image, class_list, max_tokens: int = 32) -> LLMResponse:
    """Send the recognition prompt for ``class_list`` along with the image."""
    class_list = list(class_list)
    if not class_list:
        raise ValueError("class_list must be nonempty")
    req = CaptionRequest(image=image, prompt=recognition_prompt(class_list), max_tokens=max_tokens)
    return caption(backend, req)


def parse_prediction(text: str, class_list) -> str | None:
    """Earliest case-insensitive whole-word class mention, or None.

    Ties at the same text position are broken by class_list order.
    """
    low = text.lower()
    best: tuple[int, int, str] | None = None
    for idx, name in enumerate(class_list):
        m = re.search(r"\b" + re.escape(name.lower()) + r"\b", low)
        if m is not None and (best is None or (m.start(), idx) < best[:2]):
            best = (m.start(), idx, name)
    return best[2] if best else None


class MockBackend:
    """Pure function of image statistics; useful for desk-scale training
    and determinism tests. Counts its calls so tests can assert on usage."""

    backend_id = "mock"

    def __init__(self):
        self.call_count = 0

    def caption(self, request: CaptionRequest) -> LLMResponse:
        self.call_count += 1
        if request.prompt.startswith(_RECOGNITION_PREFIX):
            text = self._recognize_text(request)
        else:
            text = self._caption_text(request)
        return LLMResponse(text=text, backend_id=self.backend_id)

    @staticmethod
    def _pixels(request) -> np.ndarray:
        image = request.image
        return np.asarray(image.pixels if hasattr(image, "pixels") else image, dtype=np.float64)

    def _caption_text(self, request) -> str:
        pixels = self._pixels(request)
        if pixels.max() == 0:
            return "uniform dark image"
        cell_means = np.array(
            [
                [np.mean(rows_cells) for rows_cells in np.array_split(band, 3, axis=1)]
                for band in np.array_split(pixels, 3, axis=0)
            ]
        )
        r, c = np.unravel_index(int(np.argmax(cell_means)), cell_means.shape)
        if (r, c) == (1, 1):
            cell = "center"
        else:
            cell = f"{_GRID_ROWS[r]} {_GRID_COLS[c]}"
        channel = ("red", "green", "blue")[int(np.argmax(pixels.mean(axis=(0, 1))))]
        return f"bright region {cell}, {channel} dominant"

    def _recognize_text(self, request) -> str:
        listing = request.prompt[len(_RECOGNITION_PREFIX):].rstrip(".")
        classes = [c.strip() for c in listing.split(",")]
        target = int.from_bytes(
            hashlib.sha256(bytes.fromhex(image_sha256(request.image))).digest()[:8], "big"
        )
        def distance(name):
            h = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")
            return h ^ target
        return min(classes, key=distance)


class ReplayBackend:
    """Replays recorded responses; missing keys raise ReplayMiss."""

    backend_id = "replay"

    def __init__(self, fixture_path: str | Path):
        self.fixture_path = str(fixture_path)
        self._responses: dict[tuple[str, str], str] = {}
        for line in Path(fixture_path).read_text().splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            self._responses[(obj["prompt_sha256"], obj["image_sha256"])] = obj["text"]

    def caption(self, request: CaptionRequest) -> LLMResponse:
        key = (prompt_sha256(request.prompt), image_sha256(request.image))
        if key not in self._responses:
            raise ReplayMiss(f"no fixture for prompt {key[0][:12]}.. / image {key[1][:12]}..")
        return LLMResponse(text=self._responses[key], backend_id=self.backend_id)


class RecordingBackend:
    """Delegates to an inner backend and appends fixture lines as it goes."""

    def __init__(self, inner, record_path: str | Path):
        self.inner = inner
        self.record_path = str(record_path)
        self.backend_id = f"record({inner.backend_id})"

    def caption(self, request: CaptionRequest) -> LLMResponse:
        response = self.inner.caption(request)
        entry = {
            "prompt_sha256": prompt_sha256(request.prompt),
            "image_sha256": image_sha256(request.image),
            "text": response.text,
        }
        with open(self.record_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
        return response


class HttpBackend:
    """OpenAI-compatible chat-completions client with image payloads."""

    def __init__(self, config: BackendConfig, session=None, sleep=time.sleep):
        self.config = config
        self.backend_id = f"http({config.model})"
        self._session = session or requests.Session()
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(config.concurrency)

    def _image_data_url(self, image) -> str:
        arr = quantize_u8(image)
        img = Image.fromarray(arr, mode="RGB")
        if self.config.image_resize > 0:
            img = img.resize((self.config.image_resize,) * 2, Image.BILINEAR)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.auth_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def caption(self, request: CaptionRequest) -> LLMResponse:
        payload = {
            "model": self.config.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.prompt},
                        {
                            "type": "image_url",
                            "image_url": {"url": self._image_data_url(request.image)},
                        },
                    ],
                }
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        start = time.perf_counter()
        with self._semaphore:
            for attempt in range(self.config.max_retries + 1):
                try:
                    resp = self._session.post(
                        url, json=payload, headers=self._headers(), timeout=self.config.timeout_s
                    )
                except requests.Timeout as e:
                    raise Timeout(f"{url}: {e}") from e
                except requests.RequestException as e:
                    raise BackendError(f"{url}: {e}") from e
                if resp.status_code == 429:
                    if attempt < self.config.max_retries:
                        self._sleep(0.5 * 2**attempt)
                        continue
                    raise RateLimited(f"{url}: still rate limited after {attempt} retries")
                if resp.status_code != 200:
                    raise HTTPError(resp.status_code, f"{url}: {resp.text[:200]}")
                data = resp.json()
                break
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"{url}: malformed completion payload: {e}") from e
        latency_ms = (time.perf_counter() - start) * 1000.0
        return LLMResponse(
            text=text,
            backend_id=self.backend_id,
            latency_ms=latency_ms,
            token_usage=data.get("usage"),
        )


def build_backend(config: BackendConfig):
    if config.kind == "mock":
        backend = MockBackend()
    elif config.kind == "replay":
        backend = ReplayBackend(config.fixture_path)
    else:
        backend = HttpBackend(config)
    if config.record_path:
        backend = RecordingBackend(backend, config.record_path)
    return backend
