"""Class-specific inference: one generate call per (image, category).

The model is anything implementing :class:`ModelClient`. Two ship here: an
HTTP client for a remote text-generation endpoint and a seeded simulator that
reproduces recall truncation (a model that stops emitting boxes early) so the
whole pipeline can run offline.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from . import rng as rngs
from .detmodel import BBox, CategorySet, Detection, DetectionDataset, DetkitError, ImageRecord, results_to_coco
from .instructgen import DEFAULT_TEMPLATE, PLACEHOLDER, build_prompt
from .tokencodec import TokenCodecConfig, encode_answer, parse_answer

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "DETKIT_ENDPOINT"


class ModelRequestError(DetkitError):
    pass


class ImageInferenceError(DetkitError):
    pass


class ModelClient(Protocol):
    def generate(self, image: ImageRecord, prompt: str, sampling: Mapping[str, Any] | None = None) -> str: ...


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    timeout: float = 60.0
    retries: int = 2
    sampling: dict = field(default_factory=dict)
    image_root: str | None = None  # when set, image bytes are sent base64-encoded
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")

    @classmethod
    def from_env(cls, base_url: str | None = None, **kw) -> EndpointConfig:
        url = os.environ.get(ENDPOINT_ENV) or base_url
        if not url:
            raise ValueError(f"no endpoint URL given and {ENDPOINT_ENV} is unset")
        return cls(url, **kw)


class HttpModelClient:
    """POSTs ``{image, prompt, sampling}`` as JSON and reads back ``{text}``."""

    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg

    def _image_field(self, image: ImageRecord) -> str:
        if self.cfg.image_root is None:
            return image.file_name
        return base64.b64encode((Path(self.cfg.image_root) / image.file_name).read_bytes()).decode("ascii")

    def generate(self, image: ImageRecord, prompt: str, sampling: Mapping[str, Any] | None = None) -> str:
        body = json.dumps(
            {"image": self._image_field(image), "prompt": prompt, "sampling": dict(sampling or self.cfg.sampling)}
        ).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.cfg.retries + 1):
            if attempt:
                time.sleep(min(self.cfg.backoff * 2 ** (attempt - 1), 10.0))
            req = urllib.request.Request(
                self.cfg.base_url, data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            try:
                with urllib.request.urlopen(req, timeout=self.cfg.timeout) as resp:
                    doc = json.loads(resp.read().decode("utf-8"))
                text = doc["text"]
                if not isinstance(text, str):
                    raise TypeError("'text' is not a string")
                return text
            except urllib.error.HTTPError as exc:
                last = exc
                if exc.code < 500:
                    break
            except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, TypeError) as exc:
                last = exc
            logger.debug("request for image %s failed (attempt %d): %s", image.image_id, attempt + 1, last)
        raise ModelRequestError(f"image {image.image_id}: {last!r}")


@dataclass(frozen=True)
class SimModelConfig:
    seed: int = 0
    proposal_cap: int = 100
    center_jitter_sigma: float = 0.0
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    score_noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        if self.proposal_cap < 0:
            raise ValueError("proposal_cap must be >= 0")
        if self.center_jitter_sigma < 0 or self.score_noise_sigma < 0 or self.false_positive_rate < 0:
            raise ValueError("noise parameters must be >= 0")

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> SimModelConfig:
        known = {k: m[k] for k in cls.__dataclass_fields__ if k in m}
        unknown = set(m) - set(known)
        if unknown:
            raise ValueError(f"unknown simulator keys: {sorted(unknown)}")
        return cls(**known)


def simulate_response(
    gt: Sequence,
    image: ImageRecord,
    category: int,
    cfg: SimModelConfig,
    rng: np.random.Generator,
    codec: TokenCodecConfig | None = None,
    category_share: float = 1.0,
) -> str:
    """Answer text a noisy, truncating detector would give for one category query.

    GT boxes of ``category`` are emitted in random order, each dropped with
    ``miss_rate`` and jittered by gaussian noise (sigma relative to box size);
    Poisson(``false_positive_rate * category_share``) low-scored spurious boxes
    follow; the sequence is cut at ``proposal_cap``. All random draws happen
    before the cut, so a larger cap only extends the list.
    """
    codec = codec or TokenCodecConfig()
    W, H = float(image.width), float(image.height)
    boxes = [a.bbox for a in gt if a.category_id == category and not getattr(a, "iscrowd", False)]
    out: list[Detection] = []
    for i in rng.permutation(len(boxes)):
        b = boxes[i]
        miss = rng.random() < cfg.miss_rate
        jx, jy, jw, jh = rng.normal(0.0, 1.0, size=4) * cfg.center_jitter_sigma
        s = 1.0 - abs(rng.normal(0.0, 1.0)) * cfg.score_noise_sigma
        if miss:
            continue
        cx = (b.x1 + b.x2) / 2 + jx * b.width
        cy = (b.y1 + b.y2) / 2 + jy * b.height
        w = b.width * max(1.0 + jw, 0.05)
        h = b.height * max(1.0 + jh, 0.05)
        box = BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clamp(W, H) if cfg.center_jitter_sigma else b
        if not box.is_degenerate:
            out.append(Detection(image.image_id, category, box, min(max(s, 0.0), 1.0)))
    for _ in range(rng.poisson(cfg.false_positive_rate * category_share)):
        fw, fh = rng.uniform(0.05, 0.5, size=2)
        fx, fy = rng.uniform(0.0, 1.0, size=2)
        s = rng.uniform(0.05, 0.5) + rng.normal(0.0, 1.0) * cfg.score_noise_sigma
        box = BBox(fx * W, fy * H, (fx + fw) * W, (fy + fh) * H).clamp(W, H)
        if not box.is_degenerate:
            out.append(Detection(image.image_id, category, box, min(max(s, 0.0), 1.0)))
    return encode_answer(out[: cfg.proposal_cap], image, codec)


class SimulatedModelClient:
    """Offline stand-in for a model; answers from the dataset's own ground truth.

    The category is recovered from the prompt, and every (image, category)
    query draws from its own seeded stream, so answers do not depend on call
    order or concurrency.
    """

    def __init__(
        self,
        ds: DetectionDataset,
        cfg: SimModelConfig,
        codec: TokenCodecConfig | None = None,
        template: str = DEFAULT_TEMPLATE,
    ):
        self.ds = ds
        self.cfg = cfg
        self.codec = codec or TokenCodecConfig()
        head, tail = template.split(PLACEHOLDER)
        self._prompt = re.compile(re.escape(head) + "(.+)" + re.escape(tail) + r"\Z", re.S)
        self.calls: Counter[int] = Counter()
        self._lock = threading.Lock()

    def generate(self, image: ImageRecord, prompt: str, sampling: Mapping[str, Any] | None = None) -> str:
        with self._lock:
            self.calls[image.image_id] += 1
        m = self._prompt.match(prompt)
        if not m:
            raise ModelRequestError(f"prompt does not follow the template: {prompt!r}")
        cats = self.ds.categories
        category = cats.id_of(m.group(1))
        r = rngs.keyed_rng(self.cfg.seed, rngs.SIMULATE, image.image_id, category)
        return simulate_response(
            self.ds.image_annotations(image.image_id), image, category, self.cfg, r, self.codec, 1.0 / len(cats)
        )


@dataclass(frozen=True)
class InferenceConfig:
    prompt_template: str = DEFAULT_TEMPLATE
    sampling: dict = field(default_factory=dict)


@dataclass
class ImageResult:
    image_id: int
    detections: list[Detection]
    requests: int = 0
    parse_errors: int = 0
    failed_categories: list[int] = field(default_factory=list)
    latency_s: float = 0.0
    error: str | None = None


def detect_image(
    client: ModelClient,
    image: ImageRecord,
    categories: CategorySet,
    codec: TokenCodecConfig,
    cfg: InferenceConfig | None = None,
) -> ImageResult:
    """Query every category once and union the parsed boxes (category order, then box order)."""
    cfg = cfg or InferenceConfig()
    res = ImageResult(image.image_id, [])
    t0 = time.perf_counter()
    for cat_id, name in categories:
        res.requests += 1
        try:
            text = client.generate(image, build_prompt(name, cfg.prompt_template), cfg.sampling)
        except (ModelRequestError, OSError) as exc:
            logger.warning("image %s category %s failed: %s", image.image_id, name, exc)
            res.failed_categories.append(cat_id)
            continue
        outcome = parse_answer(text, image, cat_id, codec)
        res.detections += outcome.detections
        res.parse_errors += len(outcome.parse_errors)
    res.latency_s = time.perf_counter() - t0
    if len(categories) and len(res.failed_categories) == len(categories):
        raise ImageInferenceError(f"image {image.image_id}: all {len(categories)} category queries failed")
    return res


@dataclass
class RunReport:
    images: list[ImageResult]

    @property
    def predictions(self) -> list[Detection]:
        return [d for r in self.images for d in r.detections]

    @property
    def failed_images(self) -> list[int]:
        return [r.image_id for r in self.images if r.error is not None]

    @property
    def partial_failure(self) -> bool:
        return any(r.error is not None or r.failed_categories for r in self.images)

    def summary(self) -> dict:
        lat = [r.latency_s for r in self.images]
        return {
            "images": len(self.images),
            "requests": sum(r.requests for r in self.images),
            "predictions": sum(len(r.detections) for r in self.images),
            "parse_errors": sum(r.parse_errors for r in self.images),
            "failed_images": self.failed_images,
            "failed_categories": {str(r.image_id): r.failed_categories for r in self.images if r.failed_categories},
            "latency_s": {
                "mean": float(np.mean(lat)) if lat else 0.0,
                "max": float(max(lat)) if lat else 0.0,
                "per_image": {str(r.image_id): round(r.latency_s, 6) for r in self.images},
            },
        }

    def predictions_json(self) -> str:
        return json.dumps(results_to_coco(self.predictions)) + "\n"

    def write(self, out_dir: str | Path, predictions_name: str = "predictions.json") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / predictions_name).write_text(self.predictions_json())
        (out / "run_report.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return out / predictions_name


def run_dataset(
    client: ModelClient,
    ds: DetectionDataset,
    codec: TokenCodecConfig,
    cfg: InferenceConfig | None = None,
    parallelism: int = 1,
) -> RunReport:
    """Run :func:`detect_image` over every image with up to ``parallelism`` in flight.

    Results are assembled in dataset image order, so output bytes do not
    depend on ``parallelism``. A failed image is recorded, not raised.
    """
    cfg = cfg or InferenceConfig()

    def one(image: ImageRecord) -> ImageResult:
        try:
            return detect_image(client, image, ds.categories, codec, cfg)
        except ImageInferenceError as exc:
            return ImageResult(image.image_id, [], len(ds.categories), 0, ds.categories.ids, 0.0, str(exc))

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            results = list(pool.map(one, ds.images))
    else:
        results = [one(im) for im in ds.images]
    return RunReport(results)

