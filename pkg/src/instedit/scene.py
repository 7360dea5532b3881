"""Prompt parsing and object detection: the front half of the pipeline.

Default backends are deterministic and local: a grammar parser over the
closed caption language and two detectors (ground-truth replay for scenes
rendered from a spec, color-blob analysis for sampled images). Remote
backends speak a minimal JSON wire schema so a real LLM or open-vocabulary
detector can be dropped in.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field

import numpy as np
import requests
from PIL import Image
from scipy import ndimage

from .data import COLOR_RGB, SceneSpec, to_uint8
from .errors import AmbiguousMatchError, GrammarError, NoMatchError, RemoteError
from .geometry import BoundingBox
from .text import COLORS, COUNT_WORDS, singular, tokenize


@dataclass(frozen=True)
class ObjectDescriptor:
    """One object mention: noun, attributes, quantity, and its token span."""

    label: str
    attributes: tuple[str, ...]
    quantity: int
    token_span: tuple[int, int]  # [start, end) into the tokenized prompt

    def __post_init__(self):
        if self.quantity < 1:
            raise ValueError("quantity must be >= 1")
        if self.token_span[0] >= self.token_span[1]:
            raise ValueError("token span must be nonempty")

    @property
    def query(self) -> str:
        return " ".join([*self.attributes, self.label])


@dataclass(frozen=True)
class DetectedObject:
    descriptor: ObjectDescriptor
    instance_id: int
    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class InstanceSelection:
    """User selection: label, optional attributes, optional instance id."""

    label: str
    attributes: tuple[str, ...] = ()
    instance_id: int | None = None


def parse_prompt(prompt: str) -> list[ObjectDescriptor]:
    """Parse a caption-grammar prompt into object descriptors.

    Deterministic; raises GrammarError for anything outside the grammar.
    The empty prompt parses to an empty list.
    """
    words = tokenize(prompt)
    if not words:
        return []
    segments: list[list[tuple[int, str]]] = [[]]
    for idx, word in enumerate(words):
        if word == "and":
            if not segments[-1]:
                raise GrammarError(f"dangling 'and' in prompt: {prompt!r}")
            segments.append([])
        else:
            segments[-1].append((idx, word))
    if not segments[-1]:
        raise GrammarError(f"dangling 'and' in prompt: {prompt!r}")

    descriptors = []
    for segment in segments:
        if len(segment) != 3:
            text = " ".join(w for _, w in segment)
            raise GrammarError(f"expected '<count> <color> <shape>', got {text!r}")
        (_, count_word), (color_idx, color), (shape_idx, shape_word) = segment
        if count_word not in COUNT_WORDS:
            raise GrammarError(f"unknown count word: {count_word!r}")
        if color not in COLORS:
            raise GrammarError(f"unknown color: {color!r}")
        shape = singular(shape_word)
        if shape is None:
            raise GrammarError(f"unknown shape: {shape_word!r}")
        descriptors.append(
            ObjectDescriptor(
                label=shape,
                attributes=(color,),
                quantity=COUNT_WORDS[count_word],
                token_span=(color_idx, shape_idx + 1),
            )
        )
    return descriptors


def assign_instance_ids(
    descriptor: ObjectDescriptor,
    boxes: list[BoundingBox],
    confidences: list[float],
) -> list[DetectedObject]:
    """Order detections left-to-right by box center (ties by top) and id them."""
    order = sorted(
        range(len(boxes)),
        key=lambda i: (boxes[i].center[0], boxes[i].center[1], *boxes[i].as_list()),
    )
    return [
        DetectedObject(
            descriptor=descriptor,
            instance_id=rank,
            box=boxes[i],
            confidence=confidences[i],
        )
        for rank, i in enumerate(order)
    ]


class GroundTruthDetector:
    """Replays the stored boxes of a rendered synthetic scene."""

    kind = "local-groundtruth"

    def __init__(self, scene: SceneSpec):
        self.scene = scene

    def detect(
        self, image: np.ndarray, descriptors: list[ObjectDescriptor]
    ) -> list[DetectedObject]:
        detections: list[DetectedObject] = []
        for desc in descriptors:
            boxes = [
                o.box
                for o in self.scene.objects
                if o.shape == desc.label and o.color in desc.attributes
            ]
            detections.extend(assign_instance_ids(desc, boxes, [1.0] * len(boxes)))
        return detections


# fill ratio of the shape inside its own bounding box
_IDEAL_FILL = {"square": 1.0, "circle": float(np.pi / 4.0), "triangle": 0.5}


class BlobDetector:
    """Connected-component detector over the scene color palette.

    Pixels are classified to the nearest shape color (or background when
    too far from every shape color); per-color components are classified
    to a shape by their fill ratio inside the tight bounding box.
    """

    kind = "local-blob"

    def __init__(
        self,
        color_threshold: float = 0.45,
        min_area: int = 12,
        min_side: int = 3,
    ):
        self.color_threshold = color_threshold
        self.min_area = min_area
        self.min_side = min_side

    def _components(self, image: np.ndarray):
        """Yield (color, shape, box, confidence) for every accepted blob."""
        rgb = np.clip((image.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)
        h, w = rgb.shape[:2]
        palette = np.array([COLOR_RGB[c] for c in COLORS])  # (K, 3)
        dists = np.linalg.norm(rgb[:, :, None, :] - palette[None, None], axis=-1)
        nearest = dists.argmin(axis=2)
        near_dist = dists.min(axis=2)
        is_shape = near_dist <= self.color_threshold

        eightconn = np.ones((3, 3), dtype=bool)
        for ci, color in enumerate(COLORS):
            mask = is_shape & (nearest == ci)
            labels, count = ndimage.label(mask, structure=eightconn)
            for comp in range(1, count + 1):
                comp_mask = labels == comp
                area = int(comp_mask.sum())
                if area < self.min_area:
                    continue
                rows = np.nonzero(comp_mask.any(axis=1))[0]
                cols = np.nonzero(comp_mask.any(axis=0))[0]
                r0, r1 = int(rows[0]), int(rows[-1])
                c0, c1 = int(cols[0]), int(cols[-1])
                if (r1 - r0 + 1) < self.min_side or (c1 - c0 + 1) < self.min_side:
                    continue
                box = BoundingBox(c0 / w, r0 / h, (c1 + 1) / w, (r1 + 1) / h)
                fill = area / ((r1 - r0 + 1) * (c1 - c0 + 1))
                shape = min(_IDEAL_FILL, key=lambda s: abs(fill - _IDEAL_FILL[s]))
                color_conf = 1.0 - float(near_dist[comp_mask].mean()) / self.color_threshold
                shape_conf = 1.0 - min(1.0, abs(fill - _IDEAL_FILL[shape]) / 0.25)
                conf = float(np.clip(0.5 * color_conf + 0.5 * shape_conf, 0.0, 1.0))
                yield color, shape, box, conf

    def detect(
        self, image: np.ndarray, descriptors: list[ObjectDescriptor]
    ) -> list[DetectedObject]:
        blobs = list(self._components(image))
        detections: list[DetectedObject] = []
        for desc in descriptors:
            candidates = [
                (box, conf)
                for color, shape, box, conf in blobs
                if shape == desc.label and color in desc.attributes
            ]
            candidates.sort(key=lambda bc: -bc[1])
            chosen = candidates[: desc.quantity]
            detections.extend(
                assign_instance_ids(
                    desc, [b for b, _ in chosen], [c for _, c in chosen]
                )
            )
        return detections


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    timeout: float = 10.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("remote timeout must be positive")


class RemoteParser:
    """Client for a remote structured-extraction service (an LLM stand-in).

    Wire schema: request ``{"prompt": str}``; response
    ``{"objects": [{"label", "attributes", "quantity"}]}``. Token spans
    are recovered locally by locating each ``attributes + label`` word
    sequence in the tokenized prompt.
    """

    kind = "remote"

    def __init__(self, config: RemoteConfig):
        self.config = config

    def parse(self, prompt: str) -> list[ObjectDescriptor]:
        try:
            resp = requests.post(
                self.config.endpoint,
                json={"prompt": prompt},
                timeout=self.config.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise RemoteError(f"remote parser call failed: {exc}") from exc
        except ValueError as exc:
            raise RemoteError(f"remote parser returned invalid JSON: {exc}") from exc
        if not isinstance(payload, dict) or "objects" not in payload:
            raise RemoteError(f"malformed parser reply: {payload!r}")

        words = tokenize(prompt)
        descriptors = []
        for obj in payload["objects"]:
            try:
                label = obj["label"]
                attributes = tuple(obj["attributes"])
                quantity = int(obj["quantity"])
            except (KeyError, TypeError) as exc:
                raise RemoteError(f"malformed parser object: {obj!r}") from exc
            span = _find_span(words, [*attributes, label])
            if span is None:
                raise RemoteError(
                    f"cannot map remote object {obj!r} back to prompt tokens"
                )
            descriptors.append(
                ObjectDescriptor(
                    label=label,
                    attributes=attributes,
                    quantity=quantity,
                    token_span=span,
                )
            )
        return descriptors


def _find_span(words: list[str], target: list[str]) -> tuple[int, int] | None:
    """First occurrence of the word sequence, matching shapes by singular form."""
    n = len(target)
    for start in range(len(words) - n + 1):
        window = words[start : start + n]
        ok = all(
            w == t or singular(w) == t for w, t in zip(window, target)
        )
        if ok:
            return (start, start + n)
    return None


class RemoteDetector:
    """Client for a remote open-vocabulary detector.

    Wire schema: request ``{"image": base64 PNG, "queries": [str]}``;
    response ``{"detections": [{"query", "box": [x1,y1,x2,y2], "score"}]}``
    with normalized boxes.
    """

    kind = "remote"

    def __init__(self, config: RemoteConfig):
        self.config = config

    def detect(
        self, image: np.ndarray, descriptors: list[ObjectDescriptor]
    ) -> list[DetectedObject]:
        buf = io.BytesIO()
        Image.fromarray(to_uint8(image)).save(buf, format="PNG")
        request = {
            "image": base64.b64encode(buf.getvalue()).decode("ascii"),
            "queries": [d.query for d in descriptors],
        }
        try:
            resp = requests.post(
                self.config.endpoint, json=request, timeout=self.config.timeout
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise RemoteError(f"remote detector call failed: {exc}") from exc
        except ValueError as exc:
            raise RemoteError(f"remote detector returned invalid JSON: {exc}") from exc
        if not isinstance(payload, dict) or "detections" not in payload:
            raise RemoteError(f"malformed detector reply: {payload!r}")

        by_query: dict[str, list[tuple[BoundingBox, float]]] = {}
        for det in payload["detections"]:
            try:
                box = BoundingBox(*[float(v) for v in det["box"]])
                by_query.setdefault(det["query"], []).append(
                    (box, float(det["score"]))
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise RemoteError(f"malformed detection: {det!r}") from exc

        detections: list[DetectedObject] = []
        for desc in descriptors:
            found = by_query.get(desc.query, [])
            found.sort(key=lambda bs: -bs[1])
            chosen = found[: desc.quantity]
            detections.extend(
                assign_instance_ids(
                    desc, [b for b, _ in chosen], [min(1.0, max(0.0, s)) for _, s in chosen]
                )
            )
        return detections


def match_instances(
    detections: list[DetectedObject], selection: InstanceSelection
) -> DetectedObject:
    """Resolve a user selection to exactly one detection.

    Filters by label and attributes, then disambiguates by instance id.
    Raises NoMatchError / AmbiguousMatchError accordingly.
    """
    if not detections:
        raise NoMatchError("no detections to select from")
    wanted = set(selection.attributes)
    matches = [
        d
        for d in detections
        if d.descriptor.label == selection.label
        and wanted.issubset(set(d.descriptor.attributes))
    ]
    if not matches:
        raise NoMatchError(f"no detection matches {selection!r}")
    if selection.instance_id is not None:
        for d in matches:
            if d.instance_id == selection.instance_id:
                return d
        raise NoMatchError(
            f"no instance with id {selection.instance_id} for {selection.label!r}"
        )
    if len(matches) > 1:
        raise AmbiguousMatchError(
            f"{len(matches)} instances match {selection!r}; specify an id"
        )
    return matches[0]
