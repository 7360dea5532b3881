import base64
import io
import json
import random
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from instedit.data import SceneObject, SceneSpec, render_scene, to_uint8
from instedit.errors import AmbiguousMatchError, GrammarError, NoMatchError, RemoteError
from instedit.geometry import BoundingBox
from instedit.scene import (
    BlobDetector,
    DetectedObject,
    GroundTruthDetector,
    InstanceSelection,
    ObjectDescriptor,
    RemoteConfig,
    RemoteDetector,
    RemoteParser,
    assign_instance_ids,
    match_instances,
    parse_prompt,
)

from .mock_remote import MockRemoteServer

FIXTURES = Path(__file__).parent / "fixtures"


class TestParsePrompt:
    def test_empty_prompt(self):
        assert parse_prompt("") == []

    def test_two_objects_with_spans(self):
        result = parse_prompt("a red circle and a blue square")
        assert [(d.label, list(d.attributes), d.quantity) for d in result] == [
            ("circle", ["red"], 1),
            ("square", ["blue"], 1),
        ]
        # spans cover "red circle" / "blue square" in token indices
        assert result[0].token_span == (1, 3)
        assert result[1].token_span == (5, 7)

    def test_quantity_word(self):
        result = parse_prompt("two green triangles")
        assert [(d.label, list(d.attributes), d.quantity) for d in result] == [
            ("triangle", ["green"], 2)
        ]
        assert result[0].token_span == (1, 3)

    def test_three_segments(self):
        result = parse_prompt("a red circle and two blue squares and a yellow triangle")
        assert [d.label for d in result] == ["circle", "square", "triangle"]
        assert [d.quantity for d in result] == [1, 2, 1]

    @pytest.mark.parametrize(
        "prompt",
        [
            "red circle",  # missing count word
            "a crimson circle",  # unknown color
            "a red blob",  # unknown shape
            "a red circle and",  # dangling and
            "and a red circle",
            "a red circle a blue square",  # missing and
            "totally free text",
        ],
    )
    def test_grammar_errors(self, prompt):
        with pytest.raises(GrammarError):
            parse_prompt(prompt)

    def test_case_insensitive(self):
        assert parse_prompt("A Red Circle")[0].label == "circle"


def _scene_with(*objs) -> SceneSpec:
    return SceneSpec(
        objects=tuple(SceneObject(shape=s, color=c, box=BoundingBox(*b)) for s, c, b in objs)
    )


class TestGroundTruthDetector:
    def test_replays_stored_boxes(self):
        spec = _scene_with(
            ("circle", "red", (0.1, 0.1, 0.4, 0.4)),
            ("square", "blue", (0.6, 0.55, 0.9, 0.85)),
        )
        image = render_scene(spec)
        detections = GroundTruthDetector(spec).detect(image, parse_prompt("a red circle and a blue square"))
        assert len(detections) == 2
        for d in detections:
            assert d.confidence == 1.0
        assert detections[0].box == spec.objects[0].box
        assert detections[1].box == spec.objects[1].box

    def test_idempotent(self):
        spec = _scene_with(("circle", "red", (0.1, 0.1, 0.4, 0.4)))
        det = GroundTruthDetector(spec)
        descriptors = parse_prompt("a red circle")
        image = render_scene(spec)
        first = det.detect(image, descriptors)
        second = det.detect(image, descriptors)
        assert first == second


class TestBlobDetector:
    def test_blank_image_finds_nothing(self):
        image = render_scene(SceneSpec(objects=()))
        detections = BlobDetector().detect(image, parse_prompt("a red circle"))
        assert detections == []

    @pytest.mark.parametrize("shape", ["circle", "square", "triangle"])
    @pytest.mark.parametrize("color", ["red", "green", "blue", "yellow"])
    def test_render_then_detect_iou(self, shape, color):
        spec = _scene_with((shape, color, (0.2, 0.3, 0.55, 0.7)))
        image = render_scene(spec)
        detections = BlobDetector().detect(image, parse_prompt(f"a {color} {shape}"))
        assert len(detections) == 1
        assert detections[0].box.iou(spec.objects[0].box) >= 0.7

    def test_shape_classification_separates_classes(self):
        spec = _scene_with(
            ("circle", "red", (0.05, 0.05, 0.35, 0.35)),
            ("square", "red", (0.4, 0.4, 0.7, 0.7)),
            ("triangle", "red", (0.05, 0.6, 0.35, 0.9)),
        )
        image = render_scene(spec)
        for prompt, box in [
            ("a red circle", spec.objects[0].box),
            ("a red square", spec.objects[1].box),
            ("a red triangle", spec.objects[2].box),
        ]:
            detections = BlobDetector().detect(image, parse_prompt(prompt))
            assert len(detections) == 1, prompt
            assert detections[0].box.iou(box) >= 0.7

    def test_instance_ids_left_to_right(self):
        spec = _scene_with(
            ("circle", "red", (0.55, 0.2, 0.8, 0.45)),
            ("circle", "red", (0.05, 0.4, 0.3, 0.65)),
            ("circle", "red", (0.35, 0.7, 0.5, 0.95)),
        )
        image = render_scene(spec)
        detections = BlobDetector().detect(image, parse_prompt("three red circles"))
        assert len(detections) == 3
        xs = [d.box.center[0] for d in sorted(detections, key=lambda d: d.instance_id)]
        assert xs == sorted(xs)

    def test_never_raises_on_missing_objects(self):
        spec = _scene_with(("circle", "red", (0.1, 0.1, 0.4, 0.4)))
        image = render_scene(spec)
        detections = BlobDetector().detect(image, parse_prompt("a blue square"))
        assert detections == []


class TestInstanceOrdering:
    def test_permutation_invariance(self):
        boxes = [
            BoundingBox(0.5, 0.1, 0.7, 0.3),
            BoundingBox(0.1, 0.5, 0.3, 0.7),
            BoundingBox(0.7, 0.6, 0.95, 0.9),
        ]
        desc = ObjectDescriptor("circle", ("red",), 3, (1, 3))
        reference = {
            (d.box.as_list()[0], d.instance_id)
            for d in assign_instance_ids(desc, boxes, [1.0] * 3)
        }
        for seed in range(5):
            shuffled = boxes[:]
            random.Random(seed).shuffle(shuffled)
            ids = {
                (d.box.as_list()[0], d.instance_id)
                for d in assign_instance_ids(desc, shuffled, [1.0] * 3)
            }
            assert ids == reference

    def test_tie_broken_by_top(self):
        upper = BoundingBox(0.4, 0.1, 0.6, 0.3)
        lower = BoundingBox(0.4, 0.6, 0.6, 0.8)
        desc = ObjectDescriptor("circle", ("red",), 2, (1, 3))
        detections = assign_instance_ids(desc, [lower, upper], [1.0, 1.0])
        by_id = sorted(detections, key=lambda d: d.instance_id)
        assert by_id[0].box == upper


class TestMatchInstances:
    def _detections(self):
        desc = ObjectDescriptor("circle", ("red",), 3, (1, 3))
        boxes = [
            BoundingBox(0.05, 0.4, 0.25, 0.6),
            BoundingBox(0.4, 0.4, 0.6, 0.6),
            BoundingBox(0.75, 0.4, 0.95, 0.6),
        ]
        return assign_instance_ids(desc, boxes, [1.0] * 3)

    def test_singleton_by_label(self):
        dets = self._detections()[:1]
        assert match_instances(dets, InstanceSelection("circle")) is dets[0]

    def test_ordinal_id_picks_third_left_to_right(self):
        dets = self._detections()
        chosen = match_instances(dets, InstanceSelection("circle", instance_id=2))
        assert chosen.box.center[0] == max(d.box.center[0] for d in dets)

    def test_attribute_filter(self):
        green = ObjectDescriptor("triangle", ("green",), 1, (1, 3))
        red = ObjectDescriptor("triangle", ("red",), 1, (5, 7))
        dets = assign_instance_ids(green, [BoundingBox(0.1, 0.1, 0.3, 0.3)], [1.0])
        dets += assign_instance_ids(red, [BoundingBox(0.6, 0.6, 0.8, 0.8)], [1.0])
        chosen = match_instances(dets, InstanceSelection("triangle", ("green",)))
        assert chosen.descriptor is green

    def test_ambiguous_without_id(self):
        with pytest.raises(AmbiguousMatchError):
            match_instances(self._detections(), InstanceSelection("circle"))

    def test_no_match(self):
        with pytest.raises(NoMatchError):
            match_instances(self._detections(), InstanceSelection("square"))
        with pytest.raises(NoMatchError):
            match_instances([], InstanceSelection("circle"))
        with pytest.raises(NoMatchError):
            match_instances(self._detections(), InstanceSelection("circle", instance_id=7))


class TestRemoteParser:
    def test_contract_against_recorded_fixture(self):
        fixture = json.loads((FIXTURES / "remote_parser_exchange.json").read_text())
        with MockRemoteServer(response=fixture["response"]) as server:
            parser = RemoteParser(RemoteConfig(server.endpoint, timeout=5.0))
            result = parser.parse(fixture["request"]["prompt"])
        # wire-level request matches the recorded exchange
        assert server.requests == [fixture["request"]]
        assert set(server.requests[0].keys()) == set(fixture["request_schema"].keys())
        assert [(d.label, list(d.attributes), d.quantity) for d in result] == [
            ("circle", ["red"], 1),
            ("square", ["blue"], 1),
        ]
        # spans recovered by local re-tokenization
        assert result[0].token_span == (1, 3)
        assert result[1].token_span == (5, 7)

    def test_timeout_raises_remote_error(self):
        with MockRemoteServer(response={"objects": []}, delay=1.0) as server:
            parser = RemoteParser(RemoteConfig(server.endpoint, timeout=0.2))
            with pytest.raises(RemoteError):
                parser.parse("a red circle")

    def test_malformed_reply(self):
        with MockRemoteServer(raw_body=b"not json") as server:
            parser = RemoteParser(RemoteConfig(server.endpoint, timeout=5.0))
            with pytest.raises(RemoteError):
                parser.parse("a red circle")

    def test_http_error(self):
        with MockRemoteServer(response={}, status=500) as server:
            parser = RemoteParser(RemoteConfig(server.endpoint, timeout=5.0))
            with pytest.raises(RemoteError):
                parser.parse("a red circle")

    def test_unmappable_span(self):
        with MockRemoteServer(
            response={"objects": [{"label": "square", "attributes": ["green"], "quantity": 1}]}
        ) as server:
            parser = RemoteParser(RemoteConfig(server.endpoint, timeout=5.0))
            with pytest.raises(RemoteError):
                parser.parse("a red circle")


class TestRemoteDetector:
    def test_contract_against_recorded_fixture(self):
        fixture = json.loads((FIXTURES / "remote_detector_exchange.json").read_text())
        spec = _scene_with(
            ("circle", "red", (0.1, 0.1, 0.4, 0.4)),
            ("square", "blue", (0.55, 0.5, 0.9, 0.9)),
        )
        image = render_scene(spec)
        descriptors = parse_prompt("a red circle and a blue square")
        with MockRemoteServer(response=fixture["response"]) as server:
            detector = RemoteDetector(RemoteConfig(server.endpoint, timeout=5.0))
            detections = detector.detect(image, descriptors)

        request = server.requests[0]
        assert set(request.keys()) == set(fixture["request_schema"].keys())
        assert request["queries"] == fixture["expected_queries"]
        # the base64 PNG round-trips to the exact pixels we sent
        decoded = np.asarray(
            Image.open(io.BytesIO(base64.b64decode(request["image"]))).convert("RGB")
        )
        assert np.array_equal(decoded, to_uint8(image))

        assert len(detections) == 2
        by_label = {d.descriptor.label: d for d in detections}
        assert by_label["circle"].box.as_list() == pytest.approx([0.1, 0.1, 0.4, 0.4])
        assert by_label["circle"].confidence == pytest.approx(0.95)

    def test_missing_objects_do_not_raise(self):
        spec = _scene_with(("circle", "red", (0.1, 0.1, 0.4, 0.4)))
        image = render_scene(spec)
        with MockRemoteServer(response={"detections": []}) as server:
            detector = RemoteDetector(RemoteConfig(server.endpoint, timeout=5.0))
            assert detector.detect(image, parse_prompt("a red circle")) == []

    def test_malformed_detection_raises(self):
        spec = _scene_with(("circle", "red", (0.1, 0.1, 0.4, 0.4)))
        image = render_scene(spec)
        with MockRemoteServer(response={"detections": [{"bogus": 1}]}) as server:
            detector = RemoteDetector(RemoteConfig(server.endpoint, timeout=5.0))
            with pytest.raises(RemoteError):
                detector.detect(image, parse_prompt("a red circle"))
