"""Class taxonomy, detection records, and confusion-model construction."""

import numpy as np
import pytest

from tltrack.detection import (
    CLASS_ORDER,
    DegenerateColumnError,
    Detection2D,
    LEGAL_SUCCESSORS,
    STATE_ORDER,
    TlClass,
    TlType,
    class_to_type,
    confusion_from_counts,
    detection_from_dict,
    detection_to_dict,
    one_hot_confidence,
    read_detections,
    write_detections,
)
from tltrack.geometry import PixelBox

from helpers import make_detection


class TestTaxonomy:
    def test_prefixes_map_to_types(self):
        assert class_to_type(TlClass.THREE_RED) is TlType.THREE_BULB
        assert class_to_type(TlClass.FOUR_YLEFT2) is TlType.FOUR_ARROW
        assert class_to_type(TlClass.FIVE_RED_GLEFT) is TlType.FIVE_DOGHOUSE

    def test_background_has_no_type(self):
        with pytest.raises(ValueError):
            class_to_type(TlClass.BACKGROUND)

    def test_state_subsets_partition_all_classes(self):
        seen = []
        for tl_type in TlType:
            seen.extend(tl_type.states)
        assert len(seen) == len(set(seen)) == len(CLASS_ORDER)
        assert set(seen) == set(CLASS_ORDER)

    def test_off_designation(self):
        assert not TlClass.FOUR_OFF.is_on
        on = [c for c in CLASS_ORDER if c.is_on]
        assert len(on) == 12

    def test_every_state_has_legal_successors(self):
        for tl_type in TlType:
            for state in tl_type.states:
                successors = LEGAL_SUCCESSORS[tl_type][state]
                assert successors
                assert all(s in tl_type.states for s in successors)

    def test_state_order_red_before_yellow_before_green(self):
        order = STATE_ORDER[TlType.THREE_BULB]
        assert order.index(TlClass.THREE_RED) < order.index(TlClass.THREE_YELLOW)
        assert order.index(TlClass.THREE_YELLOW) < order.index(TlClass.THREE_GREEN)


class TestDetection2D:
    def test_argmax_defines_class(self):
        conf = np.full(13, 0.02)
        conf[CLASS_ORDER.index(TlClass.FIVE_YELLOW)] = 1.0 - 0.02 * 12
        det = Detection2D("cam", 0.0, PixelBox(10, 10, 5, 5), conf, 0.8)
        assert det.detected_class is TlClass.FIVE_YELLOW

    def test_confidence_must_be_distribution(self):
        with pytest.raises(ValueError):
            Detection2D("cam", 0.0, PixelBox(0, 0, 1, 1), np.full(13, 0.5), 0.5)
        bad = np.zeros(13)
        bad[0] = 1.5
        bad[1] = -0.5
        with pytest.raises(ValueError):
            Detection2D("cam", 0.0, PixelBox(0, 0, 1, 1), bad, 0.5)

    def test_roundtrip_dict(self):
        det = make_detection(cls=TlClass.FOUR_GLEFT, t=1.25)
        back = detection_from_dict(detection_to_dict(det))
        assert back.detected_class is TlClass.FOUR_GLEFT
        assert back.timestamp == 1.25
        np.testing.assert_allclose(back.box.as_vector(), det.box.as_vector())


class TestConfusionFromCounts:
    def test_identity_counts(self):
        model = confusion_from_counts(TlType.THREE_BULB, np.diag([10, 10, 10]))
        np.testing.assert_allclose(model.matrix, np.eye(3))

    def test_column_normalization_by_hand(self):
        # Column [8, 2] normalizes to [0.8, 0.2]; the 2x2 case is embedded
        # in the smallest real type (3 states) with an identity third column.
        counts = np.array([[8, 1, 0], [2, 9, 0], [0, 0, 5]])
        model = confusion_from_counts(TlType.THREE_BULB, counts)
        np.testing.assert_allclose(model.matrix[:, 0], [0.8, 0.2, 0.0])
        np.testing.assert_allclose(model.matrix[:, 1], [0.1, 0.9, 0.0])

    def test_zero_column_rejected(self):
        counts = np.array([[8, 0, 0], [2, 0, 0], [0, 0, 5]])
        with pytest.raises(DegenerateColumnError):
            confusion_from_counts(TlType.THREE_BULB, counts)

    def test_law_of_large_numbers_roundtrip(self):
        # Sampling counts from a known column-conditional distribution and
        # renormalizing converges back to it.
        rng = np.random.default_rng(123)
        truth = np.array(
            [
                [0.85, 0.10, 0.05],
                [0.10, 0.80, 0.15],
                [0.05, 0.10, 0.80],
            ]
        )
        samples_per_column = 10**5
        counts = np.column_stack(
            [rng.multinomial(samples_per_column, truth[:, k]) for k in range(3)]
        )
        model = confusion_from_counts(TlType.THREE_BULB, counts)
        np.testing.assert_allclose(model.matrix, truth, atol=1e-2)


class TestDetectionStream:
    def test_roundtrip_file(self, tmp_path):
        dets = [
            make_detection(camera_id="a", t=0.0, cls=TlClass.THREE_RED),
            make_detection(camera_id="b", t=0.0, cls=TlClass.FOUR_OFF),
            make_detection(camera_id="a", t=0.1, cls=TlClass.THREE_GREEN),
        ]
        path = tmp_path / "det.jsonl"
        write_detections(path, dets)
        back = read_detections(path)
        assert [d.detected_class for d in back] == [d.detected_class for d in dets]

    def test_regressing_timestamps_rejected(self, tmp_path):
        dets = [
            make_detection(camera_id="a", t=1.0),
            make_detection(camera_id="a", t=0.5),
        ]
        path = tmp_path / "det.jsonl"
        write_detections(path, dets)
        with pytest.raises(ValueError, match="regress"):
            read_detections(path)

    def test_per_camera_monotonicity_is_independent(self, tmp_path):
        dets = [
            make_detection(camera_id="b", t=1.0),
            make_detection(camera_id="a", t=0.5),
            make_detection(camera_id="b", t=1.0),
        ]
        path = tmp_path / "det.jsonl"
        write_detections(path, dets)
        assert len(read_detections(path)) == 3

    def test_one_hot_helper(self):
        conf = one_hot_confidence(TlClass.FIVE_RED)
        assert conf.sum() == 1.0
        assert CLASS_ORDER[int(np.argmax(conf))] is TlClass.FIVE_RED
