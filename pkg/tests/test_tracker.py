"""Track lifecycle: birth counters, death boundary, cross-camera fusion."""

import numpy as np
import pytest

from tltrack.detection import TlClass, TlType, one_hot_confidence, Detection2D
from tltrack.geometry import PixelBox, RigidTransform
from tltrack.hdmap import MapTrafficLight, SpatialIndex
from tltrack.statefilter import FlashingConfig, default_hmm, map_state
from tltrack.tracker import (
    AssociatedFrame,
    Observation,
    TrackStore,
    TrackerConfig,
    fuse_frame_observations,
)

from helpers import FORWARD_CAM_QUAT, make_intrinsics

T_CAM = RigidTransform("utm", "cam", FORWARD_CAM_QUAT, np.zeros(3))
K = make_intrinsics()


def make_store(lights=(), config=None, flashing=None):
    index = SpatialIndex(lights)
    hmms = {t: default_hmm(t) for t in TlType}
    store = TrackStore(
        hmms=hmms,
        index=index,
        config=config or TrackerConfig(),
        flashing=flashing or FlashingConfig(),
    )
    return store, index


def map_light(light_id="L1", position=(30.0, 0.0, 0.0), tl_type=TlType.THREE_BULB):
    return MapTrafficLight(
        light_id=light_id,
        position=np.asarray(position, dtype=float),
        heading_deg=180.0,
        dims=np.array([0.25, 0.76, 0.15]),
        tl_type=tl_type,
    )


def det(cls=TlClass.THREE_RED, t=0.0, box=(960.0, 600.0, 25.0, 12.0), camera_id="cam"):
    return Detection2D(
        camera_id=camera_id,
        timestamp=t,
        box=PixelBox(*box),
        confidence=one_hot_confidence(cls),
        score=0.9,
    )


def frame(t, matched=(), unmatched=(), camera_id="cam"):
    return AssociatedFrame(
        camera_id=camera_id,
        timestamp=t,
        matched=tuple(matched),
        unmatched=tuple(unmatched),
        cam_from_utm=T_CAM,
        intrinsics=K,
    )


class TestMapBackedBirth:
    def test_single_frame_not_reported(self):
        store, _ = make_store([map_light()])
        reported = store.update([frame(0.0, matched=[("L1", det(t=0.0))])])
        assert reported == []

    def test_two_consecutive_frames_reported(self):
        store, _ = make_store([map_light()])
        store.update([frame(0.0, matched=[("L1", det(t=0.0))])])
        reported = store.update([frame(0.1, matched=[("L1", det(t=0.1))])])
        assert [t.light_id for t in reported] == ["L1"]
        assert reported[0].source == "map"
        np.testing.assert_allclose(reported[0].position, [30.0, 0.0, 0.0])

    def test_gap_resets_consecutive_counter(self):
        store, _ = make_store([map_light()])
        store.update([frame(0.0, matched=[("L1", det(t=0.0))])])
        store.update([frame(0.1)])  # gap
        reported = store.update([frame(0.2, matched=[("L1", det(t=0.2))])])
        assert reported == []  # counting restarted
        reported = store.update([frame(0.3, matched=[("L1", det(t=0.3))])])
        assert [t.light_id for t in reported] == ["L1"]

    def test_continuous_detection_reported_every_frame_after_birth(self):
        store, _ = make_store([map_light()])
        for i in range(20):
            reported = store.update([frame(i * 0.1, matched=[("L1", det(t=i * 0.1))])])
            if i == 0:
                assert reported == []
            else:
                assert [t.light_id for t in reported] == ["L1"]


class TestDeathBoundary:
    def make_reported(self, store):
        store.update([frame(0.0, matched=[("L1", det(t=0.0))])])
        reported = store.update([frame(0.1, matched=[("L1", det(t=0.1))])])
        assert reported
        return reported[0]

    def test_reported_through_miss_15_dropped_at_16(self):
        store, index = make_store([map_light()])
        self.make_reported(store)
        for miss in range(1, 16):
            reported = store.update([frame(1.0 + miss * 0.1)])
            assert [t.light_id for t in reported] == ["L1"], f"miss {miss}"
            assert reported[0].missed_frames == miss
        reported = store.update([frame(2.7)])  # miss 16 > n_death = 15
        assert reported == []
        assert "L1" in index  # stored position survives the track

    def test_rebirth_resets_belief_and_assigns_new_id(self):
        store, _ = make_store([map_light()])
        first = self.make_reported(store)
        first_id = first.track_id
        for miss in range(16):
            store.update([frame(1.0 + miss * 0.1)])
        assert store.tracks == []
        store.update([frame(5.0, matched=[("L1", det(t=5.0))])])
        reported = store.update([frame(5.1, matched=[("L1", det(t=5.1))])])
        assert reported[0].track_id > first_id

    def test_hit_resets_missed_frames(self):
        store, _ = make_store([map_light()])
        self.make_reported(store)
        for miss in range(1, 10):
            store.update([frame(1.0 + miss * 0.1)])
        reported = store.update([frame(3.0, matched=[("L1", det(t=3.0))])])
        assert reported[0].missed_frames == 0


class TestCrossCameraFusion:
    def test_two_cameras_two_observations_two_filter_updates(self):
        store, _ = make_store([map_light()])
        hmm = default_hmm(TlType.THREE_BULB)
        track_frames = [
            frame(0.0, matched=[("L1", det(t=0.0, camera_id="a"))], camera_id="a"),
            frame(0.0, matched=[("L1", det(t=0.0, camera_id="b"))], camera_id="b"),
        ]
        store.update(track_frames)
        (track,) = store.tracks
        assert len(track.history) == 2
        assert [o.camera_id for o in track.history] == ["a", "b"]
        # Two red observations through the default HMM: belief must match
        # exactly two sequential forward updates from the prior.
        belief = hmm.initial_belief(0.0)
        from tltrack.statefilter import build_evidence, forward_update, restrict_confidence

        for _ in range(2):
            evidence = build_evidence(
                hmm.confusion,
                restrict_confidence(TlType.THREE_BULB, one_hot_confidence(TlClass.THREE_RED)),
            )
            belief = forward_update(belief, hmm.transition, evidence)
        np.testing.assert_allclose(track.belief.probs, belief.probs)

    def test_zero_detections_increment_missed_only(self):
        store, _ = make_store([map_light()])
        store.update([frame(0.0, matched=[("L1", det(t=0.0))])])
        store.update([frame(0.1, matched=[("L1", det(t=0.1))])])
        (track,) = store.tracks
        history_before = list(track.history)
        store.update([frame(0.2)])
        assert list(track.history) == history_before
        assert track.missed_frames == 1

    def test_one_camera_occluded_one_observation(self):
        store, _ = make_store([map_light()])
        frames = [
            frame(0.0, matched=[("L1", det(t=0.0, camera_id="a"))], camera_id="a"),
            frame(0.0, camera_id="b"),
        ]
        store.update(frames)
        (track,) = store.tracks
        assert len(track.history) == 1

    def test_fuse_appends_in_camera_order(self):
        store, _ = make_store([map_light()])
        hmm = default_hmm(TlType.THREE_BULB)
        store.update([frame(0.0, matched=[("L1", det(t=0.0))])])
        (track,) = store.tracks
        appended = fuse_frame_observations(
            track,
            [("z", det(camera_id="z", t=0.1)), ("a", det(camera_id="a", t=0.1))],
            hmm,
            FlashingConfig(),
        )
        assert [o.camera_id for o in appended] == ["a", "z"]

    def test_history_is_ring_buffer(self):
        store, _ = make_store([map_light()], config=TrackerConfig(history_len=5))
        for i in range(12):
            store.update([frame(i * 0.1, matched=[("L1", det(t=i * 0.1))])])
        (track,) = store.tracks
        assert len(track.history) == 5


class TestDetectionSpawned:
    def spawn_det(self, t, jitter=0.0):
        # On-axis three-bulb box at 10 m: h = 1000 * 0.76 / 10 = 76 px.
        return det(
            t=t, box=(960.0 + jitter, 600.0, 76.0, 30.0), cls=TlClass.THREE_RED
        )

    def test_single_frame_fp_never_spawns(self):
        store, index = make_store([])
        store.update([frame(0.0, unmatched=[self.spawn_det(0.0)])])
        assert store.tracks == []
        assert len(index) == 0

    def test_spawn_at_second_consecutive_frame(self):
        store, index = make_store([])
        store.update([frame(0.0, unmatched=[self.spawn_det(0.0)])])
        reported = store.update([frame(0.1, unmatched=[self.spawn_det(0.1, jitter=2.0)])])
        assert len(reported) == 1
        track = reported[0]
        assert track.source == "detection"
        assert track.light_id.startswith("spawned-")
        assert track.light_id in index
        # Back-projected on-axis depth: fy * H / h = 10 m along UTM x.
        assert abs(track.position[0] - 10.0) < 0.5
        assert reported[0].reported

    def test_random_nonrepeating_fps_never_spawn(self):
        # Uniform single-frame false positives that never land within the
        # gate on consecutive frames must produce zero spawned tracks.
        rng = np.random.default_rng(13)
        store, index = make_store([])
        gate = store.gate_px
        prev = None
        frames = 0
        for i in range(10_000):
            while True:
                box = (
                    rng.uniform(0, 1920),
                    rng.uniform(0, 1200),
                    rng.uniform(10, 60),
                    rng.uniform(5, 30),
                )
                if prev is None or np.linalg.norm(np.subtract(box, prev)) > gate:
                    break
            prev = box
            cls = TlClass(np.random.default_rng(i).choice([c.value for c in TlClass if c is not TlClass.BACKGROUND]))
            store.update([frame(i * 0.1, unmatched=[det(cls=cls, t=i * 0.1, box=box)])])
            frames += 1
        assert frames == 10_000
        assert store.tracks == []
        assert len(index) == 0

    def test_spawned_track_position_persists_after_death(self):
        store, index = make_store([])
        store.update([frame(0.0, unmatched=[self.spawn_det(0.0)])])
        store.update([frame(0.1, unmatched=[self.spawn_det(0.1)])])
        (track,) = store.reported_tracks
        light_id = track.light_id
        for miss in range(16):
            store.update([frame(1.0 + miss * 0.1)])
        assert store.tracks == []
        assert light_id in index  # "we keep their 3D position stored"

    def test_track_ids_monotonic_never_reused(self):
        store, _ = make_store([map_light()])
        seen = []
        for cycle in range(3):
            base = cycle * 10.0
            store.update([frame(base, matched=[("L1", det(t=base))])])
            store.update([frame(base + 0.1, matched=[("L1", det(t=base + 0.1))])])
            (track,) = store.reported_tracks
            seen.append(track.track_id)
            for miss in range(16):
                store.update([frame(base + 1 + miss * 0.1)])
        assert seen == sorted(seen)
        assert len(set(seen)) == 3


class TestSoak:
    def test_track_count_bounded_over_long_run(self):
        # Two mapped lights plus one persistent unmapped light, with one
        # never-repeating false positive per frame: the store must never
        # exceed 3 tracks and never leak provisional candidates. Once the
        # unmapped light has been spawned into the index, association
        # upstream would match it, so the drive switches it to matched.
        rng = np.random.default_rng(99)
        store, index = make_store([map_light("A", (30, 0, 0)), map_light("B", (30, 8, 0))])
        prev = None
        max_tracks = 0
        spawned_id = None
        for i in range(20_000):
            t = i * 0.1
            while True:
                fp_box = (
                    rng.uniform(0, 1920),
                    rng.uniform(0, 1200),
                    rng.uniform(10, 60),
                    rng.uniform(5, 30),
                )
                if prev is None or np.linalg.norm(np.subtract(fp_box, prev)) > store.gate_px:
                    break
            prev = fp_box
            matched = [
                ("A", det(t=t, box=(800, 500, 25, 12))),
                ("B", det(t=t, box=(1100, 500, 25, 12), cls=TlClass.THREE_GREEN)),
            ]
            unmatched = [det(t=t, box=fp_box, cls=TlClass.FIVE_RED)]
            persistent = det(t=t, box=(400.0, 300.0, 76.0, 30.0), cls=TlClass.THREE_RED)
            if spawned_id is None:
                unmatched.append(persistent)
            else:
                matched.append((spawned_id, persistent))
            store.update([frame(t, matched=matched, unmatched=unmatched)])
            if spawned_id is None:
                spawned = [lid for lid in ("spawned-1",) if lid in index]
                if spawned:
                    spawned_id = spawned[0]
            max_tracks = max(max_tracks, len(store.tracks))
        assert max_tracks <= 3
        assert len(index) == 3  # two mapped + one spawned


class TestFlashingIntegration:
    def test_flashing_flag_overrides_reported_state(self):
        store, _ = make_store(
            [map_light(tl_type=TlType.FOUR_ARROW)],
            flashing=FlashingConfig(window=10),
        )
        classes = [TlClass.FOUR_YLEFT2, TlClass.FOUR_OFF] * 8
        for i, cls in enumerate(classes):
            store.update([frame(i * 0.1, matched=[("L1", det(cls=cls, t=i * 0.1))])])
        (track,) = store.reported_tracks
        assert track.flashing
        assert track.state is TlClass.FOUR_YLEFT2
        # Unfiltered argmax would alternate; the flashing class pins it.
        assert track.flashing_class is TlClass.FOUR_YLEFT2
