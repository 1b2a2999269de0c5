"""Filter stages, stage ledgers, the pipeline driver, and the planted fixture."""

import json
import sys

import numpy as np
import pytest

from lipsynth.corpus import MotionSequence, SpeechTrack, load_manifest
from lipsynth.errors import ContractError, ValidationError
from lipsynth.pipeline import (
    FrameTrack,
    MockAngleEstimator,
    MockMeshLifter,
    MockSpeakerScorer,
    MockTranscriber,
    PipelineAdapters,
    PipelineConfig,
    ProcessAdapter,
    RawItem,
    StageReport,
    Verdict,
    filter_frontal,
    make_planted_fixture,
    run_pipeline,
    segment_utterances,
    verify_active_speaker,
    write_reports,
)


def flat_track(n, fps=10.0, score=0.9, yaw=0.0, pitch=0.0):
    return FrameTrack(
        t=np.arange(n) / fps,
        speaking_score=np.full(n, score),
        yaw=np.full(n, yaw),
        pitch=np.full(n, pitch),
    )


class TestFrameTrack:
    def test_empty_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            FrameTrack(t=[], speaking_score=[], yaw=[], pitch=[])

    def test_length_mismatch_names_field(self):
        with pytest.raises(ValidationError, match="yaw"):
            FrameTrack(t=[0.0, 0.1], speaking_score=[1, 1], yaw=[0.0], pitch=[0, 0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError, match="non-finite"):
            FrameTrack(t=[0.0, 0.1], speaking_score=[1, np.nan], yaw=[0, 0], pitch=[0, 0])

    def test_timestamps_must_increase(self):
        with pytest.raises(ValidationError, match="increasing"):
            FrameTrack(t=[0.0, 0.0], speaking_score=[1, 1], yaw=[0, 0], pitch=[0, 0])

    def test_slice_and_frame_duration(self):
        track = flat_track(10, fps=10.0)
        assert track.frame_duration() == pytest.approx(0.1)
        part = track.slice(2, 5)
        assert len(part) == 3
        np.testing.assert_allclose(part.t, [0.2, 0.3, 0.4])
        assert track.slice(4, 5).frame_duration() == 0.0


class TestSegmentUtterances:
    def test_all_active_is_one_segment(self):
        segs = segment_utterances(flat_track(10, fps=10.0))
        assert segs == [(0.0, pytest.approx(1.0))]

    def test_speech_gap_speech_splits_in_two(self):
        scores = np.r_[np.full(30, 0.9), np.full(10, 0.1), np.full(30, 0.9)]
        track = FrameTrack(
            t=np.arange(70) / 10.0,
            speaking_score=scores,
            yaw=np.zeros(70),
            pitch=np.zeros(70),
        )
        segs = segment_utterances(track, min_gap_s=0.5)
        assert len(segs) == 2
        assert segs[0] == (0.0, pytest.approx(3.0))
        assert segs[1] == (4.0, pytest.approx(7.0))

    def test_wide_min_gap_merges_across_silence(self):
        scores = np.r_[np.full(30, 0.9), np.full(10, 0.1), np.full(30, 0.9)]
        track = FrameTrack(
            t=np.arange(70) / 10.0,
            speaking_score=scores,
            yaw=np.zeros(70),
            pitch=np.zeros(70),
        )
        segs = segment_utterances(track, min_gap_s=2.0)
        assert len(segs) == 1
        assert segs[0] == (0.0, pytest.approx(7.0))

    def test_short_runs_dropped(self):
        scores = np.r_[np.full(3, 0.9), np.full(30, 0.1)]
        track = FrameTrack(
            t=np.arange(33) / 10.0,
            speaking_score=scores,
            yaw=np.zeros(33),
            pitch=np.zeros(33),
        )
        assert segment_utterances(track, min_len_s=0.5) == []

    def test_all_silent_is_empty(self):
        assert segment_utterances(flat_track(20, score=0.1)) == []

    def test_inputs_not_mutated(self):
        track = flat_track(10)
        before = track.speaking_score.copy()
        segment_utterances(track)
        np.testing.assert_array_equal(track.speaking_score, before)


class TestVerifyActiveSpeaker:
    def test_all_speaking_accepted(self):
        assert verify_active_speaker(np.full(8, 0.9)) == Verdict(True)

    def test_ninety_percent_below_default_bar(self):
        scores = np.full(20, 0.9)
        scores[3] = scores[11] = 0.1
        verdict = verify_active_speaker(scores)
        assert not verdict.accepted
        assert verdict.reason == "inactive-speaker-frames"

    def test_exactly_at_bar_accepted(self):
        scores = np.full(20, 0.9)
        scores[0] = 0.1  # 19/20 == 0.95
        assert verify_active_speaker(scores, min_fraction=0.95).accepted

    def test_empty_segment_rejected_loudly(self):
        with pytest.raises(ValidationError, match="empty"):
            verify_active_speaker([])


class TestFilterFrontal:
    def test_small_angles_accepted(self):
        track = flat_track(10, yaw=5.0, pitch=8.0)
        assert filter_frontal(track).accepted

    def test_yaw_beyond_limit_is_side_face(self):
        track = flat_track(10)
        track.yaw[4] = 40.0
        assert filter_frontal(track) == Verdict(False, "side-face")

    def test_pitch_beyond_limit_is_side_face(self):
        track = flat_track(10, pitch=25.0)
        assert filter_frontal(track) == Verdict(False, "side-face")

    def test_sudden_turn_is_abrupt_motion(self):
        track = flat_track(10)
        track.yaw[5:] = 20.0  # single-frame 20 degree jump, inside the 30 limit
        assert filter_frontal(track) == Verdict(False, "abrupt-motion")

    def test_side_face_reported_before_abruptness(self):
        track = flat_track(10)
        track.yaw[5:] = 40.0  # jump of 40 and beyond the side limit at once
        assert filter_frontal(track).reason == "side-face"

    def test_single_frame_has_no_deltas(self):
        assert filter_frontal(flat_track(1, yaw=10.0)).accepted


class TestStageReport:
    def test_balanced_ledger_passes(self):
        report = StageReport("demo", input_count=3, accepted=["a", "b"], rejected={"c": "x"})
        report.check()

    def test_unbalanced_ledger_raises(self):
        report = StageReport("demo", input_count=3, accepted=["a"], rejected={})
        with pytest.raises(ValidationError, match="demo"):
            report.check()

    def test_write_reports_round_trip(self, tmp_path):
        report = StageReport("demo", input_count=2, accepted=["b", "a"], rejected={})
        write_reports([report], tmp_path / "reports.json")
        docs = json.loads((tmp_path / "reports.json").read_text())
        assert docs[0]["stage"] == "demo"
        assert docs[0]["accepted"] == ["a", "b"]


@pytest.fixture(scope="module")
def planted_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("planted")
    items, adapters, expected = make_planted_fixture()
    manifest, reports = run_pipeline(items, adapters, PipelineConfig(out_dir=out))
    return out, items, expected, manifest, reports


class TestPlantedFixture:
    def test_exactly_the_planted_items_rejected(self, planted_run):
        _, items, expected, manifest, reports = planted_run
        assert len(items) == 20 and len(expected) == 5
        assert len(manifest.clips) == 15
        rejected = {}
        for r in reports:
            rejected.update(r.rejected)
        assert rejected == expected

    def test_rejections_land_in_the_right_stage(self, planted_run):
        _, _, _, _, reports = planted_run
        by_stage = {r.stage: r for r in reports}
        assert set(by_stage["active-speaker"].rejected.values()) == {"inactive-speaker-frames"}
        assert set(by_stage["frontal"].rejected.values()) == {"side-face", "abrupt-motion"}
        assert not by_stage["segment"].rejected
        assert not by_stage["transcribe"].rejected
        assert not by_stage["lift"].rejected

    def test_every_stage_conserves_items(self, planted_run):
        _, items, _, manifest, reports = planted_run
        for r in reports:
            r.check()
        total_rejected = sum(len(r.rejected) for r in reports)
        assert total_rejected + len(manifest.clips) == len(items)

    def test_transcripts_echo_the_planted_ground_truth(self, planted_run):
        _, items, _, manifest, _ = planted_run
        truth = {it.item_id: list(it.meta["transcript"]) for it in items}
        for clip in manifest.clips:
            assert clip.transcript == truth[clip.clip_id]

    def test_output_directory_is_a_loadable_corpus(self, planted_run):
        out, _, _, manifest, _ = planted_run
        loaded = load_manifest(out / "corpus.json")
        assert [c.clip_id for c in loaded.clips] == [c.clip_id for c in manifest.clips]
        assert (out / "reports.json").exists()
        motion = loaded.load_motion(loaded.clips[0])
        audio = loaded.load_audio(loaded.clips[0])
        assert motion.vertex_count == loaded.vertex_count
        assert audio.sample_rate == loaded.sample_rate

    def test_accepted_output_passes_a_second_pass_unchanged(self, planted_run, tmp_path):
        _, _, _, manifest, _ = planted_run
        items2 = []
        for clip in manifest.clips:
            motion = manifest.load_motion(clip)
            n = motion.frames
            items2.append(
                RawItem(
                    item_id=clip.clip_id,
                    language=clip.language,
                    video_ref=f"mem://{clip.clip_id}",
                    audio=manifest.load_audio(clip),
                    fps=clip.fps,
                    meta={
                        "speaking_scores": np.ones(n),
                        "yaw": np.zeros(n),
                        "pitch": np.zeros(n),
                        "transcript": list(clip.transcript),
                        "motion": motion,
                    },
                )
            )
        adapters = PipelineAdapters(
            speaker_scorer=MockSpeakerScorer(),
            angle_estimator=MockAngleEstimator(),
            transcriber=MockTranscriber(),
            mesh_lifter=MockMeshLifter(
                manifest.rig_id, manifest.vertex_count, manifest.lip_vertex_indices
            ),
        )
        again, reports = run_pipeline(items2, adapters, PipelineConfig(out_dir=tmp_path))
        assert sum(len(r.rejected) for r in reports) == 0
        assert [c.clip_id for c in again.clips] == [c.clip_id for c in manifest.clips]
        first = manifest.load_motion(manifest.clips[0])
        second = again.load_motion(again.clips[0])
        np.testing.assert_array_equal(first.vertices, second.vertices)


class TestPipelineDriver:
    def test_one_item_fans_out_to_two_clips(self, tmp_path, rng):
        scores = np.r_[np.full(30, 0.9), np.full(10, 0.1), np.full(30, 0.9)]
        motion = MotionSequence(
            vertices=rng.normal(size=(70, 6, 3)).astype(np.float32), fps=10.0
        )
        audio = SpeechTrack(np.full(7 * 16000, 0.01), 16000)
        item = RawItem(
            item_id="solo",
            language="x-a",
            video_ref="mem://solo",
            audio=audio,
            fps=10.0,
            meta={
                "speaking_scores": scores,
                "yaw": np.zeros(70),
                "pitch": np.zeros(70),
                "transcript": ["a", "b"],
                "motion": motion,
            },
        )
        adapters = PipelineAdapters(
            MockSpeakerScorer(), MockAngleEstimator(), MockTranscriber(),
            MockMeshLifter("demo-rig", 6, [4, 5]),
        )
        manifest, reports = run_pipeline([item], adapters, PipelineConfig(out_dir=tmp_path))
        assert [c.clip_id for c in manifest.clips] == ["solo#0", "solo#1"]
        by_stage = {r.stage: r for r in reports}
        assert by_stage["segment"].accepted == ["solo"]
        assert by_stage["active-speaker"].input_count == 2
        first = manifest.load_motion(manifest.clips[0])
        assert first.frames == 30
        np.testing.assert_array_equal(first.vertices, motion.vertices[:30])

    def test_adapter_failure_quarantines_only_that_item(self, tmp_path):
        items, adapters, expected = make_planted_fixture(n_items=8, n_violations=2)

        class FlakyTranscriber(MockTranscriber):
            def transcribe(self, item, start_frame, end_frame):
                if item.item_id == "item-002":
                    raise RuntimeError("detector crashed")
                return super().transcribe(item, start_frame, end_frame)

        adapters.transcriber = FlakyTranscriber()
        manifest, reports = run_pipeline(items, adapters, PipelineConfig(out_dir=tmp_path))
        by_stage = {r.stage: r for r in reports}
        assert by_stage["transcribe"].rejected == {"item-002": "adapter-error"}
        assert len(manifest.clips) == 8 - len(expected) - 1

    def test_empty_input_yields_empty_corpus(self, tmp_path):
        adapters = PipelineAdapters(
            MockSpeakerScorer(), MockAngleEstimator(), MockTranscriber(),
            MockMeshLifter("demo-rig", 6, [4, 5]),
        )
        manifest, reports = run_pipeline([], adapters, PipelineConfig(out_dir=tmp_path))
        assert manifest.clips == []
        assert all(r.input_count == 0 for r in reports)
        assert (tmp_path / "corpus.json").exists()

    def test_overplanting_rejected(self):
        with pytest.raises(ValidationError, match="cannot plant"):
            make_planted_fixture(n_items=4, n_violations=3)


CHILD = '''
import json, sys
out_dir = sys.argv[1]
import numpy as np
from lipsynth.corpus import MotionSequence, write_motion
for line in sys.stdin:
    req = json.loads(line)
    op = req["op"]
    if req["video_ref"] == "mem://fail" and op == "score":
        print(json.dumps({"ok": False, "error": "boom"}), flush=True)
        continue
    if req["video_ref"] == "mem://garbage" and op == "score":
        print("not json at all", flush=True)
        continue
    if op == "score":
        resp = {"ok": True, "scores": [0.9] * 10}
    elif op == "angles":
        resp = {"ok": True, "yaw": [1.0] * 10, "pitch": [-2.0] * 10}
    elif op == "transcribe":
        resp = {"ok": True, "tokens": ["a", "b", "c"]}
    elif op == "lift":
        n = req["end_frame"] - req["start_frame"]
        motion = MotionSequence(np.zeros((n, 6, 3), dtype=np.float32), fps=req["fps"])
        path = out_dir + "/" + req["item_id"] + ".mtlk"
        write_motion(motion, path)
        resp = {"ok": True, "motion_path": path}
    else:
        resp = {"ok": False, "error": "unknown op"}
    print(json.dumps(resp), flush=True)
'''


def make_item(item_id="ext-000", video_ref="mem://ok"):
    return RawItem(
        item_id=item_id,
        language="x-a",
        video_ref=video_ref,
        audio=SpeechTrack(np.full(1600, 0.01), 16000),
        fps=10.0,
        meta={},
    )


class TestProcessAdapter:
    def test_line_protocol_covers_all_four_roles(self, tmp_path):
        script = tmp_path / "tool.py"
        script.write_text(CHILD)
        command = [sys.executable, str(script), str(tmp_path)]
        with ProcessAdapter(command, rig_id="ext-rig", vertex_count=6,
                            lip_vertex_indices=[4, 5]) as pa:
            item = make_item()
            np.testing.assert_allclose(pa.score(item), np.full(10, 0.9))
            yaw, pitch = pa.angles(item)
            np.testing.assert_allclose(yaw, np.ones(10))
            np.testing.assert_allclose(pitch, np.full(10, -2.0))
            assert pa.transcribe(item, 0, 10) == ["a", "b", "c"]
            motion = pa.lift(item, 0, 8)
            assert motion.frames == 8 and motion.vertex_count == 6
            with pytest.raises(ContractError, match="reported failure"):
                pa.score(make_item(video_ref="mem://fail"))
            with pytest.raises(ContractError, match="malformed"):
                pa.score(make_item(video_ref="mem://garbage"))
        assert pa._proc.poll() is not None

    def test_dead_process_surfaces_as_contract_error(self, tmp_path):
        script = tmp_path / "oneshot.py"
        script.write_text(
            "import json, sys\n"
            "sys.stdin.readline()\n"
            'print(json.dumps({"ok": True, "scores": [1.0]}), flush=True)\n'
        )
        pa = ProcessAdapter([sys.executable, str(script)])
        assert pa.score(make_item()).tolist() == [1.0]
        pa._proc.wait(timeout=10)
        with pytest.raises(ContractError, match="exited"):
            pa.score(make_item())
