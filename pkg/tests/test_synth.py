"""Synthetic corpus generator: label/pixel consistency and determinism."""

import json
import os

import numpy as np
import pytest

from residen import ConfigError
from residen.data import binarize_intensity, load_manifest
from residen.expression import EMOTION_ORDER
from residen.synth import (
    EMOTION_AU_PROTOTYPES,
    FaceJitter,
    SynthSpec,
    expected_au_marginals,
    generate,
    landmarks_for,
    render_face,
)

from conftest import TINY_AUS


class TestSynthSpec:
    @pytest.mark.parametrize("kwargs", [
        dict(count=0),
        dict(count=4, num_emotions=1),
        dict(count=4, num_emotions=8),
        dict(count=4, au_noise=0.5),
        dict(count=4, au_noise=-0.01),
        dict(count=4, split_fractions=(0.5, 0.5, 0.5)),
        dict(count=4, au_list=(1, 1)),
    ])
    def test_validate_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            SynthSpec(**kwargs).validate()

    def test_emotions_prefix(self):
        assert SynthSpec(count=1, num_emotions=3).emotions() == EMOTION_ORDER[:3]

    def test_expected_marginals_by_hand(self):
        # two emotions, noise 0.1: unit 1 active in both prototypes, unit 12
        # in neither, unit 4 only in fear
        spec = SynthSpec(count=1, num_emotions=2, au_noise=0.1,
                         au_list=(1, 4, 12))
        m = expected_au_marginals(spec)
        assert m[1] == pytest.approx(0.9)
        assert m[12] == pytest.approx(0.1)
        assert m[4] == pytest.approx(0.5 * 0.9 + 0.5 * 0.1)


class TestRenderFace:
    def test_pure_function(self):
        j = FaceJitter()
        a = render_face({1: 3, 25: 4}, j)
        b = render_face({1: 3, 25: 4}, j)
        assert np.array_equal(a, b)
        assert a.shape == (128, 128, 3) and a.dtype == np.uint8

    def test_mouth_unit_only_touches_mouth_rows(self):
        j = FaceJitter()
        closed = render_face({}, j)
        parted = render_face({25: 5}, j)
        # the default-geometry mouth sits at row 92; everything above it
        # must be untouched by a lips-part change
        assert np.array_equal(closed[:88], parted[:88])
        assert not np.array_equal(closed[88:], parted[88:])

    def test_brow_unit_only_touches_brow_rows(self):
        j = FaceJitter()
        neutral = render_face({}, j)
        raised = render_face({1: 5}, j)
        assert not np.array_equal(neutral[:60], raised[:60])
        assert np.array_equal(neutral[60:], raised[60:])

    def test_scales_to_small_canvas(self):
        img = render_face({6: 3, 12: 4}, FaceJitter(), hw=32)
        assert img.shape == (32, 32, 3)
        # face must actually land on the canvas: skin pixels present
        assert (img == np.array(FaceJitter().skin, dtype=np.uint8)).all(-1).any()


class TestLandmarks:
    def test_span_covers_brows_to_chin(self):
        j = FaceJitter()
        pts = landmarks_for(j)
        assert len(pts) == 8
        ys = [p[1] for p in pts]
        xs = [p[0] for p in pts]
        assert min(ys) == pytest.approx(66 - 22)   # brow line
        assert max(ys) == pytest.approx(66 + 44)   # chin
        assert min(xs) == pytest.approx(64 - 26)
        assert max(xs) == pytest.approx(64 + 26)
        assert all(0 <= x < 128 and 0 <= y < 128 for x, y in pts)

    def test_jitter_moves_landmarks(self):
        moved = landmarks_for(FaceJitter(dx=2.5, dy=-1.0))
        assert moved != landmarks_for(FaceJitter())


class TestGenerate:
    def test_corpus_layout_and_counts(self, corpus_dir, corpus_meta):
        manifest = load_manifest(os.path.join(corpus_dir, "manifest.csv"))
        assert len(manifest) == 24
        assert len(manifest.split_ids("train")) + len(manifest.split_ids("val")) == 24
        assert corpus_meta["au_list"] == list(TINY_AUS)
        assert corpus_meta["count"] == 24
        for rec in manifest:
            path = os.path.join(corpus_dir, rec.image_path)
            assert os.path.isfile(path)

    def test_labels_internally_consistent(self, corpus_dir):
        manifest = load_manifest(os.path.join(corpus_dir, "manifest.csv"))
        for rec in manifest:
            assert rec.emotion is not None and 0 <= rec.emotion < len(EMOTION_ORDER)
            assert rec.au_binary == binarize_intensity(rec.au_intensities).tolist()
            assert rec.landmarks and len(rec.landmarks) == 8

    def test_noise_free_labels_match_prototypes(self, tmp_path):
        out = tmp_path / "clean"
        spec = SynthSpec(count=30, seed=3, au_list=tuple(TINY_AUS),
                         au_noise=0.0, out_hw=32)
        manifest = load_manifest(generate(spec, str(out)))
        for rec in manifest:
            proto = EMOTION_AU_PROTOTYPES[EMOTION_ORDER[rec.emotion]]
            expect = [1 if au in proto else 0 for au in TINY_AUS]
            assert rec.au_binary == expect

    def test_observed_marginals_near_analytic(self, tmp_path):
        spec = SynthSpec(count=300, seed=11, au_list=tuple(TINY_AUS),
                         split_fractions=(1.0, 0.0, 0.0), out_hw=32)
        manifest = load_manifest(generate(spec, str(tmp_path / "big")))
        rows = np.array([rec.au_binary for rec in manifest], dtype=np.float64)
        observed = rows.mean(axis=0)
        expect = expected_au_marginals(spec)
        for k, au in enumerate(TINY_AUS):
            assert abs(observed[k] - expect[au]) <= 0.1, (au, observed[k], expect[au])

    def test_meta_records_marginals(self, corpus_meta):
        marg = corpus_meta["expected_au_marginals"]
        assert set(marg) == {str(a) for a in TINY_AUS}
        assert all(0.0 <= v <= 1.0 for v in marg.values())

    def test_generate_is_deterministic(self, tmp_path):
        spec = SynthSpec(count=6, seed=21, au_list=(1, 12), out_hw=32)
        path_a = generate(spec, str(tmp_path / "a"))
        path_b = generate(spec, str(tmp_path / "b"))
        with open(path_a, "rb") as fa, open(path_b, "rb") as fb:
            assert fa.read() == fb.read()
        for name in sorted(os.listdir(tmp_path / "a" / "images")):
            with open(tmp_path / "a" / "images" / name, "rb") as fa:
                with open(tmp_path / "b" / "images" / name, "rb") as fb:
                    assert fa.read() == fb.read(), name
        with open(tmp_path / "a" / "meta.json", "rb") as fa:
            with open(tmp_path / "b" / "meta.json", "rb") as fb:
                assert fa.read() == fb.read()

    def test_meta_json_loads(self, tmp_path):
        spec = SynthSpec(count=2, seed=0, au_list=(1, 2), out_hw=32)
        generate(spec, str(tmp_path / "tiny"))
        with open(tmp_path / "tiny" / "meta.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        assert meta["seed"] == 0 and meta["au_list"] == [1, 2]
