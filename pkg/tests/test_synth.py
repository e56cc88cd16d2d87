"""Synthetic benchmark world: determinism, ground truth, on-disk layout."""

import json
from pathlib import Path

import numpy as np
import pytest

from legs4.metrics import load_annotations
from legs4.synth import (CONCEPT_PHRASES, SynthConfig, SynthError,
                         concept_basis, query_slug, read_pgm, synth_world,
                         write_world)

BLUE_PHRASE = CONCEPT_PHRASES[1]
RED_PHRASE = CONCEPT_PHRASES[2]


def small_config(**overrides) -> SynthConfig:
    base = dict(n_gaussians=120, n_timesteps=8, n_views=2, image_size=32,
                feature_dim=16, latent_dim=8, active_interval=(3, 5), seed=11)
    base.update(overrides)
    return SynthConfig(**base)


@pytest.fixture(scope="module")
def world():
    return synth_world(small_config())


class TestConfigValidation:
    def test_too_few_gaussians(self):
        with pytest.raises(SynthError):
            SynthConfig(n_gaussians=40)

    def test_interval_outside_timeline(self):
        with pytest.raises(SynthError):
            small_config(active_interval=(3, 9))

    def test_tiny_image_rejected(self):
        with pytest.raises(SynthError):
            small_config(image_size=8)


class TestConceptBasis:
    def test_orthonormal_rows(self):
        b = concept_basis(32, seed=0)
        np.testing.assert_allclose(b @ b.T, np.eye(3), atol=1e-12)

    def test_deterministic_in_seed(self):
        np.testing.assert_array_equal(concept_basis(16, 5), concept_basis(16, 5))
        assert not np.allclose(concept_basis(16, 5), concept_basis(16, 6))


class TestWorld:
    def test_shapes(self, world):
        cfg = world.cfg
        assert len(world.videos) == cfg.n_views
        for video in world.videos:
            assert video.shape == (cfg.n_timesteps, cfg.image_size, cfg.image_size, 3)
            assert video.dtype == np.uint8
        assert len(world.scene.frames) == cfg.n_timesteps
        assert len(world.scene.cameras) == cfg.n_views
        assert world.concept_embeddings.shape == (3, cfg.feature_dim)

    def test_pure_function_of_seed(self, world):
        again = synth_world(small_config())
        for a, b in zip(world.videos, again.videos):
            np.testing.assert_array_equal(a, b)
        for fa, fb in zip(world.scene.frames, again.scene.frames):
            np.testing.assert_array_equal(fa.means, fb.means)
        np.testing.assert_array_equal(world.masks[RED_PHRASE],
                                      again.masks[RED_PHRASE])

    def test_seed_changes_the_world(self, world):
        other = synth_world(small_config(seed=12))
        assert any((a != b).any() for a, b in zip(world.videos, other.videos))

    def test_intervals_partition_the_timeline(self, world):
        assert world.intervals[RED_PHRASE] == [(3, 5)]
        assert world.intervals[BLUE_PHRASE] == [(0, 2), (6, 7)]

    def test_masks_respect_intervals(self, world):
        red = world.masks[RED_PHRASE]
        blue = world.masks[BLUE_PHRASE]
        for t in range(world.cfg.n_timesteps):
            active = 3 <= t <= 5
            assert red[:, t].any() == active
            assert blue[:, t].any() == (not active)

    def test_masks_have_substance(self, world):
        red = world.masks[RED_PHRASE]
        for v in range(world.cfg.n_views):
            for t in range(3, 6):
                assert red[v, t].sum() > 20

    def test_cluster_pixels_show_the_palette_color(self, world):
        video = world.videos[0]
        mask = world.masks[RED_PHRASE][0][4]
        px = video[4][mask].astype(int)
        red = world.palette[2].astype(int)
        close = (np.abs(px - red).max(axis=1) <= 40).mean()
        assert close > 0.5  # noise blobs may cover part of the cluster

    def test_embedding_lookup(self, world):
        np.testing.assert_array_equal(
            world.embedding_for(RED_PHRASE),
            world.concept_embeddings[2].astype(np.float32))
        cans = world.canonical_vectors(RED_PHRASE)
        np.testing.assert_array_equal(
            cans,
            world.concept_embeddings[[0, 1]].astype(np.float32))

    def test_make_embedder_recognizes_contained_cluster(self, world):
        emb = world.make_embedder()
        side = 12
        tube = np.tile(world.palette[0], (1, side, side, 1)).astype(np.uint8)
        tube[:, 3:10, 3:10] = world.palette[2]
        feat = emb.embed(tube)
        assert feat @ world.concept_embeddings[2] > feat @ world.concept_embeddings[0]

    def test_cameras_are_distinct(self, world):
        eyes = [np.linalg.inv(c.world_to_cam)[:3, 3] for c in world.scene.cameras]
        assert np.linalg.norm(eyes[0] - eyes[1]) > 1.0


class TestQuerySlug:
    def test_lowercase_hyphenated(self):
        assert query_slug("A Red Cluster, flaring!") == "a-red-cluster-flaring"

    def test_strips_edges(self):
        assert query_slug("  spaced  ") == "spaced"


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    world = synth_world(small_config())
    out = tmp_path_factory.mktemp("world")
    write_world(world, out)
    return world, out


class TestWriteWorld:
    def test_layout(self, written):
        world, out = written
        assert (out / "scene" / "scene.json").exists()
        assert (out / "videos" / "video_00.4leg").exists()
        assert (out / "videos" / "video_01.4leg").exists()
        table = json.loads((out / "queries.json").read_text())
        assert set(table) == {BLUE_PHRASE, RED_PHRASE}
        for rel in table.values():
            assert (out / rel).exists()
        gt = json.loads((out / "gt.json").read_text())
        assert gt["intervals"][RED_PHRASE] == [[3, 5]]
        assert gt["canonicals"][RED_PHRASE] == [CONCEPT_PHRASES[0], BLUE_PHRASE]

    def test_annotation_files_only_for_active_frames(self, written):
        world, out = written
        vdir = out / "annotations" / world.scene.name / query_slug(RED_PHRASE) / "view_0"
        present = sorted(p.name for p in vdir.glob("t_*.pgm"))
        assert present == ["t_0003.pgm", "t_0004.pgm", "t_0005.pgm"]

    def test_pgm_roundtrip(self, written):
        world, out = written
        path = (out / "annotations" / world.scene.name
                / query_slug(RED_PHRASE) / "view_1" / "t_0004.pgm")
        np.testing.assert_array_equal(read_pgm(path), world.masks[RED_PHRASE][1, 4])

    def test_meta_json(self, written):
        world, out = written
        meta = json.loads((out / "annotations" / world.scene.name
                           / query_slug(RED_PHRASE) / "meta.json").read_text())
        assert meta["query"] == RED_PHRASE
        assert meta["intervals"] == [[3, 5]]

    def test_annotations_load_back(self, written):
        world, out = written
        sets, missing = load_annotations(out / "annotations", world.scene.name)
        assert missing == []
        by_query = {s.query: s for s in sets}
        red = by_query[RED_PHRASE]
        assert set(red.views) == {0, 1}
        assert red.views[0].gt_frames == {3, 4, 5}
        np.testing.assert_array_equal(red.views[1].masks[4],
                                      world.masks[RED_PHRASE][1, 4])

    def test_rerun_byte_identical(self, written, tmp_path):
        world, out = written
        again = tmp_path / "again"
        write_world(synth_world(small_config()), again)
        ours = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
        theirs = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
        assert ours == theirs
        for rel in ours:
            assert (out / rel).read_bytes() == (again / rel).read_bytes(), rel


class TestReadPgm:
    def test_rejects_non_pgm(self, tmp_path):
        bad = tmp_path / "x.pgm"
        bad.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        with pytest.raises(ValueError):
            read_pgm(bad)

    def test_rejects_truncated(self, tmp_path):
        bad = tmp_path / "x.pgm"
        bad.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(ValueError):
            read_pgm(bad)
