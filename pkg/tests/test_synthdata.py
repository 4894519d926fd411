"""Generator, renderer, grammar and dataset-build contracts."""

import itertools
import json

import numpy as np
import pytest

from changecap.config import DataConfig
from changecap.errors import InfeasibleChangeError, PlacementError
from changecap import synthdata as sd


CFG = DataConfig()
CFG8 = DataConfig(grid=8, min_objects=3, max_objects=5)


def _bbox_for_cell(cell, grid, canvas):
    cell_px = canvas // grid
    r, c = cell
    return (r * cell_px, (r + 1) * cell_px, c * cell_px, (c + 1) * cell_px)


class TestGenerateScene:
    def test_object_count_in_range(self):
        scene = sd.generate_scene(0, CFG8)
        assert 3 <= len(scene.objects) <= 5

    def test_deterministic(self):
        assert sd.generate_scene(0, CFG8) == sd.generate_scene(0, CFG8)

    def test_distinct_across_seeds(self):
        # enumerate 100 seeds and count distinct serializations
        seen = {json.dumps(sd.scene_to_dict(sd.generate_scene(s, CFG8)),
                           sort_keys=True) for s in range(100)}
        assert len(seen) >= 99

    def test_positions_unique_and_inside(self):
        for seed in range(20):
            scene = sd.generate_scene(seed, CFG)
            cells = [o.position for o in scene.objects]
            assert len(set(cells)) == len(cells)
            assert all(0 <= r < CFG.grid and 0 <= c < CFG.grid
                       for r, c in cells)

    def test_placement_infeasible(self):
        with pytest.raises(PlacementError):
            sd.generate_scene(0, DataConfig(grid=1, min_objects=2,
                                            max_objects=2))


class TestApplyChange:
    def test_distractor_only_keeps_objects(self):
        scene = sd.generate_scene(1, CFG)
        change = sd.ChangeSpec("none", distractor="viewpoint_shift",
                               distractor_value=(1, -2))
        after = sd.apply_change(scene, change)
        assert after.objects == scene.objects
        assert after.global_offset != (0, 0)

    def test_drop_flips_one_flag(self):
        scene = sd.generate_scene(2, CFG)
        after = sd.apply_change(scene, sd.ChangeSpec("drop", target_index=0))
        assert after.objects[0].exists is False
        assert after.objects[1:] == scene.objects[1:]

    def test_move_pixel_diff_confined_to_two_cells(self):
        scene = sd.generate_scene(3, CFG)
        step = _first_legal_move(scene)
        assert step is not None, "fixture scene must allow some move"
        idx, delta = step
        after = sd.apply_change(scene, sd.ChangeSpec("move", idx, delta))
        diff = np.abs(sd.render(after, 32) - sd.render(scene, 32)).sum(axis=-1)
        src = scene.objects[idx].position
        dst = after.objects[idx].position
        allowed = np.zeros((32, 32), dtype=bool)
        for cell in (src, dst):
            r0, r1, c0, c1 = _bbox_for_cell(cell, CFG.grid, 32)
            allowed[r0:r1, c0:c1] = True
        assert not np.any((diff > 0) & ~allowed)

    def test_move_into_occupied_cell_rejected(self):
        scene = sd.SceneState(
            (sd.ObjectSpec("square", "red", "small", (0, 0)),
             sd.ObjectSpec("circle", "blue", "small", (0, 1))),
            (32, 32), 4)
        with pytest.raises(InfeasibleChangeError):
            sd.apply_change(scene, sd.ChangeSpec("move", 0, (0, 1)))

    def test_move_off_grid_rejected(self):
        scene = sd.SceneState(
            (sd.ObjectSpec("square", "red", "small", (0, 0)),), (32, 32), 4)
        with pytest.raises(InfeasibleChangeError):
            sd.apply_change(scene, sd.ChangeSpec("move", 0, (-1, 0)))

    def test_none_without_distractor_rejected(self):
        scene = sd.generate_scene(0, CFG)
        with pytest.raises(InfeasibleChangeError):
            sd.apply_change(scene, sd.ChangeSpec("none"))


def _move_ok(scene, idx, step):
    o = scene.objects[idx]
    dest = (o.position[0] + step[0], o.position[1] + step[1])
    return (0 <= dest[0] < scene.grid and 0 <= dest[1] < scene.grid
            and dest not in scene.occupied_cells())


def _first_legal_move(scene):
    for idx in range(len(scene.objects)):
        for step in sd.DIRECTIONS.values():
            if _move_ok(scene, idx, step):
                return idx, step
    return None


class TestRender:
    def test_empty_scene_uniform(self):
        scene = sd.SceneState((), (32, 32), 4)
        img = sd.render(scene, 32)
        assert np.allclose(img, np.asarray(sd.BACKGROUND, dtype=np.float32))

    def test_illumination_is_multiplicative(self):
        scene = sd.generate_scene(5, CFG)
        dark = sd.SceneState(scene.objects, scene.canvas_size, scene.grid,
                             illumination=0.5)
        np.testing.assert_allclose(
            sd.render(dark, 32), np.clip(0.5 * sd.render(scene, 32), 0, 1),
            atol=1e-6)

    def test_single_object_confined_to_cell(self):
        scene = sd.SceneState(
            (sd.ObjectSpec("triangle", "green", "large", (2, 1)),), (32, 32), 4)
        img = sd.render(scene, 32)
        bg = np.asarray(sd.BACKGROUND, dtype=np.float32)
        nonbg = np.any(np.abs(img - bg) > 1e-6, axis=-1)
        r0, r1, c0, c1 = _bbox_for_cell((2, 1), 4, 32)
        outside = nonbg.copy()
        outside[r0:r1, c0:c1] = False
        assert nonbg[r0:r1, c0:c1].any()
        assert not outside.any()

    def test_values_in_unit_range(self):
        for seed in range(5):
            scene = sd.generate_scene(seed, CFG)
            bright = sd.SceneState(scene.objects, scene.canvas_size,
                                   scene.grid, illumination=1.5)
            img = sd.render(bright, 32)
            assert img.min() >= 0.0 and img.max() <= 1.0


class TestGrammar:
    def test_drop_template(self):
        scene = sd.SceneState(
            (sd.ObjectSpec("square", "red", "large", (0, 0)),), (32, 32), 4)
        cap = sd.caption_of(sd.ChangeSpec("drop", 0), scene, sd.Grammar())
        assert cap.text == "the large red square has disappeared"

    def test_none_template(self):
        scene = sd.generate_scene(0, CFG)
        change = sd.ChangeSpec("none", distractor="viewpoint_shift",
                               distractor_value=(1, 1))
        cap = sd.caption_of(change, scene, sd.Grammar())
        assert cap.text == "the scene remains the same"

    def test_token_ids_round_trip(self):
        vocab = sd.default_vocabulary()
        scene = sd.generate_scene(4, CFG)
        change = sd.sample_change(scene, 4, CFG)
        cap = sd.caption_of(change, scene, sd.Grammar(), vocab)
        assert vocab.decode(cap.token_ids) == cap.surface

    def test_parse_round_trip_exhaustive_two_object_scene(self):
        # enumerate every legal change on a fixed 2-object scene
        grammar = sd.Grammar()
        scene = sd.SceneState(
            (sd.ObjectSpec("square", "red", "large", (1, 1)),
             sd.ObjectSpec("circle", "blue", "small", (2, 3))),
            (32, 32), 4)
        changes = []
        for i in range(2):
            changes.append(sd.ChangeSpec("drop", i))
            for color in sd.COLOR_NAMES:
                if color != scene.objects[i].color:
                    changes.append(sd.ChangeSpec("color", i, color))
            for step in sd.DIRECTIONS.values():
                if _move_ok(scene, i, step):
                    changes.append(sd.ChangeSpec("move", i, step))
        for sh in sd.SHAPES:
            for co in sd.COLOR_NAMES:
                for si in sd.SIZES:
                    changes.append(sd.ChangeSpec(
                        "add", -1, sd.ObjectSpec(sh, co, si, (0, 0))))
        changes.append(sd.ChangeSpec("none", distractor="illumination_shift",
                                     distractor_value=0.8))
        assert len(changes) > 40
        for change in changes:
            expected = sd.slots_of(change, scene)
            cap = sd.caption_of(change, scene, grammar)
            assert grammar.parse(cap.text) == expected

    def test_parse_rejects_gibberish(self):
        grammar = sd.Grammar()
        assert grammar.parse("purple monkey dishwasher") is None
        assert grammar.parse("the large red square has exploded") is None

    def test_vocabulary_matches_exhaustive_enumeration(self):
        # independently enumerate every template instantiation
        grammar = sd.Grammar()
        words = set()
        for si, co, sh in itertools.product(sd.SIZES, sd.COLOR_NAMES, sd.SHAPES):
            for nc in sd.COLOR_NAMES:
                words.update(grammar.caption_words(
                    sd.Slots("color", si, co, sh, new_color=nc)))
            for dr in sd.DIRECTIONS:
                words.update(grammar.caption_words(
                    sd.Slots("move", si, co, sh, direction=dr)))
            words.update(grammar.caption_words(sd.Slots("add", si, co, sh)))
            words.update(grammar.caption_words(sd.Slots("drop", si, co, sh)))
        words.update(grammar.caption_words(sd.Slots("none")))
        vocab = sd.default_vocabulary()
        assert len(vocab) == len(words) + len(sd.RESERVED_TOKENS)
        assert set(grammar.vocabulary_words()) == words


class TestOracleProcedure:
    def test_move_midpoint_position(self):
        scene = sd.SceneState(
            (sd.ObjectSpec("square", "red", "large", (1, 1)),), (32, 32), 4)
        change = sd.ChangeSpec("move", 0, (1, 0))
        proc = sd.oracle_procedure(scene, change, 1, 32)
        expected = sd.frame_at(scene, change, 0.5, 32)
        np.testing.assert_array_equal(proc.frames[0], expected)
        # centroid of the moved object sits between the two cell centers
        bg = np.asarray(sd.BACKGROUND, dtype=np.float32)
        mask = np.any(np.abs(proc.frames[0] - bg) > 1e-6, axis=-1)
        rows = np.where(mask.any(axis=1))[0]
        center_row = (rows.min() + rows.max()) / 2
        assert abs(center_row - 16.0) <= 1.0   # halfway between rows 12 and 20

    def test_boundaries_bit_exact(self):
        for seed in range(6):
            scene = sd.generate_scene(seed, CFG)
            change = sd.sample_change(scene, seed, CFG)
            after = sd.apply_change(scene, change)
            np.testing.assert_array_equal(
                sd.frame_at(scene, change, 0.0, 32), sd.render(scene, 32))
            np.testing.assert_array_equal(
                sd.frame_at(scene, change, 1.0, 32), sd.render(after, 32))

    def test_drop_fades_monotonically(self):
        scene = sd.SceneState(
            (sd.ObjectSpec("circle", "yellow", "large", (1, 2)),), (32, 32), 4)
        change = sd.ChangeSpec("drop", 0)
        proc = sd.oracle_procedure(scene, change, 7, 32)
        r0, r1, c0, c1 = _bbox_for_cell((1, 2), 4, 32)
        means = [f[r0:r1, c0:c1].mean() for f in proc.frames]
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_distractor_only_frames_match_interpolated_offset(self):
        scene = sd.generate_scene(7, CFG)
        change = sd.ChangeSpec("none", distractor="viewpoint_shift",
                               distractor_value=(2, -2))
        proc = sd.oracle_procedure(scene, change, 7, 32)
        for t, frame in zip(proc.timestamps, proc.frames):
            np.testing.assert_array_equal(
                frame, sd.frame_at(scene, change, t, 32))

    def test_unchanged_objects_pixel_identical(self):
        scene = sd.SceneState(
            (sd.ObjectSpec("square", "red", "large", (0, 0)),
             sd.ObjectSpec("circle", "blue", "small", (3, 3))),
            (32, 32), 4)
        change = sd.ChangeSpec("drop", 0)
        proc = sd.oracle_procedure(scene, change, 7, 32)
        r0, r1, c0, c1 = _bbox_for_cell((3, 3), 4, 32)
        ref = sd.render(scene, 32)[r0:r1, c0:c1]
        for frame in proc.frames:
            np.testing.assert_array_equal(frame[r0:r1, c0:c1], ref)


class TestBuildDataset:
    def test_split_sizes_and_rebuild_identical(self, tmp_path):
        cfg = DataConfig(num_pairs=100, seed=3)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        m1 = sd.build_dataset(cfg, out1)
        assert {s: len(m.records) for s, m in m1.items()} == \
            {"train": 80, "val": 10, "test": 10}
        sd.build_dataset(cfg, out2)
        for split in ("train", "val", "test"):
            assert (out1 / f"manifest.{split}.jsonl").read_bytes() == \
                (out2 / f"manifest.{split}.jsonl").read_bytes()
        sample = m1["train"].records[0]
        assert (out1 / sample.before_path).exists()
        img1 = (out1 / sample.before_path).read_bytes()
        img2 = (out2 / sample.before_path).read_bytes()
        assert img1 == img2

    def test_refuses_overwrite_without_force(self, tmp_path):
        from changecap.errors import ConfigError

        cfg = DataConfig(num_pairs=10)
        sd.build_dataset(cfg, tmp_path)
        with pytest.raises(ConfigError):
            sd.build_dataset(cfg, tmp_path)
        sd.build_dataset(cfg, tmp_path, force=True)

    def test_manifest_round_trip(self, tmp_path):
        cfg = DataConfig(num_pairs=12, seed=1)
        sd.build_dataset(cfg, tmp_path)
        manifest = sd.read_manifest(tmp_path, "train")
        rec = manifest.records[0]
        assert (tmp_path / rec.before_path).exists()
        assert (tmp_path / rec.after_path).exists()
        change = sd.change_from_dict(rec.change_spec)
        scene = sd.generate_scene(rec.seed, cfg)
        np.testing.assert_allclose(
            sd.load_png(tmp_path / rec.before_path), sd.render(scene, 32),
            atol=1 / 255)
        cap = sd.caption_of(change, scene, sd.Grammar(), manifest.vocab)
        assert cap.text == rec.captions[0]

    def test_vocabulary_covers_all_captions(self, tmp_path):
        cfg = DataConfig(num_pairs=30, seed=2)
        manifests = sd.build_dataset(cfg, tmp_path)
        vocab = manifests["train"].vocab
        for m in manifests.values():
            for rec in m.records:
                for word in rec.captions[0].split():
                    assert word in vocab.word_to_id

    def test_png_round_trip_quantization(self, tmp_path):
        scene = sd.generate_scene(9, CFG)
        img = sd.render(scene, 32)
        path = tmp_path / "f.png"
        sd.save_png(img, path)
        back = sd.load_png(path)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
