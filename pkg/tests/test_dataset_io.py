import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agfv.dataset_io import (
    FORMAT_VERSION,
    Checkpoint,
    SynthConfig,
    dumps_checkpoint,
    dumps_manifest,
    load_checkpoint,
    load_external_scores,
    load_images,
    load_manifest,
    loads_checkpoint,
    parse_manifest,
    parse_scores,
    read_pgm,
    save_checkpoint,
    synth_generate,
    tree_digest,
    write_dataset,
    write_pgm,
    write_scores,
)
from agfv.errors import CheckpointError, DimensionError, ManifestError, ScoreFileError
from agfv.network import desk32, embedding_config, init_params
from agfv.similarity import build_score_vector
from agfv.tensor import make_rng

from helpers import raw_pixel_accuracy

# raw-pixel two-fold accuracies at gamma 0 / 0.5 / 1 (n=40, k=8, aligned 32 px)
GAMMA_ACCURACY = {
    0: (0.6209821428571429, 0.5870535714285714, 0.55625),
    1: (0.5941964285714285, 0.5723214285714285, 0.5517857142857143),
    2: (0.6169642857142857, 0.5821428571428572, 0.5522321428571428),
}
# mean raw-pixel distances at gamma 1, 20 identities x 8 images, seed 3
WITHIN_MEAN, CROSS_MEAN = 17.201210652417412, 18.045749585692718


def _line(**over):
    rec = {"id": "a", "path": "a/0.pgm", "eye_l": [10, 20], "eye_r": [30, 20.5], "age": "young"}
    rec.update(over)
    return json.dumps({k: v for k, v in rec.items() if v is not None})


# -- manifest ---------------------------------------------------------------


def test_empty_manifest():
    assert len(parse_manifest("")) == 0


def test_two_lines_in_order():
    m = parse_manifest(_line() + "\n" + _line(id="b", path="b/0.pgm", age="old") + "\n")
    assert [r.id for r in m] == ["a", "b"]
    assert m.records[0].eyes.right == (30.0, 20.5) and m.records[1].age == "old"
    assert m.records[0].image_key == "a/0"


def test_missing_eye_r_cites_line_and_field():
    with pytest.raises(ManifestError, match=r"line 1: missing field 'eye_r'"):
        parse_manifest(_line(eye_r=None))


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("{not json", "line 1: malformed JSON"),
        ("[1, 2]", "line 1: expected a JSON object"),
        (_line(id=""), "line 1: field 'id'"),
        (_line(path=None), "line 1: missing field 'path'"),
        (_line(eye_l=[1, "x"]), "line 1: field 'eye_l'"),
        (_line(eye_l=[1, 2, 3]), "line 1: field 'eye_l'"),
        (_line(age=None), "line 1: missing field 'age'"),
        (_line(age="teen"), "line 1: field 'age'"),
        (_line() + "\n" + _line(id="b"), "line 2: duplicate path"),
        ("\n" + _line(eye_l=None), "line 2: missing field 'eye_l'"),
    ],
)
def test_manifest_validation_errors(text, pattern):
    with pytest.raises(ManifestError, match=pattern):
        parse_manifest(text)


def test_manifest_round_trip(tmp_path):
    m = parse_manifest(_line() + "\n" + _line(id="b", path="b/1.pgm"))
    (tmp_path / "m.jsonl").write_text(dumps_manifest(m.records))
    again = load_manifest(tmp_path / "m.jsonl")
    assert again.records == m.records and again.root == tmp_path


# -- pgm --------------------------------------------------------------------


def test_pgm_round_trip(tmp_path, rng):
    px = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
    write_pgm(tmp_path / "x.pgm", px)
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), px)


def test_pgm_with_comment_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert np.array_equal(read_pgm(tmp_path / "c.pgm"), [[1, 2]])
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(tmp_path / "t.pgm")
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n7")
    with pytest.raises(ValueError, match="P5"):
        read_pgm(tmp_path / "a.pgm")


# -- scores -----------------------------------------------------------------


def test_scores_cover_all_pairs(tmp_path):
    write_scores(tmp_path / "oss.csv", {"a/0|b/0": 0.5, "a/1|b/0": 1.5})
    prov = load_external_scores(tmp_path / "oss.csv", ["a/1|b/0", "a/0|b/0"])
    assert prov.id == "ext:oss"
    v = build_score_vector(None, None, [prov], "a/1|b/0")
    assert list(v.scores) == [1.5]


def test_missing_pair_named():
    with pytest.raises(ScoreFileError, match=r"missing pair 'x\|y'"):
        parse_scores("pair_id,score\na|b,1\n", ["a|b", "x|y"])


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("pair_id,score\na|b,1\na|b,2\n", "duplicate pair 'a|b'"),
        ("pair_id,score\na|b,abc\n", "non-numeric score"),
        ("pair_id,score\na|b,nan\n", "non-finite"),
        ("pair,score\na|b,1\n", "header"),
        ("pair_id,score\na|b,1,2\n", "2 columns"),
        ("", "header"),
    ],
)
def test_score_file_errors(text, pattern):
    with pytest.raises(ScoreFileError, match=pattern):
        parse_scores(text, ["a|b"])


# -- checkpoints ------------------------------------------------------------


def _checkpoint(precision="float64"):
    net = embedding_config(desk32(4), 2)
    params = init_params(net, np.random.default_rng(0), precision)
    params.velocity = {k: np.random.default_rng(1).normal(size=v.shape).astype(v.dtype) for k, v in params.weights.items()}
    return Checkpoint(net, params, 7, np.array([0.1, 0.2]), np.array([1.0, 3.0]), 0.8, {"kind": "siamese"})


@pytest.mark.parametrize("precision", ["float64", "float32"])
def test_checkpoint_bitwise_round_trip(tmp_path, precision):
    ck = _checkpoint(precision)
    save_checkpoint(ck, tmp_path / "m.agfv", with_velocity=True)
    back = load_checkpoint(tmp_path / "m.agfv", ck.network)
    for k, v in ck.params.weights.items():
        assert back.params[k].dtype == v.dtype and back.params[k].tobytes() == v.tobytes()
        assert back.params.velocity[k].tobytes() == ck.params.velocity[k].tobytes()
    assert np.array_equal(back.stats_std, ck.stats_std) and back.tau == 0.8 and back.seed == 7
    assert back.network == ck.network and back.meta == {"kind": "siamese"}
    assert dumps_checkpoint(back, True) == dumps_checkpoint(ck, True)


def test_checkpoint_header_layout():
    data = dumps_checkpoint(_checkpoint())
    assert data[:4] == b"AGFV"
    assert int.from_bytes(data[4:6], "little") == FORMAT_VERSION


def test_truncated_checkpoint():
    data = dumps_checkpoint(_checkpoint())
    with pytest.raises(CheckpointError, match="truncated tensor"):
        loads_checkpoint(data[:-1])


def test_bad_magic_and_version():
    data = dumps_checkpoint(_checkpoint())
    with pytest.raises(CheckpointError, match="bad magic"):
        loads_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version 2"):
        loads_checkpoint(data[:4] + (2).to_bytes(2, "little") + data[6:])
    with pytest.raises(CheckpointError, match="trailing"):
        loads_checkpoint(data + b"\0")


def test_checkpoint_into_mismatched_network():
    data = dumps_checkpoint(_checkpoint())
    other = embedding_config(desk32(4), 3)
    with pytest.raises(DimensionError, match="fc7"):
        loads_checkpoint(data, other)


# -- synthetic generator ----------------------------------------------------


def test_synth_counts_and_eyes_in_bounds():
    samples = synth_generate(3, 5, 0.7, np.random.default_rng(0))
    assert len(samples) == 15
    assert [s.record.age for s in samples[:5]] == ["young", "young", "old", "old", "old"]
    for s in samples:
        s.record.eyes.validate(s.image.width, s.image.height)


@settings(max_examples=10)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_synth_record_count_property(n, k, gamma, seed):
    cfg = replace(SynthConfig(), raw_side=40, half_eye_distance=5.0, pose_shift=1.0)
    samples = synth_generate(n, k, gamma, np.random.default_rng(seed), cfg)
    assert len(samples) == n * k
    for s in samples:
        s.record.eyes.validate(s.image.width, s.image.height)


def test_synth_deterministic():
    a = synth_generate(2, 3, 0.5, np.random.default_rng(4))
    b = synth_generate(2, 3, 0.5, np.random.default_rng(4))
    assert all(np.array_equal(x.image.pixels, y.image.pixels) and x.record == y.record for x, y in zip(a, b))


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_generate(0, 3, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        synth_generate(1, 3, 1.5, np.random.default_rng(0))


def test_gamma_zero_young_and_old_differ_only_by_noise():
    # other nuisances zeroed so the only difference left is the pixel noise
    quiet = SynthConfig(pose_rotation_deg=0, pose_scale=0, pose_shift=0, illumination=0, expression=0)
    silent = replace(quiet, pixel_noise=0.0)
    clean = synth_generate(4, 4, 0.0, np.random.default_rng(2), silent)
    for i in range(0, 16, 4):
        assert all(np.array_equal(clean[i].image.pixels, clean[i + j].image.pixels) for j in range(1, 4))
    noisy = synth_generate(4, 4, 0.0, np.random.default_rng(2), quiet)
    for i in range(0, 16, 4):
        young, old = noisy[i].image.pixels / 255.0, noisy[i + 3].image.pixels / 255.0
        # E|n1 - n2| = 2 sigma / sqrt(pi) for two independent normal draws
        assert np.mean(np.abs(young - old)) < 2 * quiet.pixel_noise / np.sqrt(np.pi) * 1.1
    warped = synth_generate(4, 4, 1.0, np.random.default_rng(2), silent)
    assert not np.array_equal(warped[0].image.pixels, warped[3].image.pixels)


def test_gamma_one_cross_identity_farther_than_within():
    samples = synth_generate(20, 8, 1.0, make_rng(3))
    by = {}
    for s in samples:
        by.setdefault(s.record.id, []).append(s.image.pixels / 255.0)
    ids = list(by)
    within = [np.linalg.norm(a - b) for i in ids for x, a in enumerate(by[i]) for b in by[i][x + 1 :]]
    cross = [
        np.linalg.norm(a - b) for x, i in enumerate(ids) for j in ids[x + 1 :] for a in by[i] for b in by[j]
    ]
    assert np.mean(cross) > np.mean(within)
    assert abs(np.mean(within) - WITHIN_MEAN) < 1e-9 and abs(np.mean(cross) - CROSS_MEAN) < 1e-9


@pytest.mark.parametrize("seed", sorted(GAMMA_ACCURACY))
def test_age_gap_difficulty_monotone(seed):
    accs = tuple(raw_pixel_accuracy(g, seed) for g in (0.0, 0.5, 1.0))
    assert accs[0] >= accs[1] >= accs[2]
    assert accs == GAMMA_ACCURACY[seed]


def test_dataset_write_and_reload(tmp_path):
    samples = synth_generate(2, 2, 0.3, np.random.default_rng(0))
    manifest_path = write_dataset(tmp_path / "ds", samples)
    m = load_manifest(manifest_path)
    images = load_images(m)
    assert [im.source_id for im in images] == [s.record.image_key for s in samples]
    assert all(np.array_equal(im.pixels, s.image.pixels) for im, s in zip(images, samples))
    digest = tree_digest(tmp_path / "ds")
    write_dataset(tmp_path / "ds2", samples)
    assert tree_digest(tmp_path / "ds2") == digest


def test_missing_image_is_manifest_error(tmp_path):
    (tmp_path / "m.jsonl").write_text(_line() + "\n")
    with pytest.raises(ManifestError, match="a/0"):
        load_images(load_manifest(tmp_path / "m.jsonl"))
