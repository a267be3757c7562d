import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import set_iou
from s3net.data import (
    ConfusionMatrix,
    DataError,
    LabelMap,
    Scan,
    evaluate,
    export_attention,
    read_labels,
    read_scan,
    scan_files,
    write_attention,
    write_labels,
    write_scan,
)
from s3net.pipeline import voxel_majority


@pytest.fixture(scope="module")
def label_map():
    return LabelMap.load()


def test_scan_records_are_16_bytes(tmp_path):
    pts = np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32)
    write_scan(tmp_path / "s.bin", Scan(pts, np.array([0.5, 0.25], np.float32)))
    raw = (tmp_path / "s.bin").read_bytes()
    assert len(raw) == 32
    assert np.frombuffer(raw, "<f4").tolist() == [1, 2, 3, 0.5, 4, 5, 6, 0.25]
    back = read_scan(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.points, pts)
    assert (tmp_path / "s.bin").read_bytes() == raw


def test_scan_size_errors(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\0" * 20)
    with pytest.raises(DataError, match="multiple of 16"):
        read_scan(tmp_path / "bad.bin")


def test_label_upper_bits_are_instance(tmp_path):
    write_labels(tmp_path / "l.label", np.array([0x00010028, 10], dtype=np.uint32))
    np.testing.assert_array_equal(read_labels(tmp_path / "l.label"), [40, 10])
    with pytest.raises(DataError, match="2 labels"):
        read_labels(tmp_path / "l.label", point_count=3)


def test_remap_examples(label_map):
    assert label_map.class_count == 19
    assert label_map.class_names[0] == "car" and label_map.class_names[18] == "traffic-sign"
    np.testing.assert_array_equal(label_map.remap([0, 1, 10, 252, 259, 81, 99]), [255, 255, 0, 0, 4, 18, 255])
    np.testing.assert_array_equal(label_map.to_raw(np.arange(19)), sorted(label_map.learning_map_inv[c] for c in range(19)))
    with pytest.raises(DataError, match="12345"):
        label_map.remap([12345])


def test_remap_histogram_oracle(label_map):
    rng = np.random.default_rng(0)
    raw_ids = np.array(sorted(label_map.learning_map))
    raw = rng.choice(raw_ids, 5000) | (rng.integers(0, 100, 5000) << 16)
    out = label_map.remap(raw)
    expected = np.zeros(256, dtype=np.int64)
    for r in raw:
        expected[label_map.learning_map[int(r) & 0xFFFF]] += 1
    np.testing.assert_array_equal(np.bincount(out, minlength=256), expected)


def test_voxel_majority_ties_to_lowest():
    p2r = np.array([0, 0, 0, 1, 1, 2])
    labels = np.array([3, 1, 3, 2, 1, 255])
    np.testing.assert_array_equal(voxel_majority(p2r, labels, 3, 255), [3, 1, 255])


def test_perfect_and_disjoint_predictions():
    truth = np.array([0, 1, 2, 2, 255])
    _, iou, miou = evaluate(truth, truth, 3)
    assert miou == 1.0
    _, iou, miou = evaluate(np.array([1, 2, 0, 0, 0]), truth, 3)
    assert miou == 0.0


def test_absent_class_is_nan():
    _, iou, miou = evaluate(np.array([0, 0]), np.array([0, 0]), 3)
    assert iou[0] == 1.0 and np.isnan(iou[1:]).all() and miou == 1.0


def test_confusion_matches_set_oracle():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 6, 10_000)
    truth[rng.random(10_000) < 0.05] = 255
    pred = np.where(rng.random(10_000) < 0.6, truth, rng.integers(0, 6, 10_000)) % 256
    pred[truth == 255] = rng.integers(0, 6, (truth == 255).sum())
    cm, iou, miou = evaluate(pred, truth, 6)
    oracle = set_iou(pred, truth, 6)
    np.testing.assert_array_equal(iou, oracle)
    assert miou == np.mean(oracle)
    assert cm.total == (truth != 255).sum()


def test_merge_equals_single_update():
    rng = np.random.default_rng(2)
    p, t = rng.integers(0, 4, (2, 300))
    whole = ConfusionMatrix(4).update(p, t)
    parts = ConfusionMatrix(4).update(p[:100], t[:100]).merge(ConfusionMatrix(4).update(p[100:], t[100:]))
    np.testing.assert_array_equal(whole.counts, parts.counts)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_evaluation_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(0, 5, (2, 200))
    perm = rng.permutation(200)
    np.testing.assert_array_equal(evaluate(p, t, 5)[0].counts, evaluate(p[perm], t[perm], 5)[0].counts)


def test_attention_ties_and_count():
    feats = np.ones((100, 3))
    np.testing.assert_array_equal(export_attention(feats, 0.02), [0, 1])
    assert len(export_attention(np.ones((101, 3)), 0.02)) == 3


def test_attention_picks_dominant_row():
    rng = np.random.default_rng(3)
    feats = rng.uniform(0.5, 1, (200, 4))
    feats[57] *= 10
    assert export_attention(feats, 0.005)[0] == 57


def test_attention_sort_oracle():
    rng = np.random.default_rng(4)
    feats = rng.standard_normal((500, 6))
    norms = np.linalg.norm(feats, axis=1)
    expected = sorted(range(500), key=lambda i: (-norms[i], i))[:10]
    np.testing.assert_array_equal(export_attention(feats, 0.02), expected)


def test_attention_files(tmp_path):
    pts = np.arange(12.0).reshape(4, 3)
    txt, xyz = write_attention(tmp_path / "att", np.array([2, 0]), pts)
    assert txt.read_text() == "2\n0\n"
    np.testing.assert_allclose(np.loadtxt(xyz), pts[[2, 0]])


def test_scan_files_pairs(tmp_path):
    seq = tmp_path / "sequences" / "08"
    (seq / "velodyne").mkdir(parents=True)
    (seq / "labels").mkdir()
    for i in range(2):
        (seq / "velodyne" / f"{i:06d}.bin").write_bytes(b"")
        (seq / "labels" / f"{i:06d}.label").write_bytes(b"")
    pairs = scan_files(tmp_path, [8])
    assert [(s.name, l.name) for s, l in pairs] == [("000000.bin", "000000.label"), ("000001.bin", "000001.label")]
