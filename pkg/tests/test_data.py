import csv
from collections import Counter

import numpy as np
import pytest

from ctnet.data import (
    BatchStream,
    SampleRecord,
    age_bucket,
    batch_stream_next,
    bilinear_resize,
    build_balanced_splits,
    crop_resize,
    dataset_stats,
    format_stats,
    load_image,
    parse_metadata,
    png_bytes,
    preprocess_image,
    read_png,
    scan_tree,
    write_png,
    write_rejections,
    write_stats_csv,
)
from ctnet.errors import DataError
from ctnet.synthetic import write_metadata_fixture, write_texture_tree
from ctnet.tensor import SeededRng
from oracles import scalar_bilinear

HEADER = "filename,class,split,xmin,ymin,xmax,ymax,country,sex,age\n"


def write_csv(path, body, header=HEADER):
    path.write_text(header + body)
    return path


# --- metadata ----------------------------------------------------------------


def test_parse_three_rows(tmp_path):
    p = write_csv(tmp_path / "m.csv", "a.png,0,train,0,0,4,4,,,\nb.png,1,valid,1,1,3,3,,,\nc.png,2,test,0,0,2,2,,,\n")
    records, rejects = parse_metadata(p)
    assert len(records) == 3 and rejects == []


def test_bad_bbox_is_reported_with_row_number(tmp_path):
    p = write_csv(tmp_path / "m.csv", "a.png,0,train,0,0,4,4,,,\nb.png,1,train,5,0,3,4,,,\nc.png,2,train,0,0,x,4,,,\n")
    records, rejects = parse_metadata(p)
    assert [r.filename for r in records] == ["a.png"]
    assert [r.row for r in rejects] == [3, 4]
    assert "bounding box" in rejects[0].reason
    write_rejections(tmp_path / "rej.csv", rejects)
    assert (tmp_path / "rej.csv").read_text().splitlines()[0] == "row,reason"


def test_unknown_label_rejected(tmp_path):
    p = write_csv(tmp_path / "m.csv", "a.png,flu,train,0,0,4,4,,,\nb.png,COVID-19,train,0,0,4,4,,,\n")
    records, rejects = parse_metadata(p)
    assert records[0].label == 2 and len(rejects) == 1


def test_nine_row_fixture_field_by_field(tmp_path):
    meta, _ = write_metadata_fixture(tmp_path, size=64)
    records, rejects = parse_metadata(meta)
    assert rejects == []
    assert len(records) == 9
    r = records[4]
    assert r == SampleRecord("ct_004.png", 1, (4, 4, 60, 60), "valid", "Iran", "M", 67)
    assert records[2] == SampleRecord("ct_002.png", 2, (4, 4, 60, 60), "train", "USA", "", None)
    assert [x.split for x in records] == ["train"] * 3 + ["valid"] * 3 + ["test"] * 3
    assert [x.label for x in records] == [0, 1, 2] * 3


def test_metadata_errors(tmp_path):
    with pytest.raises(DataError, match="does not exist"):
        parse_metadata(tmp_path / "missing.csv")
    p = write_csv(tmp_path / "m.csv", "a.png,0,train\n", header="filename,class,split\n")
    with pytest.raises(DataError, match="xmin"):
        parse_metadata(p)
    p = write_csv(tmp_path / "d.csv", "a.png,0,train,0,0,4,4,,,\na.png,1,train,0,0,4,4,,,\n")
    with pytest.raises(DataError, match="twice"):
        parse_metadata(p)


# --- images ----------------------------------------------------------------------


def test_checkerboard_bilinear_matches_scalar_oracle():
    board = [[255.0 * ((i + j) % 2) for j in range(4)] for i in range(4)]
    got = bilinear_resize(np.array(board), 8, 8)
    np.testing.assert_allclose(got, scalar_bilinear(board, 8, 8), rtol=0, atol=1e-12)
    # hand values: corner pixels replicate, the second column sits 3/4 of the way to its neighbour
    assert got[0, 0] == 0 and got[0, 1] == pytest.approx(0.25 * 255)
    assert got[1, 1] == pytest.approx(255 * (0.75 * 0.25 + 0.25 * 0.75))


def test_bilinear_downscale_matches_oracle():
    a = SeededRng(1).uniform((9, 7)) * 255
    np.testing.assert_allclose(bilinear_resize(a, 4, 5), scalar_bilinear(a.tolist(), 4, 5), atol=1e-12)


def test_preprocess_noop_path_is_pixel_identical():
    img = (SeededRng(2).uniform((16, 16, 3)) * 255).astype(np.uint8)
    out = read_png(preprocess_image(png_bytes(img), (0, 0, 16, 16), 16))
    assert np.array_equal(out, img)


def test_preprocess_512_to_224(tmp_path):
    img = (SeededRng(3).uniform((512, 512)) * 255).astype(np.uint8)
    write_png(tmp_path / "a.png", img)
    out = read_png(preprocess_image(tmp_path / "a.png", (40, 60, 500, 470)))
    assert out.shape == (224, 224, 3)
    assert preprocess_image(tmp_path / "a.png", (40, 60, 500, 470)) == preprocess_image(
        tmp_path / "a.png", (40, 60, 500, 470)
    )


def test_preprocess_errors(tmp_path):
    img = np.zeros((8, 8, 3), np.uint8)
    with pytest.raises(DataError, match="outside"):
        crop_resize(img, (0, 0, 9, 8), 4)
    (tmp_path / "x.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="x.png"):
        preprocess_image(tmp_path / "x.png", (0, 0, 4, 4))
    from PIL import Image

    Image.fromarray(img).save(tmp_path / "y.bmp")
    with pytest.raises(DataError, match="PNG"):
        read_png(tmp_path / "y.bmp")


# --- splits ---------------------------------------------------------------------


def recs(counts, split="train", prefix=""):
    return [
        SampleRecord(f"{prefix}{split}_{label}_{i}.png", label, (0, 0, 1, 1), split)
        for label, n in enumerate(counts)
        for i in range(n)
    ]


def test_min_rule():
    plan = build_balanced_splits(recs((10, 7, 12)), seed=1)
    assert plan.counts() == {"train": {0: 7, 1: 7, 2: 7}}
    assert len(plan.records("train")) == 21


def test_already_balanced_unchanged():
    rs = recs((5, 5, 5))
    assert build_balanced_splits(rs, seed=1).records("train") == rs


def test_selection_reproducible_and_seeded():
    rs = recs((30, 9, 40))
    a = build_balanced_splits(rs, 4).records("train")
    assert a == build_balanced_splits(rs, 4).records("train")
    assert a != build_balanced_splits(rs, 5).records("train")


def test_balancing_at_one_hundredth_scale():
    # Balanced per-class sizes 27,797 / 5,099 / 7,395 scale to 278 / 51 / 74; the
    # other classes are larger, with COVID-19 dominating train as in the source data.
    rs = recs((352, 278, 1163), "train") + recs((51, 98, 120), "valid") + recs((74, 120, 156), "test")
    plan = build_balanced_splits(rs, seed=7)
    assert plan.counts() == {
        "train": {0: 278, 1: 278, 2: 278},
        "valid": {0: 51, 1: 51, 2: 51},
        "test": {0: 74, 1: 74, 2: 74},
    }
    names = [set(r.filename for r in plan.records(s)) for s in ("train", "valid", "test")]
    assert not (names[0] & names[1] or names[0] & names[2] or names[1] & names[2])


def test_split_errors():
    with pytest.raises(DataError, match="COVID-19"):
        build_balanced_splits(recs((3, 3, 0)), 1)
    clash = recs((1, 1, 1), "train") + [SampleRecord("train_0_0.png", 0, (0, 0, 1, 1), "test")]
    with pytest.raises(DataError, match="both"):
        build_balanced_splits(clash, 1)


# --- batch stream ---------------------------------------------------------------


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    return write_texture_tree(tmp_path_factory.mktemp("tex"), {"train": 4, "valid": 2}, size=16, seed=3)


def test_batch_sizes(tree):
    items = scan_tree(tree, "train")[:10]
    sizes = [len(y) for _, y in BatchStream(items, 4, seed=1, image_size=16).epoch(0)]
    assert sizes == [4, 4, 2]


def test_batch_stream_next(tree):
    it = BatchStream(scan_tree(tree, "valid"), 4, image_size=16).epoch(0)
    x, y = batch_stream_next(it)
    assert x.shape == (4, 3, 16, 16) and x.dtype == np.float32 and y.dtype == np.int64
    batch_stream_next(it)
    with pytest.raises(StopIteration):
        batch_stream_next(it)


def test_rescale_endpoints(tmp_path):
    write_png(tmp_path / "black.png", np.zeros((8, 8, 3), np.uint8))
    write_png(tmp_path / "white.png", np.full((8, 8, 3), 255, np.uint8))
    assert not load_image(tmp_path / "black.png", 8).any()
    assert np.all(load_image(tmp_path / "white.png", 8) == 1.0)
    assert np.all(load_image(tmp_path / "white.png", 8, rescale=False) == 255.0)


def _epoch(stream, e):
    return [(x.tobytes(), y.tolist()) for x, y in stream.epoch(e)]


def test_same_seed_same_order_across_prefetch_depths(tree):
    items = scan_tree(tree, "train")
    a = _epoch(BatchStream(items, 5, seed=9, prefetch=0, image_size=16), 1)
    b = _epoch(BatchStream(items, 5, seed=9, prefetch=8, image_size=16), 1)
    assert a == b
    c = BatchStream(items, 5, seed=10, image_size=16)
    assert not np.array_equal(c.order(1), BatchStream(items, 5, seed=9, image_size=16).order(1))


def test_epochs_differ_and_cover_every_item(tree):
    items = scan_tree(tree, "train")
    s = BatchStream(items, 5, seed=9, image_size=16)
    assert not np.array_equal(s.order(0), s.order(1))
    labels = [int(v) for _, y in s.epoch(2) for v in y]
    assert Counter(labels) == Counter(label for _, label in items)


def test_corrupt_file_named(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"\x89PNG garbage")
    with pytest.raises(DataError, match="broken.png"):
        list(BatchStream([(bad, 0)], 1, prefetch=2, image_size=8).epoch(0))


def test_scan_tree_errors(tree, tmp_path):
    with pytest.raises(DataError):
        scan_tree(tree, "test")
    (tmp_path / "train" / "Cats").mkdir(parents=True)
    with pytest.raises(DataError, match="Cats"):
        scan_tree(tmp_path, "train")


# --- stats ---------------------------------------------------------------------


def test_single_class_is_100_percent():
    rows = dataset_stats(recs((0, 0, 4)))
    cls = {r.category: r.percent for r in rows if r.table == "class"}
    assert cls == {"Normal": 0.0, "Pneumonia": 0.0, "COVID-19": 100.0}


def test_sex_distribution_fixture():
    sexes = ["F"] * 92 + ["M"] * 93 + [""] * 285
    rs = [SampleRecord(f"{i}.png", 2, (0, 0, 1, 1), "train", sex=s) for i, s in enumerate(sexes)]
    sex = {r.category: round(r.percent, 2) for r in dataset_stats(rs) if r.table == "sex"}
    assert sex == {"female": 19.57, "male": 19.79, "unknown": 60.64}


TWELVE = [
    ("a", 0, "train", "China", "F", 15),
    ("b", 0, "train", "Iran", "M", 35),
    ("c", 0, "valid", "Iran", "", None),
    ("d", 1, "train", "China", "M", 45),
    ("e", 1, "train", "China", "F", 62),
    ("f", 1, "test", "China", "", 85),
    ("g", 2, "train", "China", "F", 50),
    ("h", 2, "train", "USA", "M", 70),
    ("i", 2, "valid", "China", "F", 20),
    ("j", 2, "valid", "", "M", 40),
    ("k", 2, "test", "China", "", None),
    ("l", 2, "test", "Iran", "F", 81),
]

# (table, group, Normal, Pneumonia, COVID-19), counted by hand from TWELVE
TWELVE_CROSS = [
    ("class_by_split", "test", 0, 1, 2),
    ("class_by_split", "train", 2, 2, 2),
    ("class_by_split", "valid", 1, 0, 2),
    ("class_by_country", "China", 1, 3, 3),
    ("class_by_country", "Iran", 2, 0, 1),
    ("class_by_country", "USA", 0, 0, 1),
    ("class_by_country", "unknown", 0, 0, 1),
    ("class_by_age", "0-20", 1, 0, 1),
    ("class_by_age", "21-40", 1, 0, 1),
    ("class_by_age", "41-60", 0, 1, 1),
    ("class_by_age", "61-80", 0, 1, 1),
    ("class_by_age", "81+", 0, 1, 1),
    ("class_by_age", "unknown", 1, 0, 1),
]


def test_twelve_record_hand_table(tmp_path):
    rs = [SampleRecord(f + ".png", lab, (0, 0, 1, 1), sp, co, sx, ag) for f, lab, sp, co, sx, ag in TWELVE]
    rows = dataset_stats(rs)
    single = [(r.table, r.category, r.count) for r in rows if r.table in ("class", "sex")]
    assert single == [
        ("class", "Normal", 3), ("class", "Pneumonia", 3), ("class", "COVID-19", 6),
        ("sex", "female", 5), ("sex", "male", 4), ("sex", "unknown", 3),
    ]
    cross = [r for r in rows if r.table.startswith("class_by")]
    got = [(cross[i].table, cross[i].group, *(cross[i + k].count for k in range(3))) for i in range(0, len(cross), 3)]
    assert got == TWELVE_CROSS
    china = [r.percent for r in cross if r.table == "class_by_country" and r.group == "China"]
    assert china == pytest.approx([100 / 7, 300 / 7, 300 / 7])
    write_stats_csv(tmp_path / "s.csv", rows)
    with open(tmp_path / "s.csv") as f:
        parsed = list(csv.DictReader(f))
    assert len(parsed) == len(rows) and parsed[0]["percent"] == "25.0000"
    assert "[class_by_age]" in format_stats(rows)


def test_age_buckets():
    assert [age_bucket(a) for a in (None, 0, 20, 21, 40, 41, 60, 61, 80, 81, 120)] == [
        "unknown", "0-20", "0-20", "21-40", "21-40", "41-60", "41-60", "61-80", "61-80", "81+", "81+",
    ]
