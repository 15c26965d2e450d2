import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from g2g.dataset import (
    DatasetManifest,
    MaskEncoding,
    ManifestTriples,
    assign_splits,
    build_manifest,
    discover_sources,
    extract_contours,
    make_triple,
    overlay_contours,
    plan_manifests,
    proportional_split_counts,
    synthesize_fixture,
    write_sources,
)
from g2g.errors import InvalidArgumentError, InvalidLabelError, PairingError
from g2g.raster import FULL_SCALE_GRID, Raster, TileGridSpec


def brute_force_boundary(mask: np.ndarray) -> np.ndarray:
    """Building pixels with a background or out-of-image 8-neighbour."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                        out[y, x] = 1
    return out


def labels(a):
    return Raster(np.asarray(a, dtype=np.uint8), labels=True)


def test_empty_mask_has_no_contours():
    assert not extract_contours(labels(np.zeros((16, 16))), width=1).data.any()


def test_square_perimeter_ring():
    m = np.zeros((20, 20), dtype=np.uint8)
    m[5:15, 5:15] = 1
    c = extract_contours(labels(m), width=1).data[:, :, 0]
    assert c.sum() == 36
    assert np.array_equal(c, brute_force_boundary(m))


def test_border_touching_building():
    m = np.zeros((10, 10), dtype=np.uint8)
    m[0:4, 0:10] = 1
    c = extract_contours(labels(m), width=1).data[:, :, 0]
    assert np.array_equal(c, brute_force_boundary(m))
    assert c[0].all()  # the image edge counts as background


@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
@settings(max_examples=150)
def test_contours_match_brute_force(m):
    c = extract_contours(labels(m), width=1).data[:, :, 0]
    assert np.array_equal(c, brute_force_boundary(m))


@given(arrays(np.uint8, st.tuples(st.integers(1, 16), st.integers(1, 16)), elements=st.integers(0, 1)),
       st.integers(1, 4))
@settings(max_examples=100)
def test_overlay_collapse_reproduces_gt(m, width):
    gt = labels(m)
    c = extract_contours(gt, width=width)
    assert not (c.data[:, :, 0] & (1 - m)).any()  # contour inside building
    ov = overlay_contours(gt, c).data[:, :, 0]
    assert set(np.unique(ov)) <= {0, 1, 2}
    assert np.array_equal(np.where(ov == 2, 1, ov), m)


def test_width_two_band():
    m = np.zeros((20, 20), dtype=np.uint8)
    m[4:16, 4:16] = 1
    c = extract_contours(labels(m), width=2).data[:, :, 0]
    # two nested rings: 12x12 perimeter + 10x10 perimeter
    assert c.sum() == 44 + 36
    assert not c[6:14, 6:14].any()


def test_non_binary_gt_rejected():
    with pytest.raises(InvalidLabelError):
        extract_contours(labels([[0, 2], [1, 0]]))


def test_overlay_zero_contours_equals_gt():
    m = np.random.default_rng(0).integers(0, 2, size=(8, 8))
    ov = overlay_contours(labels(m), labels(np.zeros((8, 8))))
    assert np.array_equal(ov.data[:, :, 0], m)


def test_overlay_contour_wins():
    ov = overlay_contours(labels([[1, 1]]), labels([[1, 0]]))
    assert ov.data[:, :, 0].tolist() == [[2, 1]]


def test_overlay_histogram_matches_set_arithmetic():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 2, size=(32, 32))
    cont = rng.integers(0, 2, size=(32, 32))
    ov = overlay_contours(labels(gt), labels(cont)).data
    union = np.logical_or(gt == 1, cont == 1).sum()
    assert (ov == 1).sum() + (ov == 2).sum() == union


def test_overlay_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        overlay_contours(labels(np.zeros((4, 4))), labels(np.zeros((4, 5))))


def test_encoding_palette_distinct():
    with pytest.raises(InvalidArgumentError):
        MaskEncoding(palette=((0, 0, 0), (0, 0, 0), (1, 2, 3)))


def test_render_decode_round_trip():
    enc = MaskEncoding()
    m = labels(np.random.default_rng(2).integers(0, 3, size=(9, 9)))
    assert np.array_equal(enc.decode(enc.render(m)).data, m.data)


# --- manifests ---------------------------------------------------------------

def test_full_scale_split_counts():
    ids = [f"img{i:04d}" for i in range(234)]
    manifests = plan_manifests(ids, FULL_SCALE_GRID, (191, 21, 22), seed=0)
    assert {k: m.count for k, m in manifests.items()} == {"train": 6876, "val": 756, "test": 792}
    sets = [m.source_ids for m in manifests.values()]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert set().union(*sets) == set(ids)


def test_single_source_all_train():
    m = plan_manifests(["a"], FULL_SCALE_GRID, (1, 0, 0), seed=3)
    assert (m["train"].count, m["val"].count, m["test"].count) == (36, 0, 0)


def test_split_is_seeded():
    ids = [f"s{i}" for i in range(30)]
    a = assign_splits(ids, (20, 5, 5), 11)
    assert a == assign_splits(list(reversed(ids)), (20, 5, 5), 11)
    assert a != assign_splits(ids, (20, 5, 5), 12)


def test_split_counts_exceeding_sources():
    with pytest.raises(InvalidArgumentError):
        assign_splits(["a", "b"], (2, 1, 0), 0)


def test_proportional_split_counts():
    assert proportional_split_counts(234) == (191, 21, 22)
    assert proportional_split_counts(4) == (3, 0, 1)
    assert proportional_split_counts(1) == (1, 0, 0)
    assert proportional_split_counts(0) == (0, 0, 0)


def test_synthesize_empty():
    assert synthesize_fixture(0, 64, 0) == []


def test_synthesize_deterministic_and_valid():
    def digest(pairs):
        h = hashlib.sha256()
        for s, g in pairs:
            h.update(s.data.tobytes())
            h.update(g.data.tobytes())
        return h.hexdigest()

    a = synthesize_fixture(3, 256, seed=5)
    assert digest(a) == digest(synthesize_fixture(3, 256, seed=5))
    assert digest(a) != digest(synthesize_fixture(3, 256, seed=6))
    for sat, gt in a:
        assert sat.channels == 3 and 0 <= sat.data.min() and sat.data.max() <= 1
        assert set(np.unique(gt.data)) <= {0, 1}
        comp, n = ndimage.label(gt.data[:, :, 0], structure=np.ones((3, 3)))
        assert n > 0
        assert min(np.bincount(comp.ravel())[1:]) >= 9


SMALL_GRID = TileGridSpec(130, 128, 64, 32, 2)


@pytest.fixture
def sources(tmp_path):
    pairs = synthesize_fixture(4, 130, seed=1)
    return write_sources(pairs, tmp_path / "sources")


def test_build_manifest_writes_triples(tmp_path, sources):
    out = tmp_path / "data"
    manifests = build_manifest(sources, SMALL_GRID, (2, 1, 1), seed=0, out_root=out)
    assert {k: m.count for k, m in manifests.items()} == {"train": 8, "val": 4, "test": 4}
    for split, m in manifests.items():
        doc = json.loads((out / f"manifest_{split}.json").read_text())
        assert doc["count"] == m.count
        for e in m.entries:
            for key in ("sat", "gt", "overlay"):
                assert (out / e[key]).is_file()
            assert e[key].startswith(f"{split}/{key}/")
    triples = ManifestTriples(manifests["train"], out)
    t = triples[0]
    assert (t.satellite.height, t.gt_mask.height, t.overlay_mask.height) == (32, 32, 32)
    assert set(np.unique(t.overlay_mask.data)) <= {0, 1, 2}
    collapsed = np.where(t.overlay_mask.data == 2, 1, t.overlay_mask.data)
    assert np.array_equal(collapsed, t.gt_mask.data)


def test_build_manifest_is_byte_deterministic(tmp_path, sources):
    def snapshot(root):
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    build_manifest(sources, SMALL_GRID, (2, 1, 1), seed=9, out_root=tmp_path / "a")
    build_manifest(sources, SMALL_GRID, (2, 1, 1), seed=9, out_root=tmp_path / "b")
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_build_manifest_matches_in_memory_pipeline(tmp_path):
    from g2g.dataset import tile_pair
    pairs = synthesize_fixture(1, 130, seed=2)
    srcs = write_sources(pairs, tmp_path / "src")
    m = build_manifest(srcs, SMALL_GRID, (1, 0, 0), seed=0, out_root=tmp_path / "d")
    on_disk = ManifestTriples(m["train"], tmp_path / "d")
    in_memory = tile_pair(*pairs[0], SMALL_GRID)
    for a, b in zip(on_disk, in_memory):
        assert np.array_equal(a.gt_mask.data, b.gt_mask.data)
        assert np.array_equal(a.overlay_mask.data, b.overlay_mask.data)
        assert np.abs(a.satellite.data - b.satellite.data).max() <= 0.5 / 255 + 1e-6


def test_size_mismatch_names_file(tmp_path):
    from g2g.raster import write_png
    write_png(Raster(np.zeros((130, 130, 3), dtype=np.float32)), tmp_path / "sat" / "x.png")
    write_png(Raster(np.zeros((128, 130, 1), dtype=np.float32)), tmp_path / "gt" / "x.png")
    with pytest.raises(PairingError, match="x.png"):
        build_manifest(discover_sources(tmp_path), SMALL_GRID, (1, 0, 0), 0, tmp_path / "out")


def test_unpaired_source(tmp_path):
    from g2g.raster import write_png
    write_png(Raster(np.zeros((8, 8, 3), dtype=np.float32)), tmp_path / "sat" / "lonely.png")
    (tmp_path / "gt").mkdir()
    with pytest.raises(PairingError, match="lonely.png"):
        discover_sources(tmp_path)


def test_manifest_json_round_trip(tmp_path):
    m = plan_manifests(["a", "b"], SMALL_GRID, (1, 1, 0), 0)["train"]
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back == m
    assert back.to_json() == (tmp_path / "m.json").read_text()


def test_make_triple_sizes():
    sat, gt = synthesize_fixture(1, 64, 0)[0]
    t = make_triple(sat, gt, contour_width=1)
    assert t.overlay_mask.height == t.gt_mask.height == t.satellite.height == 64
