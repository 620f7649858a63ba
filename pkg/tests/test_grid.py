import numpy as np
import pytest

from prednav.grid import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    GridFormatError,
    GridMismatchError,
    OccupancyGrid,
    OutOfBoundsError,
    Provenance,
    apply_patch,
    clearance,
    clearance_batch,
    extract_submap,
    fuse,
    load_grid,
    morphological_close,
    save_grid,
    world_to_cell,
)


def grid_from_rows(rows, resolution=0.05, origin=(0.0, 0.0)):
    return OccupancyGrid(resolution, origin, np.array(rows, dtype=np.uint8))


# --- independent oracles ----------------------------------------------------


def brute_close(occ, k):
    """Dilate-then-erode by hand on a padded copy (reference for closing)."""
    r = k // 2
    pad = k
    a = np.pad(occ.astype(bool), pad)
    dil = np.zeros_like(a)
    h, w = a.shape
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - r), min(h, y + r + 1)
            x0, x1 = max(0, x - r), min(w, x + r + 1)
            dil[y, x] = a[y0:y1, x0:x1].any()
    ero = np.zeros_like(a)
    for y in range(r, h - r):
        for x in range(r, w - r):
            ero[y, x] = dil[y - r : y + r + 1, x - r : x + r + 1].all()
    return ero[pad:-pad, pad:-pad]


def brute_clearance(g, p):
    best = float("inf")
    for iy in range(g.height):
        for ix in range(g.width):
            if g.cells[iy, ix] == OCCUPIED:
                cx, cy = g.cell_to_world(ix, iy)
                dx, dy = cx - p[0], cy - p[1]
                best = min(best, float(np.sqrt(dx * dx + dy * dy)))
    return best


# --- world_to_cell ----------------------------------------------------------


def test_world_to_cell_origin_corner():
    g = OccupancyGrid.full(10, 10, FREE)
    assert g.world_to_cell((0.0, 0.0)) == (0, 0)


def test_world_to_cell_floor_arithmetic():
    g = OccupancyGrid.full(10, 10, FREE)
    assert g.world_to_cell((0.07, 0.12)) == (1, 2)


def test_world_to_cell_out_of_bounds():
    g = OccupancyGrid.full(10, 10, FREE)
    with pytest.raises(OutOfBoundsError):
        g.world_to_cell((1.0, 0.0))
    with pytest.raises(OutOfBoundsError):
        world_to_cell((-0.01, 0.2), g)


def test_world_cell_roundtrip_all_cells():
    g = OccupancyGrid.full(17, 9, FREE, resolution=0.07, origin=(-0.3, 1.2))
    for iy in range(g.height):
        for ix in range(g.width):
            assert g.world_to_cell(g.cell_to_world(ix, iy)) == (ix, iy)


# --- extract_submap ---------------------------------------------------------


def test_submap_paper_dimensions():
    g = OccupancyGrid.full(400, 400, FREE)
    sub = extract_submap(g, (10.0, 10.0), 6.0)
    assert sub.width == sub.height == 120


def test_submap_fully_clipped_is_unknown():
    g = OccupancyGrid.full(40, 40, FREE)
    sub = extract_submap(g, (100.0, 100.0), 2.0)
    assert (sub.cells == UNKNOWN).all()


def test_submap_interior_identity():
    g = OccupancyGrid.full(200, 200, FREE)
    sub = extract_submap(g, (5.0, 5.0), 2.0)
    assert (sub.cells == FREE).all()
    # lattice alignment with the source
    for k in (0, 1):
        off = (sub.origin[k] - g.origin[k]) / g.resolution
        assert abs(off - round(off)) < 1e-9


def test_submap_center_snap_within_half_cell():
    g = OccupancyGrid.full(200, 200, FREE)
    sub = extract_submap(g, (5.013, 4.987), 3.0)
    assert abs(sub.center[0] - 5.013) <= 0.5 * g.resolution + 1e-12
    assert abs(sub.center[1] - 4.987) <= 0.5 * g.resolution + 1e-12


def test_cocentered_submaps_of_different_sizes():
    g = OccupancyGrid.full(400, 400, FREE)
    a = extract_submap(g, (9.37, 11.02), 6.0)
    b = extract_submap(g, (9.37, 11.02), 7.5)
    assert np.allclose(a.center, b.center)


# --- morphological_close ----------------------------------------------------


def test_close_all_free_unchanged():
    g = OccupancyGrid.full(20, 20, FREE)
    assert (morphological_close(g, 5).cells == FREE).all()


def test_close_solid_block_unchanged():
    cells = np.full((30, 30), FREE, dtype=np.uint8)
    cells[10:20, 10:20] = OCCUPIED
    g = OccupancyGrid(0.05, (0.0, 0.0), cells)
    out = morphological_close(g, 5)
    assert (out.cells == cells).all()


def test_close_fills_gap_between_walls():
    # two parallel 1-cell walls with a 2-cell gap along their length
    cells = np.full((20, 20), FREE, dtype=np.uint8)
    cells[8, 2:18] = OCCUPIED
    cells[11, 2:18] = OCCUPIED  # rows 9,10 form the gap
    g = OccupancyGrid(0.05, (0.0, 0.0), cells)
    out = morphological_close(g, 5)
    ref = brute_close(cells == OCCUPIED, 5)
    assert ((out.cells == OCCUPIED) == ref).all()
    assert (out.cells[9:11, 4:16] == OCCUPIED).all()  # gap closed


def test_close_matches_brute_oracle_random():
    rng = np.random.default_rng(7)
    for _ in range(10):
        cells = (rng.random((24, 24)) < 0.2).astype(np.uint8) * OCCUPIED
        g = OccupancyGrid(0.05, (0.0, 0.0), cells)
        out = morphological_close(g, 5)
        assert ((out.cells == OCCUPIED) == brute_close(cells == OCCUPIED, 5)).all()


def test_close_idempotent_and_extensive():
    rng = np.random.default_rng(11)
    for _ in range(10):
        cells = (rng.random((32, 32)) < 0.15).astype(np.uint8) * OCCUPIED
        g = OccupancyGrid(0.05, (0.0, 0.0), cells)
        once = morphological_close(g, 5)
        twice = morphological_close(once, 5)
        assert (once.cells == twice.cells).all()
        # never removes an occupied cell
        assert ((once.cells == OCCUPIED) >= (cells == OCCUPIED)).all()


def test_close_preserves_free_unknown_distinction():
    cells = np.full((20, 20), FREE, dtype=np.uint8)
    cells[:, 10:] = UNKNOWN
    cells[5, 3] = OCCUPIED
    g = OccupancyGrid(0.05, (0.0, 0.0), cells)
    out = morphological_close(g, 5)
    non_occ = out.cells != OCCUPIED
    assert (out.cells[non_occ] == cells[non_occ]).all()


# --- fuse -------------------------------------------------------------------


def _fuse_pair(obs_value, pred_value):
    obs = OccupancyGrid.full(4, 4, obs_value, origin=(0.05, 0.05))
    pred = OccupancyGrid.full(6, 6, pred_value, origin=(0.0, 0.0))
    return fuse(obs, pred)


def test_fuse_fills_unknown_from_prediction():
    pm = _fuse_pair(UNKNOWN, OCCUPIED)
    assert (pm.grid.cells == OCCUPIED).all()
    assert (pm.provenance == int(Provenance.PREDICTED)).all()


def test_fuse_keeps_observed_free():
    pm = _fuse_pair(FREE, OCCUPIED)
    inner = pm.grid.cells[1:5, 1:5]
    assert (inner == FREE).all()
    assert (pm.provenance[1:5, 1:5] == int(Provenance.OBSERVED)).all()
    # ring outside observed extent takes predicted values
    assert pm.grid.cells[0, 0] == OCCUPIED


def test_fuse_unknown_unknown():
    pm = _fuse_pair(UNKNOWN, UNKNOWN)
    assert (pm.grid.cells == UNKNOWN).all()
    assert (pm.provenance == int(Provenance.PREDICTED)).all()


def test_fuse_never_changes_observed_non_unknown():
    rng = np.random.default_rng(3)
    for _ in range(20):
        obs_cells = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        pred_cells = rng.integers(0, 3, size=(14, 14)).astype(np.uint8)
        obs = OccupancyGrid(0.05, (0.1, 0.1), obs_cells)
        pred = OccupancyGrid(0.05, (0.0, 0.0), pred_cells)
        pm = fuse(obs, pred)
        inner = pm.grid.cells[2:12, 2:12]
        known = obs_cells != UNKNOWN
        assert (inner[known] == obs_cells[known]).all()
        assert (pm.provenance[2:12, 2:12][known] == int(Provenance.OBSERVED)).all()
        assert (pm.provenance[2:12, 2:12][~known] == int(Provenance.PREDICTED)).all()


def test_fuse_rejects_misaligned():
    obs = OccupancyGrid.full(4, 4, FREE, origin=(0.013, 0.0))
    pred = OccupancyGrid.full(6, 6, FREE, origin=(0.0, 0.0))
    with pytest.raises(GridMismatchError):
        fuse(obs, pred)
    obs2 = OccupancyGrid.full(4, 4, FREE, resolution=0.1)
    with pytest.raises(GridMismatchError):
        fuse(obs2, pred)
    # predicted smaller than observed
    with pytest.raises(GridMismatchError):
        fuse(pred, OccupancyGrid.full(2, 2, FREE, origin=(0.1, 0.1)))


# --- apply_patch ------------------------------------------------------------


def test_apply_patch_writes_predicted_cells_only():
    base = OccupancyGrid.full(20, 20, UNKNOWN)
    obs = extract_submap(base, (0.5, 0.5), 0.3)
    pred_cells = np.full((10, 10), FREE, dtype=np.uint8)
    pred = OccupancyGrid(0.05, (obs.origin[0] - 0.1, obs.origin[1] - 0.1), pred_cells)
    patch = fuse(obs, pred)
    full = apply_patch(base, patch)
    assert full.grid.width == 20
    n_pred = int((full.provenance == int(Provenance.PREDICTED)).sum())
    assert n_pred == int((patch.provenance == 1).sum())
    # the predicted Free values landed in the full map
    assert int((full.grid.cells == FREE).sum()) == n_pred
    # untouched cells keep the base value
    assert (full.grid.cells[full.provenance == 0] == UNKNOWN).all()


# --- clearance --------------------------------------------------------------


def test_clearance_single_cell_direct():
    cells = np.full((41, 41), FREE, dtype=np.uint8)
    cells[20, 40] = OCCUPIED
    g = OccupancyGrid(0.05, (0.0, 0.0), cells)
    p = g.cell_to_world(20, 20)
    d = clearance(g, p)
    assert abs(d - 1.0) <= g.resolution


def test_clearance_empty_grid_is_inf():
    g = OccupancyGrid.full(10, 10, FREE)
    assert clearance(g, (0.2, 0.2)) == float("inf")


def test_clearance_out_of_bounds():
    g = OccupancyGrid.full(10, 10, FREE)
    with pytest.raises(OutOfBoundsError):
        clearance(g, (5.0, 5.0))


def test_clearance_matches_exhaustive_scan_exactly():
    rng = np.random.default_rng(5)
    for _ in range(5):
        cells = (rng.random((64, 64)) < 0.03).astype(np.uint8) * OCCUPIED
        g = OccupancyGrid(0.05, (0.0, 0.0), cells)
        for _ in range(20):
            p = rng.uniform(0.01, 64 * 0.05 - 0.01, size=2)
            assert clearance(g, p) == brute_clearance(g, p)


def test_clearance_batch_matches_scalar():
    rng = np.random.default_rng(9)
    cells = (rng.random((32, 32)) < 0.05).astype(np.uint8) * OCCUPIED
    g = OccupancyGrid(0.05, (0.0, 0.0), cells)
    pts = rng.uniform(0.01, 1.59, size=(50, 2))
    batch = clearance_batch(g, pts)
    for p, d in zip(pts, batch):
        assert abs(d - clearance(g, p)) < 1e-12


# --- file format ------------------------------------------------------------


def test_grid_file_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    cells = rng.integers(0, 3, size=(33, 21)).astype(np.uint8)
    g = OccupancyGrid(0.05, (-1.25, 3.75), cells)
    path = tmp_path / "m.og"
    save_grid(g, path)
    g2 = load_grid(path)
    assert g2.resolution == g.resolution
    assert g2.origin == g.origin
    assert (g2.cells == g.cells).all()
    save_grid(g2, tmp_path / "m2.og")
    assert (tmp_path / "m.og").read_bytes() == (tmp_path / "m2.og").read_bytes()


def test_grid_file_bad_magic(tmp_path):
    path = tmp_path / "bad.og"
    path.write_bytes(b"NOPE\n2 2\n0.05\n0.0 0.0\n" + bytes(4))
    with pytest.raises(GridFormatError):
        load_grid(path)


def test_grid_file_truncated(tmp_path):
    g = OccupancyGrid.full(8, 8, FREE)
    path = tmp_path / "t.og"
    save_grid(g, path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(GridFormatError):
        load_grid(path)


def test_grid_cells_are_frozen():
    g = OccupancyGrid.full(4, 4, FREE)
    with pytest.raises(ValueError):
        g.cells[0, 0] = OCCUPIED
