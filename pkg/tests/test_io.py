import numpy as np
import pytest

from mvsr.errors import CorruptFile
from mvsr.io import read_pfm, read_ply, read_ppm, read_volume, write_pfm, write_ply, write_ppm, write_volume


def test_pfm_round_trip_within_float32(tmp_path):
    rng = np.random.default_rng(0)
    d = rng.uniform(0.5, 5.0, size=(7, 11))
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    np.testing.assert_array_equal(back, d.astype(np.float32))


def test_pfm_rejects_truncation(tmp_path):
    write_pfm(tmp_path / "d.pfm", np.ones((4, 4)))
    blob = (tmp_path / "d.pfm").read_bytes()
    (tmp_path / "d.pfm").write_bytes(blob[:-3])
    with pytest.raises(CorruptFile):
        read_pfm(tmp_path / "d.pfm")


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(5, 6, 3))
    write_ppm(tmp_path / "a.ppm", img)
    assert np.abs(read_ppm(tmp_path / "a.ppm") - img).max() <= 0.5 / 255 + 1e-12


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(50, 3))
    feat = rng.uniform(size=(50, 4)).astype(np.float32)
    support = rng.integers(0, 5, 50).astype(np.uint8)
    write_ply(tmp_path / "c.ply", pts, feature=feat, support=support)
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back["points"], pts.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(back["support"], support)
    np.testing.assert_array_equal(back["feature_3"], feat[:, 3])


def test_volume_dump_round_trip(tmp_path):
    class Vol:
        resolution = 0.08
        origin = np.array([-0.16, 0.0, 0.08])
        keys = np.array([[0, 1, 2], [3, 4, 5]])
        features_array = np.array([[1.0, 2.0], [3.0, 4.5]])

    write_volume(tmp_path / "v.bin", Vol)
    back = read_volume(tmp_path / "v.bin")
    assert back["resolution"] == 0.08
    np.testing.assert_array_equal(back["origin"], Vol.origin)
    np.testing.assert_array_equal(back["keys"], Vol.keys)
    np.testing.assert_array_equal(back["features"], Vol.features_array)
