import numpy as np
import pytest

import marmo


def blob(n, s, amp=1000.0):
    y, x = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    return amp * np.exp(-0.5 * ((x - c) ** 2 + (y - c) ** 2) / s**2)


def test_hessian_blob_center():
    r = marmo.hessian_cell_filter(blob(81, 3.0), [3.0])
    s2 = 9.0 + 9.0
    assert r.shape == (81, 81)
    assert r[40, 40] == pytest.approx(1000.0 * 9.0 / s2**2, rel=0.02)
    peaks = marmo.local_maxima(r, 1.0)
    assert [(p[0], p[1]) for p in peaks] == [(40, 40)]


def test_threshold_pipeline_vessel_rejected():
    cr = np.full((40, 40), 100.0)
    cg = np.full((40, 40), 110.0)
    cr[10:14, :] += 5000
    cg[10:14, :] += 5000
    cg[25:29, 5:35] += 800
    mask, signal = marmo.threshold_pipeline(cg, cr)
    assert mask.dtype == np.uint8
    assert mask[10:14].sum() == 0
    assert mask[26, 20] == 1
    assert signal[26, 20] == pytest.approx(910.0 - 110.0)


def test_unet_extent():
    assert marmo.unet_output_extent(4, 572) == 484
    assert marmo.unet_output_extent(2, 108) == 92


def test_matching_and_errors():
    truth = [(5, 5, 0, 1.0), (20, 20, 0, 1.0)]
    r = marmo.match_detections(truth + [(40, 40, 0, 0.5)], truth)
    assert (r["tp"], r["fp"], r["fn"]) == (2, 1, 0)
    assert r["precision"] == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        marmo.match_detections(truth, truth, 0.0)
    with pytest.raises(ValueError):
        marmo.hessian_cell_filter(np.zeros((5, 5)), [])


def test_stack_round_trip(tmp_path):
    a = np.random.default_rng(1).random((3, 4, 5))
    marmo.write_stack(tmp_path / "s", a, (2.0, 2.0, 50.0), "f64")
    b, vox = marmo.read_stack(tmp_path / "s")
    assert np.array_equal(a, b)
    assert tuple(vox) == (2.0, 2.0, 50.0)


def test_phantom_end_to_end(tmp_path):
    spec = "seed=1\nsections=6\nvignette_corner=1\nnoise=0\n"
    ph = marmo.generate_phantom(spec)
    assert set(ph["sections"]) == {"CR", "CG", "CB"}
    assert len(ph["cells"]) == 12
    marmo.write_phantom(spec, tmp_path / "ph")
    conf = tmp_path / "run.conf"
    conf.write_text("tiles=ph/tiles\natlas=ph/truth/atlas\nout=run\nbrain_id=phantom-1\ninjection_id=inj0\n")
    assert marmo.validate_config(conf) == []
    stages = marmo.run_pipeline(conf)
    assert [s for _, s in stages] == ["ok"] * 5
    assert marmo.read_connectivity(tmp_path / "run" / "connectivity.txt") == ph["table"]


def test_invalid_config(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("hi=10\nlo=20\ntreshold=1\n")
    problems = marmo.validate_config(conf)
    assert any("hi" in p for p in problems)
    assert any("treshold" in p for p in problems)
