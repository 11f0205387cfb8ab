import numpy as np
import pytest

from cmetrack.io import (
    FormatError,
    format_mask_pgm,
    load_feature_map,
    load_mask_pgm,
    save_feature_map,
    save_mask_pgm,
)
from cmetrack.types import ContractError, FeatureMap, Mask


def _body(text):
    return " ".join(text.splitlines()[3:])


def test_load_minimal_file(tmp_path):
    p = tmp_path / "f.fm"
    p.write_text("2 2 3\n" + " ".join(str(v) for v in range(12)) + "\n")
    fm = load_feature_map(p)
    assert (fm.h, fm.w, fm.c) == (2, 2, 3)
    assert fm.data[1, 1, 2] == 11.0
    assert fm.data[0, 1, 0] == 3.0  # pixel-major, then channel


def test_short_file_reports_offset(tmp_path):
    p = tmp_path / "f.fm"
    p.write_text("2 2 3\n" + " ".join(["1.0"] * 11))
    with pytest.raises(FormatError, match="value 12"):
        load_feature_map(p)


@pytest.mark.parametrize(
    "text, needle",
    [
        ("2 2\n1 2 3 4", "header"),
        ("2 x 3\n", "field w"),
        ("1 1 2\n1.0 nan", "value 2"),
        ("1 1 2\n1.0 inf", "value 2"),
        ("1 1 2\n1.0 abc", "value 2"),
        ("1 1 1\n1.0 2.0", "value 2"),
        ("", "empty"),
    ],
)
def test_malformed_files(tmp_path, text, needle):
    p = tmp_path / "f.fm"
    p.write_text(text)
    with pytest.raises(FormatError, match=needle):
        load_feature_map(p)


def test_round_trip_is_bit_exact(tmp_path):
    p = tmp_path / "f.fm"
    for seed in range(100):
        rng = np.random.Generator(np.random.PCG64(seed))
        h, w, c = rng.integers(1, 5, size=3)
        fm = FeatureMap(rng.standard_normal((h, w, c)) * 10.0 ** rng.integers(-8, 8))
        save_feature_map(fm, p)
        back = load_feature_map(p)
        assert back.data.tobytes() == fm.data.tobytes()


def test_seeded_maps_are_reproducible():
    assert FeatureMap.random(5, 3, 3, 4).data.tobytes() == FeatureMap.random(5, 3, 3, 4).data.tobytes()
    assert FeatureMap.random(5, 3, 3, 4).data.tobytes() != FeatureMap.random(6, 3, 3, 4).data.tobytes()


def test_feature_map_rejects_nan():
    with pytest.raises(ContractError):
        FeatureMap(np.full((1, 1, 2), np.nan))


def test_pgm_zero_and_saturated():
    assert _body(format_mask_pgm(Mask(np.zeros((2, 2))))) == "0 0 0 0"
    assert _body(format_mask_pgm(Mask(np.ones((2, 2))))) == "255 255 255 255"
    assert format_mask_pgm(Mask(np.zeros((2, 3)))).startswith("P2\n3 2\n255\n")


def test_pgm_half_rounds_up(tmp_path):
    p = tmp_path / "m.pgm"
    save_mask_pgm(Mask(np.full((1, 1), 0.5)), p)
    tokens = p.read_text().split()
    assert tokens[:4] == ["P2", "1", "1", "255"]
    assert int(tokens[4]) == 128


def test_pgm_round_trip_on_level_grid(tmp_path):
    p = tmp_path / "m.pgm"
    levels = np.arange(256, dtype=float).reshape(16, 16) / 255.0
    save_mask_pgm(Mask(levels), p)
    assert load_mask_pgm(p).data.tobytes() == levels.tobytes()


def test_pgm_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_mask_pgm(Mask(np.zeros((1, 1))), tmp_path / "missing" / "m.pgm")


def test_mask_range_enforced():
    with pytest.raises(ContractError):
        Mask(np.array([[1.5]]))
