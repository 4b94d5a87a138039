import numpy as np
import pytest

from oracles import hypergeometric_mean_accuracy
from semcolor.analysis import (
    PREDICTED,
    SurveyRecord,
    build_survey,
    hue_histogram,
    render_heatmap,
    load_key,
    load_records,
    saturation_surface,
    save_key,
    save_records,
    score_survey,
)
from semcolor.colorspace import RgbImage
from semcolor.errors import SurveyValidationError

REAL_IDS = [f"r{i:02d}" for i in range(16)]
PRED_IDS = [f"p{i:02d}" for i in range(16)]


def _img(rgb, shape=(2, 2)):
    return RgbImage(np.broadcast_to(np.array(rgb, np.uint8), (*shape, 3)).copy())


@pytest.fixture(scope="module")
def survey():
    return build_survey(REAL_IDS, PRED_IDS, seed=4)


def test_saturation_examples():
    assert np.all(saturation_surface(_img([255, 0, 0])).values == 1.0)
    assert np.all(saturation_surface(_img([90, 90, 90])).values == 0.0)
    assert np.allclose(saturation_surface(_img([200, 100, 100])).values, 0.5)


def test_saturation_blocks():
    px = np.zeros((3, 4, 3), np.uint8)
    px[:, :2] = [255, 0, 0]
    px[:, 2:] = [128, 128, 128]
    s = saturation_surface(RgbImage(px), block=2)
    assert s.values.shape == (2, 2)
    assert np.allclose(s.values, [[1, 0], [1, 0]])
    assert s.to_csv().splitlines()[0] == "1.000000,0.000000"


def test_saturation_block_checked():
    with pytest.raises(ValueError):
        saturation_surface(_img([1, 2, 3]), block=0)


def test_hue_histogram():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [50, 50, 50]]], np.uint8)
    counts = hue_histogram(RgbImage(px), bins=3)
    assert counts.tolist() == [1, 1, 1]  # gray pixel skipped
    counts = hue_histogram(RgbImage(px), bins=36)
    assert counts.sum() == 3 and counts[0] == counts[12] == counts[24] == 1


def test_build_survey_balanced_and_seeded(survey):
    assert sorted(survey.order) == sorted(REAL_IDS + PRED_IDS)
    assert sum(v == PREDICTED for v in survey.key.values()) == 16
    again = build_survey(REAL_IDS, PRED_IDS, seed=4)
    assert again.order == survey.order
    assert build_survey(REAL_IDS, PRED_IDS, seed=5).order != survey.order


@pytest.mark.parametrize(
    "real,pred",
    [(REAL_IDS[:15], PRED_IDS), (REAL_IDS, REAL_IDS), (REAL_IDS, PRED_IDS + ["x"])],
)
def test_build_survey_validation(real, pred):
    with pytest.raises(ValueError):
        build_survey(real, pred)


def _record(pid, survey, selected):
    return SurveyRecord(pid, survey.order, tuple(selected))


def test_perfect_and_inverted_selectors(survey):
    perfect = score_survey([_record("a", survey, PRED_IDS)], survey.key)
    assert perfect.mean == 1.0
    inverted = score_survey([_record("b", survey, REAL_IDS)], survey.key)
    assert inverted.mean == 0.0


def test_random_participants_at_chance(survey):
    rng = np.random.default_rng(0)
    order = np.array(survey.order)
    records = [
        _record(f"p{i}", survey, order[rng.choice(32, 16, replace=False)]) for i in range(10_000)
    ]
    score = score_survey(records, survey.key)
    assert abs(score.mean - hypergeometric_mean_accuracy()) <= 0.02


def test_malformed_record_names_participant(survey):
    bad = _record("alice", survey, PRED_IDS[:15])
    with pytest.raises(SurveyValidationError, match="alice"):
        score_survey([bad], survey.key)


def test_unknown_selection_rejected(survey):
    bad = _record("bob", survey, PRED_IDS[:15] + ["zzz"])
    with pytest.raises(SurveyValidationError, match="bob"):
        score_survey([bad], survey.key)


def test_duplicate_participant_rejected(survey):
    rec = _record("c", survey, PRED_IDS)
    with pytest.raises(SurveyValidationError):
        score_survey([rec, rec], survey.key)


def test_no_records():
    with pytest.raises(ValueError):
        score_survey([], {})


def test_records_and_key_round_trip(tmp_path, survey):
    recs = [_record("a", survey, PRED_IDS), _record("b", survey, REAL_IDS)]
    save_records(recs, tmp_path / "r.jsonl")
    assert load_records(tmp_path / "r.jsonl") == recs
    save_key(survey.key, tmp_path / "k.json")
    assert load_key(tmp_path / "k.json") == survey.key


def test_broken_jsonl_line(tmp_path):
    (tmp_path / "r.jsonl").write_text('{"participant_id": "dave", "shown": []}\n')
    with pytest.raises(SurveyValidationError, match="dave"):
        load_records(tmp_path / "r.jsonl")
    (tmp_path / "r.jsonl").write_text("not json\n")
    with pytest.raises(SurveyValidationError, match="line 1"):
        load_records(tmp_path / "r.jsonl")


def test_key_values_checked(tmp_path):
    (tmp_path / "k.json").write_text('{"a": "fake"}')
    with pytest.raises(ValueError):
        load_key(tmp_path / "k.json")



def test_heatmap_png(tmp_path):
    pytest.importorskip("matplotlib")
    render_heatmap(np.linspace(0, 1, 12).reshape(3, 4), tmp_path / "h.png")
    assert _read_png(tmp_path / "h.png").shape == (3, 4, 3)


def _read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)
