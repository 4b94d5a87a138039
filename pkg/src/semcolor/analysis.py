"""Colour statistics of colorized output and the real-vs-predicted survey score."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from semcolor.colorspace import RgbImage, rgb_to_hsv
from semcolor.errors import SurveyValidationError

SURVEY_HALF = 16
REAL = "real"
PREDICTED = "predicted"


@dataclass(frozen=True, eq=False)
class SaturationSurface:
    values: np.ndarray
    block: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.values, fmt="%.6f", delimiter=",")
        return buf.getvalue()


def _block_mean(plane: np.ndarray, block: int) -> np.ndarray:
    rows = np.arange(0, plane.shape[0], block)
    cols = np.arange(0, plane.shape[1], block)
    sums = np.add.reduceat(np.add.reduceat(plane, rows, axis=0), cols, axis=1)
    counts = np.add.reduceat(np.add.reduceat(np.ones_like(plane), rows, axis=0), cols, axis=1)
    return sums / counts


def saturation_surface(img: RgbImage, block: int = 1) -> SaturationSurface:
    """HSV saturation, averaged over ``block`` x ``block`` tiles (partial tiles at the edges)."""
    if block < 1:
        raise ValueError("block size must be >= 1")
    s = rgb_to_hsv(img).s
    values = s.copy() if block == 1 else np.clip(_block_mean(s, block), 0.0, 1.0)
    return SaturationSurface(values, block)


def hue_histogram(img: RgbImage, bins: int = 36) -> np.ndarray:
    """Counts of hue over [0, 360) in equal bins; pixels with zero saturation are skipped."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    hsv = rgb_to_hsv(img)
    hues = hsv.h[hsv.s > 0]
    idx = np.minimum((hues * bins / 360.0).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins)


def hue_bin_edges(bins: int) -> np.ndarray:
    return np.linspace(0.0, 360.0, bins + 1)


def render_heatmap(values: np.ndarray, path, cmap: str = "viridis") -> None:
    """Write a colour-mapped PNG of a [0, 1] grid (needs matplotlib)."""
    from matplotlib import colormaps
    from PIL import Image

    rgba = colormaps[cmap](np.clip(values, 0.0, 1.0))
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path)


@dataclass(frozen=True)
class Survey:
    order: tuple[str, ...]
    key: dict  # id -> "real" | "predicted"; keep away from participants


@dataclass(frozen=True)
class SurveyRecord:
    participant_id: str
    shown: tuple[str, ...]
    selected: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps(
            {"participant_id": self.participant_id, "shown": list(self.shown),
             "selected": list(self.selected)},
            sort_keys=True,
        )


@dataclass(frozen=True)
class SurveyScore:
    accuracies: dict  # participant id -> fraction of the 16 selections that were predictions
    mean: float


def build_survey(real: Sequence[str], predicted: Sequence[str], seed: int = 0) -> Survey:
    real, predicted = list(real), list(predicted)
    if len(real) != SURVEY_HALF or len(predicted) != SURVEY_HALF:
        raise ValueError(f"need exactly {SURVEY_HALF} real and {SURVEY_HALF} predicted ids")
    ids = real + predicted
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be distinct")
    order = np.random.default_rng(seed).permutation(len(ids))
    key = {i: REAL for i in real} | {i: PREDICTED for i in predicted}
    return Survey(tuple(ids[k] for k in order), key)


def _validate(rec: SurveyRecord, key: dict) -> None:
    pid = rec.participant_id
    if len(rec.shown) != 2 * SURVEY_HALF or len(set(rec.shown)) != len(rec.shown):
        raise SurveyValidationError(pid, f"expected {2 * SURVEY_HALF} distinct shown ids")
    unknown = [i for i in rec.shown if i not in key]
    if unknown:
        raise SurveyValidationError(pid, f"shown ids missing from key: {unknown[:3]}")
    if sum(key[i] == PREDICTED for i in rec.shown) != SURVEY_HALF:
        raise SurveyValidationError(pid, "shown set is not 16 real + 16 predicted")
    if len(rec.selected) != SURVEY_HALF or len(set(rec.selected)) != SURVEY_HALF:
        raise SurveyValidationError(pid, f"expected {SURVEY_HALF} distinct selections")
    shown = set(rec.shown)
    stray = [i for i in rec.selected if i not in shown]
    if stray:
        raise SurveyValidationError(pid, f"selected ids never shown: {stray[:3]}")


def score_survey(records: Iterable[SurveyRecord], key: dict) -> SurveyScore:
    """Accuracy per participant = |selected that are predictions| / 16.

    0.5 is chance: the predictions cannot be told apart from real images.
    """
    accuracies = {}
    for rec in records:
        _validate(rec, key)
        if rec.participant_id in accuracies:
            raise SurveyValidationError(rec.participant_id, "duplicate participant id")
        hits = sum(key[i] == PREDICTED for i in rec.selected)
        accuracies[rec.participant_id] = hits / SURVEY_HALF
    if not accuracies:
        raise ValueError("no survey records")
    return SurveyScore(accuracies, float(np.mean(list(accuracies.values()))))


def save_records(records: Iterable[SurveyRecord], path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def load_records(path) -> list[SurveyRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = None
        try:
            obj = json.loads(line)
            records.append(
                SurveyRecord(str(obj["participant_id"]), tuple(obj["shown"]), tuple(obj["selected"]))
            )
        except (ValueError, KeyError, TypeError) as exc:
            pid = obj.get("participant_id", f"line {lineno}") if isinstance(obj, dict) else f"line {lineno}"
            raise SurveyValidationError(pid, f"malformed record: {exc}") from exc
    return records


def save_key(key: dict, path) -> None:
    Path(path).write_text(json.dumps(key, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_key(path) -> dict:
    key = json.loads(Path(path).read_text(encoding="utf-8"))
    bad = {v for v in key.values()} - {REAL, PREDICTED}
    if bad:
        raise ValueError(f"key values must be {REAL!r} or {PREDICTED!r}, got {sorted(bad)}")
    return key
