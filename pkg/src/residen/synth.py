"""Procedural face sprites with action-unit-driven geometry.

Each sample draws an emotion, looks up its prototype action unit pattern,
flips each unit with a small noise probability, then renders a schematic
face whose brow, eye and mouth geometry is displaced in proportion to the
unit intensities. Labels are exactly consistent with the rendering: the
emotion is the latent class that produced the pattern, intensities are the
rendered magnitudes, and presence bits are intensities thresholded at 2.

Rendering is a pure function of (intensities, jitter), which is what makes
pixel-level assertions possible: two renders differing only in one unit
differ only in that unit's facial region.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from .data import (
    DISFA_AUS,
    Manifest,
    SampleRecord,
    resolve_au_list,
    save_manifest,
)
from .errors import ConfigError
from .expression import EMOTION_ORDER

# prototype presence patterns per emotion; units outside the active class
# list are ignored at generation time
EMOTION_AU_PROTOTYPES: Dict[str, frozenset] = {
    "surprise": frozenset({1, 2, 5, 25, 26}),
    "fear": frozenset({1, 2, 4, 5, 20, 25}),
    "disgust": frozenset({4, 9, 15, 17}),
    "happiness": frozenset({6, 12, 25}),
    "sadness": frozenset({1, 4, 15, 17}),
    "anger": frozenset({4, 5, 9, 17, 26}),
    "neutral": frozenset(),
}

PRESENT_MIN_INTENSITY = 2


@dataclass(frozen=True)
class FaceJitter:
    """Per-sample appearance variation that carries no label information."""

    dx: float = 0.0
    dy: float = 0.0
    rx: float = 42.0
    ry: float = 52.0
    skin: Tuple[int, int, int] = (205, 170, 145)
    bg: Tuple[int, int, int] = (118, 128, 140)
    brow_dy: float = 0.0
    eye_dy: float = 0.0
    eye_ry: float = 3.2
    mouth_dy: float = 0.0
    mouth_hw: float = 12.0

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "FaceJitter":
        return cls(
            dx=float(rng.uniform(-3, 3)),
            dy=float(rng.uniform(-3, 3)),
            rx=float(rng.uniform(39, 45)),
            ry=float(rng.uniform(49, 55)),
            skin=tuple(int(v) for v in rng.integers(-25, 26, 3) + (205, 170, 145)),
            bg=tuple(int(v) for v in rng.integers(-18, 19, 3) + (118, 128, 140)),
            brow_dy=float(rng.uniform(-1.5, 1.5)),
            eye_dy=float(rng.uniform(-1.5, 1.5)),
            eye_ry=float(rng.uniform(2.9, 3.6)),
            mouth_dy=float(rng.uniform(-2, 2)),
            mouth_hw=float(rng.uniform(10.5, 13.5)),
        )


def _fill_ellipse(canvas: np.ndarray, cx: float, cy: float, rx: float, ry: float,
                  color) -> None:
    hw = canvas.shape[0]
    yy, xx = np.ogrid[:hw, :hw]
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    canvas[mask] = color


def _fill_rect(canvas: np.ndarray, x0: float, x1: float, y0: float, y1: float,
               color) -> None:
    hw = canvas.shape[0]
    xi0, xi1 = max(0, int(round(x0))), min(hw, int(round(x1)) + 1)
    yi0, yi1 = max(0, int(round(y0))), min(hw, int(round(y1)) + 1)
    if xi0 < xi1 and yi0 < yi1:
        canvas[yi0:yi1, xi0:xi1] = color


def render_face(intensities: Dict[int, int], jitter: FaceJitter,
                hw: int = 128) -> np.ndarray:
    """Draw one face; pure function of its arguments. Returns uint8 [hw, hw, 3]."""

    def i(au: int) -> float:
        return float(intensities.get(au, 0))

    canvas = np.empty((hw, hw, 3), dtype=np.uint8)
    canvas[...] = jitter.bg

    s = hw / 128.0  # geometry was designed on a 128 grid
    cx = 64.0 * s + jitter.dx
    cy = 66.0 * s + jitter.dy
    skin = jitter.skin
    dark = (60, 42, 32)
    _fill_ellipse(canvas, cx, cy, jitter.rx * s, jitter.ry * s, skin)

    # brows: ends move independently; unit 1 raises inner, 2 raises outer,
    # 4 pushes the whole brow down (inner more than outer)
    brow_y = cy - 22.0 * s + jitter.brow_dy
    inner_off = -1.2 * i(1) + 1.2 * i(4)
    outer_off = -1.2 * i(2) + 0.6 * i(4)
    for sign in (-1, 1):  # left, right
        x_inner = cx + sign * 8.0 * s
        x_outer = cx + sign * 26.0 * s
        n_cols = int(abs(x_outer - x_inner)) + 1
        for c in range(n_cols):
            t = c / max(1, n_cols - 1)
            x = x_inner + sign * c
            y = brow_y + inner_off * (1 - t) + outer_off * t
            _fill_rect(canvas, x, x, y, y + 2, dark)

    # eyes: unit 5 widens the aperture, unit 6 narrows it and adds a cheek line
    eye_y = cy - 8.0 * s + jitter.eye_dy
    eye_ry = max(1.5, jitter.eye_ry + 0.7 * i(5) - 0.3 * i(6))
    for sign in (-1, 1):
        ex = cx + sign * 17.0 * s
        _fill_ellipse(canvas, ex, eye_y, 8.0 * s, eye_ry, (245, 245, 245))
        _fill_ellipse(canvas, ex, eye_y, 2.2, min(2.2, eye_ry), (40, 35, 35))
        if i(6) > 0:
            yline = eye_y + 8.0 + 0.0 * s
            _fill_rect(canvas, ex - 7.0 * s, ex + 7.0 * s, yline,
                       yline + (1 if i(6) < 4 else 2), dark)

    # nose and unit 9 wrinkle strokes across the bridge
    _fill_rect(canvas, cx - 1, cx + 1, cy - 10.0 * s, cy + 6.0 * s,
               tuple(max(0, v - 45) for v in skin))
    if i(9) > 0:
        n_wrinkles = 1 + int(i(9)) // 2
        for wline in range(n_wrinkles):
            y = cy - 13.0 * s - 3.0 * wline
            _fill_rect(canvas, cx - 8.0 * s, cx + 8.0 * s, y, y, dark)

    # mouth: corner curvature from units 12/15, stretch from 20,
    # opening from 25/26, chin crease from 17
    mouth_y = cy + 26.0 * s + jitter.mouth_dy
    half = jitter.mouth_hw * s + 1.5 * i(20)
    corner = -1.1 * i(12) + 1.1 * i(15)
    opening = 1.0 * i(25) + 1.8 * i(26)
    lip = (150, 60, 55)
    cavity = (45, 20, 20)
    wcols = int(half)
    for c in range(-wcols, wcols + 1):
        u = abs(c) / max(1.0, half)
        y = mouth_y + corner * u * u
        x = cx + c
        _fill_rect(canvas, x, x, y - 1, y + 1, lip)
        gap = opening * max(0.0, 1.0 - u / 0.75)
        if gap >= 1.0:
            _fill_rect(canvas, x, x, y + 2, y + 1 + gap, cavity)
            _fill_rect(canvas, x, x, y + 2 + gap, y + 3 + gap, lip)
    if i(17) > 0:
        y = mouth_y + 12.0 * s - 0.8 * i(17)
        _fill_rect(canvas, cx - 6.0 * s, cx + 6.0 * s, y, y + (1 if i(17) < 4 else 2),
                   dark)

    return canvas


def landmarks_for(jitter: FaceJitter, hw: int = 128) -> List[Tuple[float, float]]:
    """Stable keypoints spanning the feature region: brow ends, eye centers,
    nose tip, mouth corners, chin. The span matters: the crop box comes from
    these extremes, so brows and chin must be inside it."""
    s = hw / 128.0
    cx = 64.0 * s + jitter.dx
    cy = 66.0 * s + jitter.dy
    brow_y = cy - 22.0 * s + jitter.brow_dy
    eye_y = cy - 8.0 * s + jitter.eye_dy
    mouth_y = cy + 26.0 * s + jitter.mouth_dy
    half = jitter.mouth_hw * s
    return [
        (cx - 26.0 * s, brow_y),
        (cx + 26.0 * s, brow_y),
        (cx - 17.0 * s, eye_y),
        (cx + 17.0 * s, eye_y),
        (cx, cy + 6.0 * s),
        (cx - half, mouth_y),
        (cx + half, mouth_y),
        (cx, cy + 44.0 * s),
    ]


@dataclass(frozen=True)
class SynthSpec:
    count: int
    seed: int = 0
    au_list: Tuple[int, ...] = DISFA_AUS
    num_emotions: int = 7
    au_noise: float = 0.05
    split_fractions: Tuple[float, float, float] = (0.8, 0.2, 0.0)
    out_hw: int = 128

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"sample count must be positive, got {self.count}")
        if not 2 <= self.num_emotions <= len(EMOTION_ORDER):
            raise ConfigError(
                f"num_emotions must be in 2..{len(EMOTION_ORDER)}, got {self.num_emotions}"
            )
        if not 0.0 <= self.au_noise < 0.5:
            raise ConfigError(f"au_noise must be in [0, 0.5), got {self.au_noise}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ConfigError("split fractions must be non-negative and sum to 1")
        resolve_au_list(list(self.au_list))

    def emotions(self) -> Tuple[str, ...]:
        return EMOTION_ORDER[: self.num_emotions]


def expected_au_marginals(spec: SynthSpec) -> Dict[int, float]:
    """Analytic P(unit present) under uniform emotions and flip noise."""
    names = spec.emotions()
    out = {}
    for au in spec.au_list:
        p = 0.0
        for name in names:
            base = 1.0 if au in EMOTION_AU_PROTOTYPES[name] else 0.0
            p += base * (1 - spec.au_noise) + (1 - base) * spec.au_noise
        out[au] = p / len(names)
    return out


def draw_sample(spec: SynthSpec, rng: np.random.Generator) -> Tuple[int, Dict[int, int], FaceJitter]:
    """(emotion index, unit intensities, jitter) for one sample."""
    emo = int(rng.integers(0, spec.num_emotions))
    proto = EMOTION_AU_PROTOTYPES[spec.emotions()[emo]]
    intensities: Dict[int, int] = {}
    for au in spec.au_list:
        present = au in proto
        if spec.au_noise > 0 and rng.random() < spec.au_noise:
            present = not present
        intensities[au] = int(rng.integers(PRESENT_MIN_INTENSITY, 6)) if present else 0
    return emo, intensities, FaceJitter.draw(rng)


def generate(spec: SynthSpec, out_dir: str) -> str:
    """Write images/, manifest.csv and meta.json; returns the manifest path."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)

    n = spec.count
    n_train = int(round(spec.split_fractions[0] * n))
    n_val = int(round(spec.split_fractions[1] * n))
    n_val = min(n_val, n - n_train)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    rng.shuffle(splits)

    au_ids = list(spec.au_list)
    records = []
    for k in range(n):
        emo, intensities, jitter = draw_sample(spec, rng)
        img = render_face(intensities, jitter, hw=spec.out_hw)
        sid = f"s{k:06d}"
        rel = os.path.join("images", f"{sid}.png")
        Image.fromarray(img).save(os.path.join(out_dir, rel))
        inten_row = [intensities[a] for a in au_ids]
        records.append(SampleRecord(
            id=sid,
            image_path=rel,
            split=splits[k],
            landmarks=landmarks_for(jitter, spec.out_hw),
            bbox=None,
            au_intensities=inten_row,
            au_binary=[1 if v >= PRESENT_MIN_INTENSITY else 0 for v in inten_row],
            emotion=emo,
        ))

    manifest_path = os.path.join(out_dir, "manifest.csv")
    save_manifest(Manifest(records, root=out_dir), manifest_path)
    meta = {
        "count": n,
        "seed": spec.seed,
        "au_list": au_ids,
        "emotions": list(spec.emotions()),
        "au_noise": spec.au_noise,
        "expected_au_marginals": {str(k): v for k, v in expected_au_marginals(spec).items()},
        "split_fractions": list(spec.split_fractions),
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
