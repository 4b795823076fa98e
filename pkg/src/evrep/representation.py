"""Fixed-size image representations of event windows.

Two encoders are provided:

  * Tencode frames: per pixel, the latest event in the window sets
    R = 1 for positive polarity, B = 1 for negative, and G to the
    normalized event time (t - t0) / (t1 - t0). Pixels without events
    keep the background color (black by default).
  * Event frames: per-polarity event counts, each channel normalized by
    its own maximum; green stays zero.

All pixel values live in [0, 1] as float32; quantization to 8 bits
happens only at the PNG boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptyResolution, InvalidWindow, IOFailure
from .events import EventStream, window_events

REPRESENTATION_KINDS = ("event_frame", "tencode", "evrep", "external_frame")

BLACK = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TencodeFrame:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    t0: int
    t1: int


@dataclass(frozen=True)
class RepImage:
    """An image representation plus its provenance kind for reports."""

    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    kind: str

    def __post_init__(self):
        if self.kind not in REPRESENTATION_KINDS:
            raise ValueError(f"unknown representation kind {self.kind!r}")


def encode_tencode(
    stream: EventStream,
    t0: int,
    t1: int,
    background: tuple[float, float, float] = BLACK,
) -> TencodeFrame:
    """Encode the [t0, t1) window of ``stream`` as a Tencode frame.

    When several events hit the same pixel the latest one wins (ties are
    resolved by stream order, so exact duplicates are a no-op).
    """
    if stream.width == 0 or stream.height == 0:
        raise EmptyResolution("zero-sized sensor resolution")
    if t0 >= t1:
        raise InvalidWindow(f"need t0 < t1, got [{t0}, {t1})")
    win = window_events(stream, t0, t1)
    pixels = np.empty((stream.height, stream.width, 3), dtype=np.float32)
    pixels[:] = np.asarray(background, dtype=np.float32)
    if len(win):
        lin = win.ys * stream.width + win.xs
        # Last occurrence per pixel: reverse, keep first of each index.
        _, first_rev = np.unique(lin[::-1], return_index=True)
        keep = len(win) - 1 - first_rev
        ys, xs = win.ys[keep], win.xs[keep]
        ts, ps = win.ts[keep], win.ps[keep]
        g = (ts - t0).astype(np.float32) / np.float32(t1 - t0)
        pixels[ys, xs, 0] = (ps > 0).astype(np.float32)
        pixels[ys, xs, 1] = g
        pixels[ys, xs, 2] = (ps < 0).astype(np.float32)
    return TencodeFrame(pixels=pixels, t0=t0, t1=t1)


def encode_event_frame(stream: EventStream, t0: int, t1: int) -> RepImage:
    """Count-based frame: R/B are per-pixel counts of positive/negative
    events normalized by the channel maximum; G is zero. A window with no
    events of a given polarity leaves that channel all-zero."""
    if stream.width == 0 or stream.height == 0:
        raise EmptyResolution("zero-sized sensor resolution")
    if t0 > t1:
        raise InvalidWindow(f"t0={t0} > t1={t1}")
    win = window_events(stream, t0, t1)
    pos = np.zeros((stream.height, stream.width), dtype=np.float64)
    neg = np.zeros_like(pos)
    if len(win):
        up = win.ps > 0
        np.add.at(pos, (win.ys[up], win.xs[up]), 1.0)
        np.add.at(neg, (win.ys[~up], win.xs[~up]), 1.0)
    if pos.max() > 0:
        pos /= pos.max()
    if neg.max() > 0:
        neg /= neg.max()
    pixels = np.zeros((stream.height, stream.width, 3), dtype=np.float32)
    pixels[:, :, 0] = pos
    pixels[:, :, 2] = neg
    return RepImage(pixels=pixels, kind="event_frame")


def _as_pixel_array(image) -> np.ndarray:
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {pixels.shape}")
    return pixels


def quantize_u8(image) -> np.ndarray:
    """Map [0, 1] floats to 8-bit channel values via round(255 * v)."""
    pixels = _as_pixel_array(image)
    if pixels.min() < 0 or pixels.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return np.rint(pixels * 255.0).astype(np.uint8)


def export_png(image, path: str | Path) -> None:
    """Write an 8-bit RGB PNG; values are quantized as round(255 * v)."""
    arr = quantize_u8(image)
    try:
        Image.fromarray(arr, mode="RGB").save(str(path), format="PNG")
    except OSError as e:
        raise IOFailure(f"cannot write {path}: {e}") from e


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file into (H, W, 3) float32 values in [0, 1].

    8-bit data is normalized by 255, 16-bit by 65535. Grayscale images
    are replicated to three channels; alpha is dropped.
    """
    try:
        with Image.open(str(path)) as img:
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float32) / 65535.0
            elif mode in ("RGB", "RGBA", "L", "LA"):
                if mode in ("RGBA", "LA"):
                    img = img.convert(mode[:-1])
                arr = np.asarray(img, dtype=np.float32) / 255.0
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from e
    arr = np.clip(arr, 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr[:, :, :3], dtype=np.float32)


def load_rep_image(path: str | Path, kind: str) -> RepImage:
    return RepImage(pixels=load_image(path), kind=kind)
