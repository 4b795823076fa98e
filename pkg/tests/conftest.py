import json

import numpy as np
import pytest

from evrep.events import DatasetIndex, EventStream, SampleRef, encode_nmnist_bin


def random_stream(rng, max_events=50, width=34, height=34) -> EventStream:
    n = int(rng.integers(0, max_events + 1))
    xs = rng.integers(0, width, size=n)
    ys = rng.integers(0, height, size=n)
    ts = np.sort(rng.integers(0, 1 << 23, size=n))
    ps = rng.choice([-1, 1], size=n)
    return EventStream(np.stack([xs, ys, ts, ps], axis=1), width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_event_dataset(tmp_path, rng, labels, per_label=2, width=34, height=34, with_rgb=False):
    """Write .bin event files (and optional paired RGB PNGs) plus a manifest."""
    from evrep.representation import export_png

    samples = []
    for label in labels:
        for i in range(per_label):
            sid = f"{label}_{i}"
            stream = random_stream(rng, max_events=30, width=width, height=height)
            path = tmp_path / f"{sid}.bin"
            path.write_bytes(encode_nmnist_bin(stream))
            rgb_path = None
            if with_rgb:
                rgb = rng.random((height, width, 3)).astype(np.float32)
                rgb_path = tmp_path / f"{sid}_rgb.png"
                export_png(rgb, rgb_path)
            samples.append(
                SampleRef(sid, str(path), label, str(rgb_path) if rgb_path else None)
            )
    index = DatasetIndex(tuple(samples), tuple(sorted(set(labels))))
    manifest = tmp_path / "manifest.jsonl"
    index.to_manifest(manifest)
    return index, manifest


def write_fixture(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")


TINY_GENERATOR = dict(
    stem_channels=8,
    stage_channels=(16,),
    stage_repeats=(1,),
    stage_kind=("fused",),
)


def synthetic_pairs(n=4, size=32, seed=0):
    """Tencode/RGB training pairs with a bright blue blob per sample.

    Events cluster around a per-sample center; the paired RGB frame is a
    blue-dominant Gaussian blob at the same center, so both the edge
    structure and the mock-backend caption of the target are learnable.
    """
    from evrep.representation import encode_tencode
    from evrep.training import TrainPair

    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
        m = 80
        xs = np.clip(np.round(rng.normal(cx, size / 10, m)), 0, size - 1).astype(int)
        ys = np.clip(np.round(rng.normal(cy, size / 10, m)), 0, size - 1).astype(int)
        ts = np.sort(rng.integers(0, 1000, size=m))
        ps = rng.choice([-1, -1, -1, 1], size=m)  # negative-dominant: blue in tencode
        stream = EventStream(np.stack([xs, ys, ts, ps], axis=1), size, size)
        frame = encode_tencode(stream, 0, 1000)

        yy, xx = np.mgrid[0:size, 0:size]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 8) ** 2))
        target = np.zeros((size, size, 3), dtype=np.float32)
        target[:, :, 0] = 0.2 * blob
        target[:, :, 1] = 0.3 * blob
        target[:, :, 2] = 0.9 * blob
        pairs.append(TrainPair(f"synthetic_{i}", frame.pixels, target))
    return pairs
