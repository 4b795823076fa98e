import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from evrep.errors import ChecksumMismatch, ConfigMismatch, InvalidConfig, IOFailure, ShapeMismatch
from evrep.generator import (
    CheckpointMeta,
    CropRecord,
    Generator,
    GeneratorConfig,
    build_generator,
    crop_to_record,
    load_checkpoint,
    pad_to_grid,
    save_checkpoint,
)

TINY = GeneratorConfig(
    stem_channels=4,
    stage_channels=(8,),
    stage_repeats=(1,),
    stage_kind=("fused",),
    expansion_ratio=2.0,
)

SMALL = GeneratorConfig(
    stem_channels=8,
    stage_channels=(12, 16),
    stage_repeats=(1, 2),
    stage_kind=("fused", "mbconv"),
    expansion_ratio=2.0,
    se_ratio=0.25,
)


# --- independent parameter-count oracle: pure arithmetic over the declared
# architecture, no inspection of the torch module graph ---

def _conv(cin, cout, k, groups=1, bias=False):
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def _bn(c):
    return 2 * c


def expected_parameter_count(cfg: GeneratorConfig) -> int:
    def fused_block(cin, cout):
        hidden = int(round(cin * cfg.expansion_ratio))
        if hidden == cin:
            return _conv(cin, cout, 3) + _bn(cout)
        return _conv(cin, hidden, 3) + _bn(hidden) + _conv(hidden, cout, 1) + _bn(cout)

    def mbconv_block(cin, cout):
        hidden = int(round(cin * cfg.expansion_ratio))
        n = 0
        if hidden != cin:
            n += _conv(cin, hidden, 1) + _bn(hidden)
        n += _conv(hidden, hidden, 3, groups=hidden) + _bn(hidden)
        if cfg.se_ratio > 0:
            reduced = max(1, int(cin * cfg.se_ratio))
            n += _conv(hidden, reduced, 1, bias=True) + _conv(reduced, hidden, 1, bias=True)
        n += _conv(hidden, cout, 1) + _bn(cout)
        return n

    block = {"fused": fused_block, "mbconv": mbconv_block}
    s = cfg.stem_channels
    total = _conv(3, s, 3) + _bn(s) + _conv(s, s, 3) + _bn(s)
    levels = [s, *cfg.stage_channels]
    for i, (cout, reps, kind) in enumerate(
        zip(cfg.stage_channels, cfg.stage_repeats, cfg.stage_kind)
    ):
        for j in range(reps):
            total += block[kind](levels[i] if j == 0 else cout, cout)
    for i in reversed(range(len(cfg.stage_channels))):
        deep, out = levels[i + 1], levels[i]
        kind, reps = cfg.stage_kind[i], cfg.stage_repeats[i]
        for j in range(reps):
            total += block[kind](deep + out if j == 0 else out, out)
    total += _conv(s, 16, 1, bias=True) + _conv(16, 3, 1, bias=True)
    return total


class TestConfig:
    def test_mismatched_stage_lengths(self):
        with pytest.raises(InvalidConfig):
            GeneratorConfig(stage_channels=(8, 16), stage_repeats=(1,), stage_kind=("fused",))

    def test_bad_kind(self):
        with pytest.raises(InvalidConfig):
            GeneratorConfig(stage_channels=(8,), stage_repeats=(1,), stage_kind=("dense",))

    def test_nonpositive_channels(self):
        with pytest.raises(InvalidConfig):
            GeneratorConfig(stem_channels=0)

    def test_zero_repeats(self):
        with pytest.raises(InvalidConfig):
            GeneratorConfig(stage_channels=(8,), stage_repeats=(0,), stage_kind=("fused",))

    def test_bad_activation(self):
        with pytest.raises(InvalidConfig):
            GeneratorConfig(output_activation="tanh")

    def test_dict_round_trip(self):
        assert GeneratorConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_grid_factor(self):
        assert GeneratorConfig().grid_factor == 8
        assert TINY.grid_factor == 2


class TestBuildGenerator:
    def test_same_seed_identical_checksums(self):
        a = build_generator(SMALL, seed=7)
        b = build_generator(SMALL, seed=7)
        assert a.parameter_checksum() == b.parameter_checksum()

    def test_different_seed_differs(self):
        a = build_generator(SMALL, seed=7)
        b = build_generator(SMALL, seed=8)
        assert a.parameter_checksum() != b.parameter_checksum()

    def test_parameter_count_matches_oracle(self):
        for cfg in (TINY, SMALL, GeneratorConfig()):
            assert build_generator(cfg).parameter_count == expected_parameter_count(cfg)

    def test_all_parameters_finite(self):
        model = build_generator(SMALL, seed=0)
        for p in model.parameters():
            assert torch.isfinite(p).all()


class TestForward:
    def test_shape_preserved(self):
        model = build_generator(SMALL, seed=0)
        out = model(torch.rand(1, 3, 64, 64))
        assert out.shape == (1, 3, 64, 64)

    def test_output_strictly_inside_unit_interval(self):
        model = build_generator(SMALL, seed=1)
        out = model(torch.rand(2, 3, 16, 16)).detach()
        assert float(out.min()) > 0.0
        assert float(out.max()) < 1.0

    def test_zero_head_forces_half(self):
        model = build_generator(SMALL, seed=0)
        with torch.no_grad():
            for p in model.head.parameters():
                p.zero_()
        out = model(torch.rand(1, 3, 16, 16))
        np.testing.assert_allclose(out.detach().numpy(), 0.5, atol=1e-7)

    def test_inference_deterministic_across_runs(self):
        x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(3))
        outs = []
        for _ in range(2):
            model = build_generator(SMALL, seed=11)
            model.eval()
            with torch.no_grad():
                outs.append(model(x))
        assert torch.equal(outs[0], outs[1])

    def test_indivisible_spatial_raises(self):
        model = build_generator(SMALL, seed=0)
        with pytest.raises(ShapeMismatch):
            model(torch.rand(1, 3, 18, 16))

    def test_wrong_channels_raises(self):
        model = build_generator(SMALL, seed=0)
        with pytest.raises(ShapeMismatch):
            model(torch.rand(1, 1, 16, 16))

    def test_zeroing_skip_inputs_changes_output(self):
        model = build_generator(SMALL, seed=0)
        model.eval()
        x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(5))
        with torch.no_grad():
            baseline = model(x)
        hooks = [
            stage.register_forward_pre_hook(lambda mod, args: (args[0], torch.zeros_like(args[1])))
            for stage in model.decoder
        ]
        try:
            with torch.no_grad():
                ablated = model(x)
        finally:
            for h in hooks:
                h.remove()
        assert not torch.equal(baseline, ablated)

    def test_gradient_matches_finite_differences(self):
        model = build_generator(TINY, seed=2).double()
        model.eval()  # freeze batch-norm statistics so the map is stateless
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
        model.zero_grad()
        model(x).mean().backward()
        params = [p for p in model.parameters() if p.requires_grad]
        rng = np.random.default_rng(0)
        h = 1e-4
        checked = 0
        while checked < 10:
            p = params[int(rng.integers(len(params)))]
            flat = p.detach().view(-1)
            k = int(rng.integers(flat.numel()))
            analytic = float(p.grad.view(-1)[k])
            with torch.no_grad():
                original = float(flat[k])
                flat[k] = original + h
                f_plus = float(model(x).mean())
                flat[k] = original - h
                f_minus = float(model(x).mean())
                flat[k] = original
            numeric = (f_plus - f_minus) / (2 * h)
            assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric), 1e-9)
            checked += 1


class TestPadToGrid:
    def test_ceiling_example(self):
        padded, record = pad_to_grid(np.zeros((180, 240, 3)), 8)
        assert padded.shape == (184, 240, 3)
        assert record == CropRecord(180, 240)

    def test_aligned_unchanged(self):
        image = np.zeros((16, 32, 3))
        padded, _ = pad_to_grid(image, 8)
        assert padded is image

    def test_reflection_content(self):
        image = np.arange(12, dtype=float).reshape(3, 4)
        padded, _ = pad_to_grid(image, 4)
        assert padded.shape == (4, 4)
        np.testing.assert_array_equal(padded[3], image[1])  # reflected row

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            pad_to_grid(np.zeros((4, 4, 3)), 0)

    @given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 16))
    @settings(max_examples=60, deadline=None)
    def test_crop_inverts_pad(self, h, w, factor):
        image = np.random.default_rng(h * 41 + w).random((h, w, 3))
        padded, record = pad_to_grid(image, factor)
        assert padded.shape[0] % factor == 0 and padded.shape[1] % factor == 0
        np.testing.assert_array_equal(crop_to_record(padded, record), image)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        model = build_generator(SMALL, seed=4)
        # perturb running stats so buffers are exercised too
        model.train()
        model(torch.rand(2, 3, 16, 16))
        meta = CheckpointMeta(seed=4, step=17, metrics_tail=[[0, 0.1, 0.2, 0.3]])
        path = tmp_path / "g.ckpt"
        save_checkpoint(model, path, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded.parameter_checksum() == model.parameter_checksum()
        assert (loaded_meta.seed, loaded_meta.step) == (4, 17)
        assert loaded_meta.metrics_tail == [[0, 0.1, 0.2, 0.3]]

    def test_truncated_file(self, tmp_path):
        model = build_generator(TINY, seed=0)
        path = tmp_path / "g.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(path)

    def test_corrupted_byte(self, tmp_path):
        model = build_generator(TINY, seed=0)
        path = tmp_path / "g.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(path)

    def test_config_mismatch(self, tmp_path):
        model = build_generator(TINY, seed=0)
        path = tmp_path / "g.ckpt"
        save_checkpoint(model, path)
        with pytest.raises(ConfigMismatch):
            load_checkpoint(path, expected_config=SMALL)

    def test_matching_expected_config(self, tmp_path):
        model = build_generator(TINY, seed=0)
        path = tmp_path / "g.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path, expected_config=TINY)
        assert loaded.config == TINY

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOFailure):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(path)

    def test_loaded_model_same_outputs(self, tmp_path):
        model = build_generator(SMALL, seed=6)
        path = tmp_path / "g.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        model.eval()
        loaded.eval()
        with torch.no_grad():
            assert torch.equal(model(x), loaded(x))
