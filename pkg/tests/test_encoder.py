import numpy as np
import pytest

from galasim.ibert import (ConfigFault, EncoderConfig, QuantTensor,
                           encoder_forward, stack_forward)
from galasim.modelfs import (ModelFormatError, import_model, load_archive,
                             load_stack, make_synthetic_archive)


@pytest.fixture(scope="module")
def tiny_fs(tmp_path_factory):
    root = tmp_path_factory.mktemp("model")
    arc = root / "tiny.npz"
    make_synthetic_archive(arc, EncoderConfig.tiny(), seed=11)
    return import_model(arc, root / "fs")


@pytest.fixture(scope="module")
def tiny_stack(tiny_fs):
    return load_stack(tiny_fs)


def rand_input(m, params, seed=3):
    rng = np.random.default_rng(seed)
    data = rng.integers(-127, 128, size=(m, params.config.hidden)).astype(np.int8)
    return QuantTensor(data, params.input_scale)


class TestModelFilesystem:
    def test_tiny_archive_round_trips(self, tmp_path):
        cfg = EncoderConfig.tiny()
        arc = tmp_path / "m.npz"
        make_synthetic_archive(arc, cfg, seed=1)
        loaded_cfg, tensors = load_archive(arc)
        assert loaded_cfg == cfg
        assert f"encoder_00/q_proj/weight" in tensors

    def test_import_produces_expected_tree(self, tiny_fs):
        enc_dirs = sorted(p.name for p in tiny_fs.iterdir() if p.is_dir())
        assert enc_dirs == [f"encoder_{i:02d}" for i in range(3)]
        for mod in ("q_proj", "k_proj", "v_proj", "attn_out", "ffn1", "ffn2"):
            assert (tiny_fs / "encoder_00" / mod / "weight.bin").exists()
            assert (tiny_fs / "encoder_00" / mod / "bias.bin").exists()
            assert (tiny_fs / "encoder_00" / mod / "meta.txt").exists()
        for mod in ("ln_attn", "ln_out"):
            assert (tiny_fs / "encoder_00" / mod / "gamma.bin").exists()

    def test_reimport_is_byte_identical(self, tmp_path):
        cfg = EncoderConfig.tiny()
        arc = tmp_path / "m.npz"
        make_synthetic_archive(arc, cfg, seed=5)
        fs1 = import_model(arc, tmp_path / "fs")
        snapshot = {p.relative_to(fs1): p.read_bytes()
                    for p in sorted(fs1.rglob("*")) if p.is_file()}
        fs2 = import_model(arc, tmp_path / "fs")
        for rel, blob in snapshot.items():
            assert (fs2 / rel).read_bytes() == blob

    def test_missing_tensor_named_in_error(self, tmp_path):
        cfg = EncoderConfig.tiny()
        arc = tmp_path / "m.npz"
        make_synthetic_archive(arc, cfg, seed=5)
        loaded_cfg, tensors = load_archive(arc)
        del tensors["encoder_01/ffn1/weight"]
        from galasim.modelfs import save_archive
        bad = tmp_path / "bad.npz"
        save_archive(bad, loaded_cfg, tensors)
        with pytest.raises(ModelFormatError, match="encoder_01/ffn1/weight"):
            import_model(bad, tmp_path / "fs_bad")

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = EncoderConfig.tiny()
        arc = tmp_path / "m.npz"
        make_synthetic_archive(arc, cfg, seed=5)
        loaded_cfg, tensors = load_archive(arc)
        tensors["encoder_00/q_proj/weight"] = tensors["encoder_00/q_proj/weight"][:, :-1]
        from galasim.modelfs import save_archive
        bad = tmp_path / "bad.npz"
        save_archive(bad, loaded_cfg, tensors)
        with pytest.raises(ModelFormatError, match="shape"):
            import_model(bad, tmp_path / "fs_bad")

    def test_loaded_params_have_chained_scales(self, tiny_stack):
        for prev, nxt in zip(tiny_stack, tiny_stack[1:]):
            assert nxt.input_scale == prev.output_scale


class TestEncoderForward:
    def test_output_shape_and_dtype(self, tiny_stack):
        p = tiny_stack[0]
        out = encoder_forward(rand_input(5, p), p)
        assert out.data.shape == (5, p.config.hidden)
        assert out.data.dtype == np.int8

    def test_any_length_up_to_max_without_padding(self, tiny_stack):
        p = tiny_stack[0]
        # shorter inputs are a strict prefix of nothing -- they simply run
        for m in (1, 3, 7, p.config.max_seq_len):
            out = encoder_forward(rand_input(m, p), p)
            assert out.data.shape[0] == m

    def test_too_long_rejected(self, tiny_stack):
        p = tiny_stack[0]
        with pytest.raises(ConfigFault):
            encoder_forward(rand_input(p.config.max_seq_len + 1, p), p)

    def test_deterministic(self, tiny_stack):
        p = tiny_stack[0]
        a = encoder_forward(rand_input(6, p), p).data
        b = encoder_forward(rand_input(6, p), p).data
        assert a.tolist() == b.tolist()

    def test_head_permutation_is_identity(self, tiny_stack):
        p = tiny_stack[0]
        x = rand_input(6, p)
        base = encoder_forward(x, p).data
        permuted = encoder_forward(x, p, head_order=[1, 0]).data
        assert permuted.tolist() == base.tolist()

    def test_stacking_is_repeated_application(self, tiny_stack):
        x = rand_input(4, tiny_stack[0])
        stacked = stack_forward(x, tiny_stack)
        step = x
        for p in tiny_stack:
            step = encoder_forward(step, p)
        assert stacked.data.tolist() == step.data.tolist()
        assert stacked.scale == tiny_stack[-1].output_scale
