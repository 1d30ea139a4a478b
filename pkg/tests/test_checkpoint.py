"""Checkpoint serialization: bit-exact roundtrips, damage detection."""

import numpy as np
import pytest

from clipsim.checkpoint import CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint
from clipsim.errors import FormatError
from clipsim.rng import Rng
from clipsim.tensor import Tensor


def sample_params(seed=0):
    rng = Rng(seed)
    return {
        "embed.weight": Tensor(rng.normal(size=(7, 5)).astype(np.float32)),
        "bias": Tensor(rng.normal(size=(5,)).astype(np.float32)),
        "scalar": Tensor(np.float32(3.25)),
        "blk0.attn.q": Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32)),
    }


class TestRoundtrip:
    def test_values_and_order_preserved(self, tmp_path):
        params = sample_params()
        path = tmp_path / "model.cslw"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert list(back) == list(params)
        for k in params:
            assert back[k].dtype == np.float32
            np.testing.assert_array_equal(back[k].data, params[k].data)

    def test_save_is_deterministic(self, tmp_path):
        params = sample_params()
        a, b = tmp_path / "a.cslw", tmp_path / "b.cslw"
        save_checkpoint(params, a)
        save_checkpoint(params, b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_params(self, tmp_path):
        path = tmp_path / "empty.cslw"
        save_checkpoint({}, path)
        assert load_checkpoint(path) == {}

    def test_float64_input_stored_as_float32(self, tmp_path):
        path = tmp_path / "m.cslw"
        save_checkpoint({"w": Tensor(np.array([1.0, 2.0]))}, path)
        back = load_checkpoint(path)
        assert back["w"].dtype == np.float32

    def test_no_temp_file_left_behind(self, tmp_path):
        path = tmp_path / "m.cslw"
        save_checkpoint(sample_params(), path)
        assert [p.name for p in tmp_path.iterdir()] == ["m.cslw"]


class TestDamage:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.cslw"
        save_checkpoint(sample_params(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            load_checkpoint(path)
        assert e.value.offset == 0

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.cslw"
        save_checkpoint(sample_params(), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            load_checkpoint(path)
        assert e.value.offset == 4

    def test_every_truncation_point_detected(self, tmp_path):
        path = tmp_path / "m.cslw"
        save_checkpoint(sample_params(), path)
        raw = path.read_bytes()
        cut = tmp_path / "cut.cslw"
        # Cutting anywhere strictly inside the file must raise, and the
        # reported offset can never exceed the remaining length.
        for n in range(0, len(raw), 7):
            cut.write_bytes(raw[:n])
            with pytest.raises(FormatError) as e:
                load_checkpoint(cut)
            if e.value.offset is not None:
                assert e.value.offset <= n

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "m.cslw"
        save_checkpoint(sample_params(), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"CSLW"
