import struct

import numpy as np
import pytest

from arclust.checkpoint import (
    MAGIC,
    Checkpoint,
    OptimizerState,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from arclust.config import DESK
from arclust.errors import ParseError
from arclust.trainer import initial_checkpoint, load_corpus, pretrain_loop

SMALL = DESK.replace(num_videos=40, steps=2, warmup_steps=1)


@pytest.fixture(scope="module")
def trained():
    ckpt, _ = pretrain_loop(SMALL, corpus=load_corpus(SMALL))
    return ckpt


def test_save_load_save_is_byte_identical(trained, tmp_path):
    save_checkpoint(tmp_path / "a.arvc", trained)
    loaded = load_checkpoint(tmp_path / "a.arvc")
    save_checkpoint(tmp_path / "b.arvc", loaded)
    assert (tmp_path / "a.arvc").read_bytes() == (tmp_path / "b.arvc").read_bytes()


def test_roundtrip_preserves_every_field(trained):
    back = from_bytes(to_bytes(trained))
    assert back.config == trained.config
    assert back.step == trained.step == 2
    assert back.opt.step == trained.opt.step
    for src, dst in ((trained.params, back.params), (trained.opt.m, back.opt.m), (trained.opt.v, back.opt.v)):
        assert src.keys() == dst.keys()
        for k in src:
            assert dst[k].dtype == src[k].dtype
            np.testing.assert_array_equal(dst[k], src[k])


def test_float64_parameters_roundtrip():
    ckpt = initial_checkpoint(SMALL.replace(precision=64))
    back = from_bytes(to_bytes(ckpt))
    assert back.params["embed.w"].dtype == np.float64
    np.testing.assert_array_equal(back.params["embed.w"], ckpt.params["embed.w"])


def test_header_layout():
    blob = to_bytes(initial_checkpoint(SMALL))
    assert blob[:4] == MAGIC
    version, count = struct.unpack_from("<HI", blob, 4)
    assert version == 1 and count == 6
    (name_len,) = struct.unpack_from("<H", blob, 10)
    assert blob[12:12 + name_len] == b"config"


def test_version_mismatch_is_rejected():
    blob = bytearray(to_bytes(initial_checkpoint(SMALL)))
    struct.pack_into("<H", blob, 4, 2)
    with pytest.raises(ParseError, match="unsupported checkpoint version"):
        from_bytes(bytes(blob))


@pytest.mark.parametrize("mutate,message", [
    (lambda b: b"XRVC" + b[4:], "bad magic"),
    (lambda b: b[:-5], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_files_are_rejected(mutate, message):
    blob = to_bytes(initial_checkpoint(SMALL))
    with pytest.raises(ParseError, match=message):
        from_bytes(mutate(blob))


def test_unsupported_dtype_is_refused():
    ckpt = Checkpoint(SMALL, {"x": np.zeros(2, dtype=np.int32)}, OptimizerState(), 0)
    with pytest.raises(ValueError, match="dtype"):
        to_bytes(ckpt)
