import struct

import numpy as np
import pytest
from conftest import random_tokens, toy_config
from hypothesis import given
from hypothesis import strategies as st

from pcaprune import checkpoint as ckio
from pcaprune.errors import FormatError
from pcaprune.fusing import fuse, fused_forward
from pcaprune.masks import MaskSet
from pcaprune.model import forward, init_model
from pcaprune.numerics import make_rng
from pcaprune.projection import ProjectedModel, identity_projections
from pcaprune.pruning import binarize, random_masks

HEADER = 4 + 4 + 4 + 8 * len(ckio.CONFIG_FIELDS)  # magic, version, field count, fields


def _model_ckpt(arch="postln"):
    model = init_model(toy_config(arch))
    proj = identity_projections(model)
    masks = binarize(random_masks(model.config, proj.groups, 1), 0.5, model.config)
    return model, proj, masks, ckio.model_checkpoint(model, proj, masks)


@pytest.mark.parametrize("arch", ["postln", "rmsnorm"])
def test_model_round_trip_bit_exact(arch, tmp_path):
    model, proj, masks, ck = _model_ckpt(arch)
    path = tmp_path / "m.sp3"
    ckio.write(path, ck)
    back = ckio.read(path)
    assert back.config == model.config
    m2 = ckio.model_from(back)
    assert all(np.array_equal(m2.params[k], model.params[k]) for k in model.params)
    p2, z2 = ckio.projections_from(back), ckio.masks_from(back)
    assert p2.groups == proj.groups and z2.groups == masks.groups
    assert all(np.array_equal(p2[k], proj[k]) for k in proj.tensors)
    assert all(np.array_equal(z2[k], masks[k]) for k in masks.values)
    assert ckio.encode(back) == path.read_bytes()


def test_fused_round_trip(tmp_path):
    model, proj, masks, _ = _model_ckpt("rmsnorm")
    fused = fuse(ProjectedModel(model, proj), masks)
    ckio.write(tmp_path / "f.sp3", ckio.fused_checkpoint(fused))
    raw = (tmp_path / "f.sp3").read_bytes()
    assert raw[:4] == b"SP3F"
    back = ckio.fused_from(ckio.read(tmp_path / "f.sp3"))
    assert back.dims == fused.dims and back.groups == fused.groups
    x = random_tokens(model.config, 4)
    assert np.array_equal(fused_forward(back, x), fused_forward(fused, x))


def test_layout_header_fields():
    model = init_model(toy_config("rmsnorm", seed=7))
    buf = ckio.encode(ckio.model_checkpoint(model))
    assert buf[:4] == b"SP3M"
    version, n = struct.unpack_from("<II", buf, 4)
    assert (version, n) == (1, 9)
    fields = struct.unpack_from("<9q", buf, 12)
    assert fields == (1, 2, 16, 4, 32, 8, 9, 2, 7)
    (n_rec,) = struct.unpack_from("<I", buf, HEADER)
    assert n_rec == len(model.params)
    (name_len,) = struct.unpack_from("<I", buf, HEADER + 4)
    first = buf[HEADER + 8: HEADER + 8 + name_len].decode()
    assert first == sorted(model.params)[0]


@given(seed=st.integers(0, 10_000), n=st.integers(0, 6))
def test_random_records_round_trip(seed, n):
    rng = make_rng(seed)
    recs = {f"r{rng.integers(1000)}.{i}": rng.normal(size=(int(rng.integers(0, 4)), int(rng.integers(1, 4))))
            for i in range(n)}
    ck = ckio.Checkpoint(ckio.MODEL_MAGIC, toy_config(), recs)
    back = ckio.decode(ckio.encode(ck))
    assert set(back.records) == set(recs)
    assert all(np.array_equal(back.records[k], v) for k, v in recs.items())


def _encoded():
    return ckio.encode(ckio.model_checkpoint(init_model(toy_config())))


def test_bad_magic_offset():
    buf = b"XXXX" + _encoded()[4:]
    with pytest.raises(FormatError) as e:
        ckio.decode(buf)
    assert e.value.offset == 0


def test_bad_version_offset():
    buf = bytearray(_encoded())
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError) as e:
        ckio.decode(bytes(buf))
    assert e.value.offset == 4


@pytest.mark.parametrize("cut", [2, 10, HEADER + 2, HEADER + 30, -3])
def test_truncation_reports_offset(cut):
    buf = _encoded()
    short = buf[:cut] if cut > 0 else buf[:cut]
    with pytest.raises(FormatError) as e:
        ckio.decode(short)
    assert e.value.offset is not None and 0 <= e.value.offset <= len(short)


def test_trailing_bytes_and_nan():
    buf = _encoded()
    with pytest.raises(FormatError, match="trailing"):
        ckio.decode(buf + b"\0")
    bad = bytearray(buf)
    bad[-8:] = struct.pack("<d", float("nan"))
    with pytest.raises(FormatError, match="non-finite"):
        ckio.decode(bytes(bad))


def test_bad_arch_code():
    buf = bytearray(_encoded())
    buf[12:20] = struct.pack("<q", 5)
    with pytest.raises(FormatError) as e:
        ckio.decode(bytes(buf))
    assert e.value.offset == 12


def test_wrong_kind_and_missing_records(tmp_path):
    model, proj, masks, _ = _model_ckpt()
    fused_ck = ckio.fused_checkpoint(fuse(ProjectedModel(model, proj), masks))
    with pytest.raises(FormatError):
        ckio.model_from(fused_ck)
    with pytest.raises(FormatError):
        ckio.fused_from(ckio.model_checkpoint(model))
    ck = ckio.model_checkpoint(model)
    del ck.records["cls.W"]
    with pytest.raises(FormatError):
        ckio.model_from(ck)
    with pytest.raises(FormatError):
        ckio.read(tmp_path / "missing.sp3")


def test_model_only_checkpoint_has_no_extras():
    model = init_model(toy_config())
    ck = ckio.decode(ckio.encode(ckio.model_checkpoint(model)))
    assert ckio.projections_from(ck) is None and ckio.masks_from(ck) is None
    x = random_tokens(model.config, 2)
    assert np.array_equal(forward(ckio.model_from(ck), x), forward(model, x))
    assert MaskSet.ones(model.config).check(model.config)
