import struct
import zlib

import numpy as np
import pytest

from iterprune import numerics as nx
from iterprune.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from iterprune.errors import FormatError, IntegrityError
from iterprune.models import build_lenet300


def sample_checkpoint():
    m = build_lenet300(4)
    m.masks.prune("fc2", [1, 2])
    params = [p.data for p in m.param_list()]
    opt = nx.init_state("nadam", params, weight_decay=1e-4)
    rng = np.random.default_rng(0)
    for bufs in opt.buffers.values():
        for b in bufs:
            b[...] = rng.normal(size=b.shape)
    opt.step = 4321
    sched = nx.constant_schedule(0.0012, 6)
    sched.position = 5
    return Checkpoint(5, m.state_dict(), opt, {"master_seed": 4, "order": "123"}, sched.to_dict(),
                      {k: v.copy() for k, v in m.masks.items()})


def test_round_trip_bit_exact(tmp_path):
    ck = sample_checkpoint()
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "c.iprc"))
    assert back.epoch == 5
    assert back.params.keys() == ck.params.keys()
    for k in ck.params:
        assert back.params[k].dtype == ck.params[k].dtype
        assert back.params[k].tobytes() == ck.params[k].tobytes()
    for k in ck.masks:
        assert np.array_equal(back.masks[k], ck.masks[k])
    assert back.optimizer.kind == "nadam" and back.optimizer.step == 4321
    assert back.optimizer.weight_decay == 1e-4
    for name, bufs in ck.optimizer.buffers.items():
        for a, b in zip(bufs, back.optimizer.buffers[name]):
            assert a.tobytes() == b.tobytes()
    assert back.rng == ck.rng and back.schedule == ck.schedule
    assert nx.LrSchedule.from_dict(back.schedule).position == 5


def test_header_layout():
    buf = to_bytes(sample_checkpoint())
    assert buf[:4] == b"IPRC"
    assert struct.unpack("<IQ", buf[4:16]) == (1, 5)
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])


def test_float64_tensor_round_trip():
    ck = Checkpoint(0, {"w": np.arange(6, dtype=np.float64).reshape(2, 3) / 7})
    back = from_bytes(to_bytes(ck))
    assert back.params["w"].dtype == np.float64
    assert back.params["w"].tobytes() == ck.params["w"].tobytes()
    assert back.optimizer is None


def test_corruption_detected():
    buf = bytearray(to_bytes(sample_checkpoint()))
    buf[100] ^= 0xFF
    with pytest.raises(IntegrityError):
        from_bytes(bytes(buf))


def test_bad_magic():
    buf = to_bytes(sample_checkpoint())
    with pytest.raises(FormatError):
        from_bytes(b"NOPE" + buf[4:])


def test_version_mismatch_rejected():
    body = bytearray(to_bytes(sample_checkpoint())[:-4])
    body[4:8] = struct.pack("<I", 2)
    buf = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(FormatError, match="version 2"):
        from_bytes(buf)
