"""Binary checkpoint format: config echo, named 32-bit parameter table,
optimizer state, step counter, and training RNG state.

Reload-and-continue reproduces the exact loss trajectory of uninterrupted
single-threaded training.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

CKPT_MAGIC = b"LFCK"
CKPT_VERSION = 1
BLANK_INDEX = 0
CONFORMER_ORDER = "ffn/2,self-attn,conv(glu,dw,swish,pw),ffn/2,norm"  # recorded for reproducibility


def _write_array(f, arr):
    f.write(arr.astype("<f4").tobytes())


def save_checkpoint(path, model, step=0, train_config=None, optimizer=None, rng=None):
    header = {
        "config": model.config.to_dict(),
        "architecture": model.architecture,
        "seed": model.seed,
        "step": int(step),
        "blank_index": BLANK_INDEX,
        "conformer_order": CONFORMER_ORDER,
        "train_config": train_config,
        "rng_state": _encode_rng(rng),
        "adam_step": optimizer.t if optimizer is not None else None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    names = model.params.names()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            p = model.params[name]
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.ndim))
            for d in p.shape:
                f.write(struct.pack("<I", d))
            _write_array(f, p.data)
        f.write(struct.pack("<B", 1 if optimizer is not None else 0))
        if optimizer is not None:
            # the optimizer may track a subset (LM-only pretraining)
            for name in names:
                present = name in optimizer.m
                f.write(struct.pack("<B", 1 if present else 0))
                if present:
                    _write_array(f, optimizer.m[name])
                    _write_array(f, optimizer.v[name])
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 10
    header = json.loads(blob[off : off + hlen].decode())
    off += hlen
    if header.get("blank_index") != BLANK_INDEX:
        raise FormatError(f"checkpoint blank_index {header.get('blank_index')} != {BLANK_INDEX}")
    (n_params,) = struct.unpack("<I", blob[off : off + 4])
    off += 4
    params = {}
    order = []
    for _ in range(n_params):
        (nlen,) = struct.unpack("<H", blob[off : off + 2])
        off += 2
        name = blob[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack("<B", blob[off : off + 1])
        off += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack("<I", blob[off : off + 4])
            off += 4
            shape.append(d)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob[off : off + 4 * count], dtype="<f4").reshape(shape)
        off += 4 * count
        params[name] = arr
        order.append(name)
    (has_opt,) = struct.unpack("<B", blob[off : off + 1])
    off += 1
    opt_state = None
    if has_opt:
        opt_state = {"m": {}, "v": {}, "t": header.get("adam_step") or 0}
        for name in order:
            (present,) = struct.unpack("<B", blob[off : off + 1])
            off += 1
            if not present:
                continue
            count = params[name].size
            opt_state["m"][name] = np.frombuffer(blob[off : off + 4 * count], dtype="<f4").reshape(params[name].shape)
            off += 4 * count
            opt_state["v"][name] = np.frombuffer(blob[off : off + 4 * count], dtype="<f4").reshape(params[name].shape)
            off += 4 * count
    if off != len(blob):
        raise FormatError(f"checkpoint trailing bytes: expected {off}, file has {len(blob)}")
    return {
        "header": header,
        "params": params,
        "optimizer": opt_state,
        "step": header["step"],
        "rng_state": header.get("rng_state"),
    }


def _encode_rng(rng):
    if rng is None:
        return None
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=_json_fallback))


def _json_fallback(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def restore_rng(state):
    rng = np.random.default_rng(0)
    if state is not None:
        fixed = dict(state)
        # uint arrays round-trip through JSON as lists
        if isinstance(fixed.get("state"), dict):
            inner = dict(fixed["state"])
            for key, val in inner.items():
                if isinstance(val, list):
                    inner[key] = np.array(val, dtype=np.uint64)
            fixed["state"] = inner
        rng.bit_generator.state = fixed
    return rng
