"""Binary checkpoint format.

All fields little-endian::

    magic        4s   b"PKAN"
    version      u32  (= 1)
    -- config --
    joints       u32
    n_edges      u32
    edges        n_edges x (u32, u32)
    embed_dim, grid_size, order, blocks, stack_depth   5 x u32
    irc          u8
    seed         u64
    scaling, dropout, domain_lo, domain_hi             4 x f64
    -- parameters --
    n_params     u64
    values       n_params x f64   (model declaration order)
    -- optimizer --
    has_state    u8
    if has_state:
      step, epoch, rng_seed                            3 x u64
      lr, lr0, decay                                   3 x f64
      decay_every                                      u32
      beta1, beta2, eps                                3 x f64
      m, v, v_hat                                      3 x n_params x f64
    -- trailer --
    crc32        u32  (zlib CRC-32 of every preceding byte)
"""
from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import BadConfigError, CorruptChecksumError, VersionMismatchError
from .graph import build_graph
from .model import ModelConfig, PoseKanModel
from .training import TrainState

MAGIC = b"PKAN"
VERSION = 1


def _flat(arrays):
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def encode_checkpoint(model, state=None):
    cfg = model.config
    g = model.graph
    out = [struct.pack("<4sI", MAGIC, VERSION)]
    out.append(struct.pack("<II", g.joint_count, len(g.edges)))
    out += [struct.pack("<II", i, j) for i, j in g.edges]
    out.append(struct.pack(
        "<5IBQ4d", cfg.embed_dim, cfg.grid_size, cfg.order, cfg.blocks, cfg.stack_depth,
        int(cfg.irc), cfg.seed, cfg.scaling, cfg.dropout, cfg.domain_lo, cfg.domain_hi,
    ))
    params = model.params()
    flat = _flat(list(params.values()))
    out.append(struct.pack("<Q", flat.size))
    out.append(flat.astype("<f8").tobytes())
    if state is None:
        out.append(struct.pack("<B", 0))
    else:
        state.init_moments(params)
        out.append(struct.pack(
            "<B3Q3dI3d", 1, state.step, state.epoch, state.rng_seed,
            state.lr, state.lr0, state.decay, state.decay_every,
            state.beta1, state.beta2, state.eps,
        ))
        for moments in (state.m, state.v, state.v_hat):
            out.append(_flat([moments[n] for n in params]).astype("<f8").tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, state, path):
    blob = encode_checkpoint(model, state)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def unpack(self, fmt):
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += struct.calcsize(fmt)
        return vals

    def floats(self, n):
        arr = np.frombuffer(self.blob, dtype="<f8", count=n, offset=self.pos)
        self.pos += 8 * n
        return arr.astype(np.float64)


def decode_checkpoint(blob, expected_config=None):
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptChecksumError("not a PKAN checkpoint (bad magic or truncated)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptChecksumError("checkpoint CRC-32 mismatch (truncated or corrupted)")
    r = _Reader(body)
    _, version = r.unpack("<4sI")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    J, n_edges = r.unpack("<II")
    edges = [r.unpack("<II") for _ in range(n_edges)]
    F, G, k, blocks, depth, irc, seed, s, drop, lo, hi = r.unpack("<5IBQ4d")
    config = ModelConfig(F, s, G, k, drop, blocks, depth, bool(irc), seed, lo, hi)
    if expected_config is not None:
        mismatched = [
            key for key in ("embed_dim", "grid_size", "order", "blocks", "stack_depth")
            if getattr(expected_config, key) != getattr(config, key)
        ]
        if mismatched:
            detail = ", ".join(
                f"{key}: file {getattr(config, key)} vs expected {getattr(expected_config, key)}"
                for key in mismatched
            )
            raise BadConfigError(f"checkpoint shape does not match config ({detail})")
    model = PoseKanModel(build_graph(J, edges), config)
    params = model.params()
    (n,) = r.unpack("<Q")
    if n != model.parameter_count:
        raise BadConfigError(f"checkpoint holds {n} parameters, config implies {model.parameter_count}")
    flat = r.floats(n)
    offset = 0
    for p in params.values():
        p[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    state = None
    (has_state,) = r.unpack("<B")
    if has_state:
        step, epoch, rng_seed, lr, lr0, decay, every, b1, b2, eps = r.unpack("<3Q3dI3d")
        state = TrainState(lr0, decay, every, b1, b2, eps, rng_seed, step, epoch, lr)
        for moments in (state.m, state.v, state.v_hat):
            flat = r.floats(n)
            offset = 0
            for name, p in params.items():
                moments[name] = flat[offset : offset + p.size].reshape(p.shape).copy()
                offset += p.size
    if r.pos != len(body):
        raise CorruptChecksumError(f"{len(body) - r.pos} trailing bytes after optimizer state")
    return model, state


def load_checkpoint(path, expected_config=None):
    """Returns ``(model, train_state_or_None)``."""
    with open(os.fspath(path), "rb") as fh:
        return decode_checkpoint(fh.read(), expected_config)


def serialized_parameter_count(blob):
    """Number of parameter scalars stored in an encoded checkpoint."""
    r = _Reader(blob)
    r.unpack("<4sI")
    _, n_edges = r.unpack("<II")
    r.pos += 8 * n_edges + struct.calcsize("<5IBQ4d")
    return r.unpack("<Q")[0]
