"""FNEC checkpoint container.

Layout (little-endian): magic ``FNEC``; u32 version; u32 image input dim,
u32 text input dim, u32 embedding dim, u32 hidden dim; u64 epoch, u64 step;
then four encoders (image, text, image momentum, text momentum), each as a
u32 tensor count followed by tensors written as u32 ndim, u64 shape, f64
data; then the image and text banks as u64 capacity, u64 dim, u64 length,
i64 ids, f64 rows; finally the tracker as u64 length and f64 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fne.datagen import ByteReader
from fne.errors import FormatError
from fne.memory import MemoryBank
from fne.model import Encoder, TrainState
from fne.stats import DistributionTracker

MAGIC = b"FNEC"
VERSION = 1


def _write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_tensor(r: ByteReader) -> np.ndarray:
    (ndim,) = struct.unpack("<I", r.take(4, "tensor rank"))
    if ndim > 2:
        raise FormatError("inconsistent", f"tensor rank {ndim} not supported")
    shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "tensor shape"))
    n = int(np.prod(shape)) if shape else 1
    return r.array("<f8", n, "tensor data").reshape(shape).copy()


def save_checkpoint(state: TrainState, path) -> None:
    enc = state.image_encoder
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<IIII", enc.d_in, state.text_encoder.d_in, enc.d_out, enc.hidden_dim))
        fh.write(struct.pack("<QQ", state.epoch, state.step))
        for e in (state.image_encoder, state.text_encoder, state.image_key, state.text_key):
            fh.write(struct.pack("<I", len(e.params)))
            for p in e.params:
                _write_tensor(fh, p)
        for bank in (state.image_bank, state.text_bank):
            fh.write(struct.pack("<QQQ", bank.capacity, bank.dim, len(bank)))
            fh.write(np.ascontiguousarray(bank.ids, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(bank.embeddings, dtype="<f8").tobytes())
        values = state.tracker.state()
        fh.write(struct.pack("<Q", len(values)))
        fh.write(np.asarray(values, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    r = ByteReader(Path(path).read_bytes())
    if r.remaining < 4 or r.take(4, "magic") != MAGIC:
        raise FormatError("bad_magic", f"{path} is not an FNEC checkpoint")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise FormatError("bad_version", f"unsupported FNEC version {version}")
    img_in, txt_in, d, hidden = struct.unpack("<IIII", r.take(16, "dimension header"))
    epoch, step = struct.unpack("<QQ", r.take(16, "counters"))
    encoders = []
    for name, d_in in (("image", img_in), ("text", txt_in), ("image key", img_in), ("text key", txt_in)):
        (n,) = struct.unpack("<I", r.take(4, f"{name} encoder"))
        if n != (4 if hidden else 2):
            raise FormatError("inconsistent", f"{name} encoder has {n} tensors")
        enc = Encoder([_read_tensor(r) for _ in range(n)])
        if enc.d_in != d_in or enc.d_out != d or enc.hidden_dim != hidden:
            raise FormatError("inconsistent", f"{name} encoder shape disagrees with header")
        encoders.append(enc)
    banks = []
    for name in ("image", "text"):
        cap, dim, n = struct.unpack("<QQQ", r.take(24, f"{name} bank header"))
        if dim != d or n > cap:
            raise FormatError("inconsistent", f"{name} bank header is inconsistent")
        bank = MemoryBank(cap, dim)
        bank.ids = r.array("<i8", n, f"{name} bank ids").astype(np.int64)
        bank.embeddings = r.array("<f8", n * dim, f"{name} bank rows").reshape(n, dim).copy()
        banks.append(bank)
    (n_tr,) = struct.unpack("<Q", r.take(8, "tracker length"))
    try:
        tracker = DistributionTracker.from_state(r.array("<f8", n_tr, "tracker state"))
    except ValueError as exc:
        raise FormatError("inconsistent", str(exc)) from exc
    if r.remaining:
        raise FormatError("inconsistent", f"{r.remaining} unexpected trailing bytes")
    return TrainState(*encoders, *banks, tracker, epoch=int(epoch), step=int(step))
