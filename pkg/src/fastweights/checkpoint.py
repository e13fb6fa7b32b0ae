"""Versioned binary checkpoint container (``FWCK1``).

Layout, all integers little-endian::

    b"FWCK1" u32 version
    u32 n_params, then per parameter: name, array
    optimizer: u64 step, f64 alpha beta1 beta2 epsilon, u32 n, per entry: name, m, v
    u32 n_streams, per stream: name, json
    json model spec
    u64 episode counter
    json metadata

``name``/``json`` are u32-length-prefixed UTF-8; ``array`` is u32 ndim,
u32 extents, f64 payload. JSON blocks are canonical (sorted keys, no
whitespace), so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .model import ModelSpec

MAGIC = b"FWCK1"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict
    rng_states: dict[str, dict]
    spec: ModelSpec
    episode: int = 0
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes(), str(path))

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<I", VERSION))
        out.write(struct.pack("<I", len(self.params)))
        for name, a in self.params.items():
            _w_str(out, name)
            _w_array(out, a)
        opt = self.optimizer
        out.write(struct.pack("<Q4d", opt["step"], opt["alpha"], opt["beta1"],
                              opt["beta2"], opt["epsilon"]))
        out.write(struct.pack("<I", len(opt["m"])))
        for name in opt["m"]:
            _w_str(out, name)
            _w_array(out, opt["m"][name])
            _w_array(out, opt["v"][name])
        out.write(struct.pack("<I", len(self.rng_states)))
        for name, st in self.rng_states.items():
            _w_str(out, name)
            _w_str(out, canonical_json(st))
        _w_str(out, canonical_json(spec_to_dict(self.spec)))
        out.write(struct.pack("<Q", self.episode))
        _w_str(out, canonical_json(self.meta))
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, where: str = "<bytes>") -> Checkpoint:
        r = _Reader(raw, where)
        if r.take(5) != MAGIC:
            raise IntegrityError(f"{where}: not a checkpoint (bad magic)")
        (version,) = r.unpack("<I")
        if version != VERSION:
            raise IntegrityError(f"{where}: unsupported checkpoint version {version}")
        params = {}
        for _ in range(r.unpack("<I")[0]):
            name = r.string()
            params[name] = r.array()
        step, alpha, b1, b2, eps = r.unpack("<Q4d")
        m, v = {}, {}
        for _ in range(r.unpack("<I")[0]):
            name = r.string()
            m[name] = r.array()
            v[name] = r.array()
        rng = {}
        for _ in range(r.unpack("<I")[0]):
            name = r.string()
            rng[name] = r.json()
        spec = spec_from_dict(r.json())
        (episode,) = r.unpack("<Q")
        meta = r.json()
        if r.pos != len(raw):
            raise IntegrityError(f"{where}: {len(raw) - r.pos} trailing bytes")
        opt = {"step": step, "alpha": alpha, "beta1": b1, "beta2": b2, "epsilon": eps,
               "m": m, "v": v}
        return cls(params, opt, rng, spec, episode, meta)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def spec_to_dict(spec: ModelSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(spec).items()}


def spec_from_dict(d: dict) -> ModelSpec:
    names = {f.name for f in dataclasses.fields(ModelSpec)}
    if set(d) - names:
        raise IntegrityError(f"unknown model spec fields {sorted(set(d) - names)}")
    return ModelSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _w_str(out, s: str) -> None:
    b = s.encode("utf-8")
    out.write(struct.pack("<I", len(b)))
    out.write(b)


def _w_array(out, a) -> None:
    a = np.asarray(a, dtype=np.float64)
    out.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
    out.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes, where: str):
        self.raw, self.where, self.pos = raw, where, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise IntegrityError(f"{self.where}: truncated at byte {self.pos}")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise IntegrityError(f"{self.where}: corrupt string at byte {self.pos}") from None

    def json(self):
        try:
            return json.loads(self.string())
        except json.JSONDecodeError:
            raise IntegrityError(f"{self.where}: corrupt JSON block") from None

    def array(self) -> np.ndarray:
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
