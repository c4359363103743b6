"""The ENTK kernel file: fixed header, tile-completion bitmap, tiles stored contiguously.

Layout (all integers little-endian)::

    magic "ENTK" | version u16 | dtype u8 | kind u8 | algorithm u8 | pntk_mode u8
    O u32 | rows u64 | cols u64 | chunk u32 | symmetric u8
    layer-mask count u32 | indices u32...
    model fingerprint [32] | row-data fingerprint [32] | col-data fingerprint [32]
    bitmap [ceil(n_tiles / 8)]         bit t (LSB first) set <=> tile t complete
    tile data                          computable tiles in ascending id order, each row-major

Tile ids are row-major over the tile grid. A symmetric file stores only tiles
with tile_row <= tile_col; the lower triangle is mirrored on read.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, IncompleteTileError, IntegrityError, RefusalError

MAGIC = b"ENTK"
VERSION = 1
DEFAULT_CHUNK = 256

_FIXED = struct.Struct("<4sHBBBBIQQIB")
DTYPES = {"f32": (0, np.dtype("<f4")), "f64": (1, np.dtype("<f8"))}
KIND_CODES = {"ntk": 0, "pntk": 1}
ALGORITHM_CODES = {"naive": 0, "contraction": 1, "nvp": 2}
MODE_CODES = {"sum": 0, "first": 1}


def _decode(table, code, what):
    for name, value in table.items():
        if (value[0] if isinstance(value, tuple) else value) == code:
            return name
    raise IntegrityError(f"unknown {what} code {code}")


@dataclass(frozen=True)
class TilePlan:
    rows: int
    cols: int
    chunk: int
    symmetric: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.chunk < 1:
            raise DimensionError(f"tile plan extents must be >= 1: {self}")
        if self.symmetric and self.rows != self.cols:
            raise DimensionError(f"symmetric plan must be square, got {self.rows}x{self.cols}")

    @property
    def grid(self):
        return -(-self.rows // self.chunk), -(-self.cols // self.chunk)

    @property
    def n_tiles(self) -> int:
        gr, gc = self.grid
        return gr * gc

    def position(self, tile_id: int):
        if not 0 <= tile_id < self.n_tiles:
            raise DimensionError(f"tile id {tile_id} outside [0, {self.n_tiles})")
        return divmod(tile_id, self.grid[1])

    def tile_id(self, tile_row: int, tile_col: int) -> int:
        return tile_row * self.grid[1] + tile_col

    def rect(self, tile_id: int):
        """(r0, r1, c0, c1) half-open kernel index ranges of a tile."""
        tr, tc = self.position(tile_id)
        r0, c0 = tr * self.chunk, tc * self.chunk
        return r0, min(self.rows, r0 + self.chunk), c0, min(self.cols, c0 + self.chunk)

    def computable(self, tile_id: int) -> bool:
        tr, tc = self.position(tile_id)
        return not self.symmetric or tr <= tc

    def is_diagonal(self, tile_id: int) -> bool:
        tr, tc = self.position(tile_id)
        return self.symmetric and tr == tc

    def computable_ids(self) -> list:
        return [t for t in range(self.n_tiles) if self.computable(t)]


@dataclass(frozen=True)
class KernelHeader:
    kind: str
    algorithm: str
    output_count: int
    rows: int
    cols: int
    chunk: int = DEFAULT_CHUNK
    symmetric: bool = False
    layer_mask: tuple = ()
    model_fingerprint: bytes = bytes(32)
    data_fingerprint_rows: bytes = bytes(32)
    data_fingerprint_cols: bytes = bytes(32)
    pntk_mode: str = "sum"
    dtype: str = "f64"

    @property
    def plan(self) -> TilePlan:
        return TilePlan(self.rows, self.cols, self.chunk, self.symmetric)

    def pack(self) -> bytes:
        for fp in (self.model_fingerprint, self.data_fingerprint_rows, self.data_fingerprint_cols):
            if len(fp) != 32:
                raise IntegrityError("fingerprints must be 32-byte digests")
        fixed = _FIXED.pack(MAGIC, VERSION, DTYPES[self.dtype][0], KIND_CODES[self.kind],
                            ALGORITHM_CODES[self.algorithm], MODE_CODES[self.pntk_mode],
                            self.output_count, self.rows, self.cols, self.chunk, int(self.symmetric))
        mask = struct.pack(f"<I{len(self.layer_mask)}I", len(self.layer_mask), *self.layer_mask)
        return fixed + mask + self.model_fingerprint + self.data_fingerprint_rows + self.data_fingerprint_cols

    @classmethod
    def unpack(cls, fh):
        raw = fh.read(_FIXED.size)
        if len(raw) < _FIXED.size:
            raise IntegrityError("file too short for an ENTK header")
        magic, version, dtype, kind, alg, mode, o, rows, cols, chunk, sym = _FIXED.unpack(raw)
        if magic != MAGIC:
            raise IntegrityError(f"bad magic {magic!r}, not an ENTK file")
        if version != VERSION:
            raise IntegrityError(f"unsupported ENTK version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        mask = struct.unpack(f"<{count}I", fh.read(4 * count))
        fps = fh.read(96)
        if len(fps) != 96:
            raise IntegrityError("truncated fingerprint block")
        return cls(kind=_decode(KIND_CODES, kind, "kind"), algorithm=_decode(ALGORITHM_CODES, alg, "algorithm"),
                   output_count=o, rows=rows, cols=cols, chunk=chunk, symmetric=bool(sym),
                   layer_mask=tuple(mask), model_fingerprint=fps[:32], data_fingerprint_rows=fps[32:64],
                   data_fingerprint_cols=fps[64:], pntk_mode=_decode(MODE_CODES, mode, "pntk_mode"),
                   dtype=_decode(DTYPES, dtype, "dtype"))


class KernelStore:
    """Handle on one ENTK file. One writer per file; the bitmap bit is set only after tile data is synced."""

    def __init__(self, path, header: KernelHeader, fh, durable=True):
        self.path = os.fspath(path)
        self.header = header
        self.plan = header.plan
        self.durable = durable
        self._fh = fh
        self._dtype = DTYPES[header.dtype][1]
        head = header.pack()
        self._bitmap_offset = len(head)
        self._bitmap_len = -(-self.plan.n_tiles // 8)
        self._data_offset = self._bitmap_offset + self._bitmap_len
        self._tile_offsets = {}
        pos = self._data_offset
        for t in self.plan.computable_ids():
            r0, r1, c0, c1 = self.plan.rect(t)
            self._tile_offsets[t] = pos
            pos += (r1 - r0) * (c1 - c0) * self._dtype.itemsize
        self.file_size = pos
        fh.seek(self._bitmap_offset)
        self._bitmap = bytearray(fh.read(self._bitmap_len))
        if len(self._bitmap) != self._bitmap_len:
            raise IntegrityError("truncated tile bitmap")

    # -- lifecycle ------------------------------------------------------------

    @classmethod
    def create(cls, path, header: KernelHeader, overwrite=False, durable=True) -> "KernelStore":
        path = os.fspath(path)
        if os.path.exists(path) and not overwrite:
            raise RefusalError(f"{path} already exists; pass --overwrite to replace it")
        head = header.pack()
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(bytes(-(-header.plan.n_tiles // 8)))
        fh = open(path, "r+b")
        store = cls(path, header, fh, durable)
        fh.truncate(store.file_size)
        store._sync()
        return store

    @classmethod
    def open(cls, path, durable=True) -> "KernelStore":
        fh = open(os.fspath(path), "r+b")
        try:
            header = KernelHeader.unpack(fh)
            store = cls(path, header, fh, durable)
        except Exception:
            fh.close()
            raise
        actual = os.fstat(fh.fileno()).st_size
        if actual != store.file_size:
            fh.close()
            raise IntegrityError(f"{path}: file is {actual} bytes, header implies {store.file_size}")
        return store

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _sync(self):
        self._fh.flush()
        if self.durable:
            os.fsync(self._fh.fileno())

    # -- tiles ----------------------------------------------------------------

    def is_complete(self, tile_id: int) -> bool:
        self.plan.position(tile_id)
        return bool(self._bitmap[tile_id >> 3] >> (tile_id & 7) & 1)

    def completed(self) -> list:
        return [t for t in self.plan.computable_ids() if self.is_complete(t)]

    def missing(self) -> list:
        return [t for t in self.plan.computable_ids() if not self.is_complete(t)]

    @property
    def complete(self) -> bool:
        return not self.missing()

    def tile_shape(self, tile_id: int):
        r0, r1, c0, c1 = self.plan.rect(tile_id)
        return r1 - r0, c1 - c0

    def _offset(self, tile_id: int) -> int:
        if not self.plan.computable(tile_id):
            raise DimensionError(f"tile {tile_id} lies below the diagonal of a symmetric kernel")
        return self._tile_offsets[tile_id]

    def write_tile(self, tile_id: int, values, _fault=None):
        """Write tile data, sync, then set its bitmap bit.

        ``_fault="after_data"`` raises between the two steps (crash simulation).
        """
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.tile_shape(tile_id):
            raise DimensionError(f"tile {tile_id} expects shape {self.tile_shape(tile_id)}, got {values.shape}")
        self._fh.seek(self._offset(tile_id))
        self._fh.write(np.ascontiguousarray(values, dtype=self._dtype).tobytes())
        self._sync()
        if _fault == "after_data":
            raise OSError(f"injected fault after writing data of tile {tile_id}")
        self._bitmap[tile_id >> 3] |= 1 << (tile_id & 7)
        self._fh.seek(self._bitmap_offset + (tile_id >> 3))
        self._fh.write(bytes([self._bitmap[tile_id >> 3]]))
        self._sync()

    def read_tile(self, tile_id: int) -> np.ndarray:
        if not self.is_complete(tile_id):
            raise IncompleteTileError(f"tile {tile_id} of {self.path} is not complete")
        return self._read_raw(tile_id)

    def _read_raw(self, tile_id: int) -> np.ndarray:
        shape = self.tile_shape(tile_id)
        self._fh.seek(self._offset(tile_id))
        raw = self._fh.read(shape[0] * shape[1] * self._dtype.itemsize)
        return np.frombuffer(raw, dtype=self._dtype).reshape(shape).astype(np.float64)

    def assemble(self) -> np.ndarray:
        """The full kernel as float64; every computable tile must be complete."""
        out = np.empty((self.plan.rows, self.plan.cols))
        for t in self.plan.computable_ids():
            r0, r1, c0, c1 = self.plan.rect(t)
            block = self.read_tile(t)
            out[r0:r1, c0:c1] = block
            if self.plan.symmetric and r0 != c0:
                out[c0:c1, r0:r1] = block.T
        return out

    # -- integrity, resume, append -----------------------------------------------

    def check_fingerprints(self, model_fingerprint=None, data_fingerprint_rows=None, data_fingerprint_cols=None):
        for name, given, stored in (
            ("model", model_fingerprint, self.header.model_fingerprint),
            ("row data", data_fingerprint_rows, self.header.data_fingerprint_rows),
            ("column data", data_fingerprint_cols, self.header.data_fingerprint_cols),
        ):
            if given is not None and bytes(given) != stored:
                raise IntegrityError(f"{self.path}: {name} fingerprint differs from the stored one "
                                     f"({stored.hex()[:16]}... != {bytes(given).hex()[:16]}...)")

    def resume_plan(self, model_fingerprint=None, data_fingerprint_rows=None, data_fingerprint_cols=None) -> list:
        """Missing computable tile ids, ascending, after verifying the supplied fingerprints."""
        self.check_fingerprints(model_fingerprint, data_fingerprint_rows, data_fingerprint_cols)
        return self.missing()

    def append_rows(self, new_path, new_rows: int, model_fingerprint=None, data_fingerprint_rows=None,
                    data_fingerprint_cols=None, overwrite=False) -> "KernelStore":
        """Copy into a new file with ``new_rows`` more kernel rows (and columns, if symmetric).

        Completed tiles whose rectangle is unchanged in the larger grid are
        copied bit-exactly and stay complete; every other tile is pending.
        The original file is not modified.
        """
        if new_rows < 0:
            raise DimensionError("cannot shrink a kernel by appending a negative row count")
        self.check_fingerprints(model_fingerprint)
        if os.path.abspath(os.fspath(new_path)) == os.path.abspath(self.path):
            raise RefusalError("append must write a new file")
        h = self.header
        new_header = replace(
            h,
            rows=h.rows + new_rows,
            cols=h.cols + (new_rows if h.symmetric else 0),
            data_fingerprint_rows=data_fingerprint_rows or h.data_fingerprint_rows,
            data_fingerprint_cols=data_fingerprint_cols or (
                (data_fingerprint_rows or h.data_fingerprint_cols) if h.symmetric else h.data_fingerprint_cols),
        )
        out = KernelStore.create(new_path, new_header, overwrite=overwrite, durable=self.durable)
        try:
            for t in self.completed():
                tr, tc = self.plan.position(t)
                nt = out.plan.tile_id(tr, tc)
                if out.plan.rect(nt) == self.plan.rect(t):
                    out._copy_tile_bytes(nt, self._raw_bytes(t))
            out._sync()
        except Exception:
            out.close()
            raise
        return out

    def _raw_bytes(self, tile_id: int) -> bytes:
        r, c = self.tile_shape(tile_id)
        self._fh.seek(self._offset(tile_id))
        return self._fh.read(r * c * self._dtype.itemsize)

    def _copy_tile_bytes(self, tile_id: int, raw: bytes):
        self._fh.seek(self._offset(tile_id))
        self._fh.write(raw)
        self._fh.flush()
        self._bitmap[tile_id >> 3] |= 1 << (tile_id & 7)
        self._fh.seek(self._bitmap_offset + (tile_id >> 3))
        self._fh.write(bytes([self._bitmap[tile_id >> 3]]))

    def describe(self) -> dict:
        h = self.header
        return {
            "path": self.path,
            "magic": MAGIC.decode(),
            "version": VERSION,
            "dtype": h.dtype,
            "kind": h.kind,
            "algorithm": h.algorithm,
            "pntk_mode": h.pntk_mode,
            "output_count": h.output_count,
            "rows": h.rows,
            "cols": h.cols,
            "chunk": h.chunk,
            "symmetric": str(h.symmetric).lower(),
            "layer_mask": ",".join(str(k) for k in h.layer_mask),
            "model_fingerprint": h.model_fingerprint.hex(),
            "data_fingerprint_rows": h.data_fingerprint_rows.hex(),
            "data_fingerprint_cols": h.data_fingerprint_cols.hex(),
            "tiles": self.plan.n_tiles,
            "computable_tiles": len(self.plan.computable_ids()),
            "complete_tiles": len(self.completed()),
            "bitmap_bytes": self._bitmap_len,
        }


def load_kernel(path):
    """Read a complete ENTK file into a :class:`~entk.ntk.KernelMatrix`."""
    from .ntk import KernelMatrix

    with KernelStore.open(path) as store:
        h = store.header
        values = store.assemble()
    return KernelMatrix(values, h.kind, h.algorithm, h.layer_mask, h.model_fingerprint,
                        (h.data_fingerprint_rows, h.data_fingerprint_cols), h.symmetric, h.output_count,
                        h.pntk_mode, meta={"path": os.fspath(path), "dtype": h.dtype})
