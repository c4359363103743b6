import hashlib
import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entk.errors import DimensionError, IncompleteTileError, IntegrityError, RefusalError
from entk.store import KernelHeader, KernelStore, TilePlan, load_kernel


def header(rows, cols=None, chunk=2, symmetric=False, **kw):
    return KernelHeader(kind="pntk", algorithm="contraction", output_count=1, rows=rows,
                        cols=rows if cols is None else cols, chunk=chunk, symmetric=symmetric, **kw)


def digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def fill(store, values):
    for t in store.plan.computable_ids():
        r0, r1, c0, c1 = store.plan.rect(t)
        store.write_tile(t, values[r0:r1, c0:c1])


class TestTilePlan:
    def test_ragged_grid(self):
        plan = TilePlan(5, 5, 2)
        assert plan.grid == (3, 3) and plan.n_tiles == 9
        assert plan.rect(8) == (4, 5, 4, 5)

    def test_single_tile(self):
        assert TilePlan(4, 4, 4).n_tiles == 1

    def test_symmetric_upper_triangle(self):
        plan = TilePlan(5, 5, 2, symmetric=True)
        assert plan.computable_ids() == [0, 1, 2, 4, 5, 8]

    @given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 12))
    def test_partition(self, rows, cols, chunk):
        plan = TilePlan(rows, cols, chunk)
        cover = np.zeros((rows, cols), dtype=int)
        for t in range(plan.n_tiles):
            r0, r1, c0, c1 = plan.rect(t)
            assert r1 > r0 and c1 > c0
            cover[r0:r1, c0:c1] += 1
        assert np.all(cover == 1)
        ids = [plan.tile_id(*plan.position(t)) for t in range(plan.n_tiles)]
        assert ids == list(range(plan.n_tiles))

    def test_row_major_ids(self):
        plan = TilePlan(6, 4, 2)
        assert plan.position(1) == (0, 1) and plan.position(2) == (1, 0)


class TestFormat:
    def test_create_layout(self, tmp_path):
        p = tmp_path / "k.entk"
        with KernelStore.create(p, header(5, chunk=2)) as s:
            assert s._bitmap_len == 2
        raw = p.read_bytes()
        assert raw[:4] == b"ENTK"
        magic, version, dtype, kind, alg, mode, o, rows, cols, chunk, sym = struct.unpack_from("<4sHBBBBIQQIB", raw)
        assert (version, dtype, kind, alg, mode, o, rows, cols, chunk, sym) == (1, 1, 1, 1, 0, 1, 5, 5, 2, 0)
        fixed = struct.calcsize("<4sHBBBBIQQIB")
        assert struct.unpack_from("<I", raw, fixed)[0] == 0
        bitmap_at = fixed + 4 + 96
        assert raw[bitmap_at:bitmap_at + 2] == b"\x00\x00"
        assert len(raw) == bitmap_at + 2 + 25 * 8

    def test_layer_mask_and_fingerprints_encoded(self, tmp_path):
        p = tmp_path / "k.entk"
        h = header(3, layer_mask=(0, 2), model_fingerprint=b"\x01" * 32, data_fingerprint_rows=b"\x02" * 32,
                   data_fingerprint_cols=b"\x03" * 32, dtype="f32")
        KernelStore.create(p, h).close()
        with KernelStore.open(p) as s:
            assert s.header == h
        raw = p.read_bytes()
        fixed = struct.calcsize("<4sHBBBBIQQIB")
        assert struct.unpack_from("<3I", raw, fixed) == (2, 0, 2)
        assert raw[fixed + 12:fixed + 12 + 96] == b"\x01" * 32 + b"\x02" * 32 + b"\x03" * 32

    def test_existing_file_refused(self, tmp_path):
        p = tmp_path / "k.entk"
        KernelStore.create(p, header(2)).close()
        with pytest.raises(RefusalError):
            KernelStore.create(p, header(2))
        KernelStore.create(p, header(3), overwrite=True).close()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "k.entk"
        p.write_bytes(b"NOPE" + bytes(200))
        with pytest.raises(IntegrityError):
            KernelStore.open(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "k.entk"
        KernelStore.create(p, header(4)).close()
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(IntegrityError):
            KernelStore.open(p)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            KernelStore.create(tmp_path / "missing" / "k.entk", header(2))


class TestTiles:
    def test_round_trip_bit_exact(self, tmp_path):
        vals = np.random.default_rng(0).standard_normal((5, 5))
        with KernelStore.create(tmp_path / "k.entk", header(5)) as s:
            fill(s, vals)
            np.testing.assert_array_equal(s.assemble(), vals)
            np.testing.assert_array_equal(s.read_tile(4), vals[2:4, 2:4])

    def test_rewrite_is_byte_identical(self, tmp_path):
        vals = np.random.default_rng(1).standard_normal((5, 5))
        a, b = tmp_path / "a.entk", tmp_path / "b.entk"
        with KernelStore.create(a, header(5)) as s:
            fill(s, vals)
        with KernelStore.open(a) as s, KernelStore.create(b, header(5)) as t:
            for tid in s.plan.computable_ids():
                t.write_tile(tid, s.read_tile(tid))
        assert digest(a) == digest(b)

    def test_unwritten_tile(self, tmp_path):
        with KernelStore.create(tmp_path / "k.entk", header(4)) as s:
            with pytest.raises(IncompleteTileError):
                s.read_tile(0)

    def test_extent_mismatch(self, tmp_path):
        with KernelStore.create(tmp_path / "k.entk", header(5)) as s:
            with pytest.raises(DimensionError):
                s.write_tile(8, np.zeros((2, 2)))

    def test_lower_tile_not_writable(self, tmp_path):
        with KernelStore.create(tmp_path / "k.entk", header(4, symmetric=True)) as s:
            with pytest.raises(DimensionError):
                s.write_tile(2, np.zeros((2, 2)))

    def test_symmetric_mirror(self, tmp_path):
        a = np.random.default_rng(2).standard_normal((5, 5))
        a = a + a.T
        with KernelStore.create(tmp_path / "k.entk", header(5, symmetric=True)) as s:
            fill(s, a)
            np.testing.assert_array_equal(s.assemble(), a)

    def test_f32_storage(self, tmp_path):
        vals = np.random.default_rng(3).standard_normal((3, 3))
        with KernelStore.create(tmp_path / "k.entk", header(3, chunk=3, dtype="f32")) as s:
            fill(s, vals)
            np.testing.assert_array_equal(s.assemble(), vals.astype(np.float32).astype(np.float64))

    def test_fault_between_data_and_bitmap(self, tmp_path):
        vals = np.random.default_rng(4).standard_normal((4, 4))
        p, ref = tmp_path / "k.entk", tmp_path / "ref.entk"
        with KernelStore.create(ref, header(4)) as s:
            fill(s, vals)
        with KernelStore.create(p, header(4)) as s:
            s.write_tile(0, vals[:2, :2])
            with pytest.raises(OSError):
                s.write_tile(1, vals[:2, 2:], _fault="after_data")
        with KernelStore.open(p) as s:
            assert not s.is_complete(1)
            assert s.resume_plan() == [1, 2, 3]
            for t in s.resume_plan():
                r0, r1, c0, c1 = s.plan.rect(t)
                s.write_tile(t, vals[r0:r1, c0:c1])
        assert digest(p) == digest(ref)


class TestResumeAppend:
    def test_resume_plan_complement(self, tmp_path):
        with KernelStore.create(tmp_path / "k.entk", header(5)) as s:
            assert s.resume_plan() == list(range(9))
            for t in (0, 3, 4):
                r0, r1, c0, c1 = s.plan.rect(t)
                s.write_tile(t, np.zeros((r1 - r0, c1 - c0)))
            assert s.resume_plan() == [1, 2, 5, 6, 7, 8]
            fill(s, np.zeros((5, 5)))
            assert s.resume_plan() == []

    def test_fingerprint_mismatch_named(self, tmp_path):
        h = header(2, model_fingerprint=b"\x01" * 32, data_fingerprint_rows=b"\x02" * 32)
        with KernelStore.create(tmp_path / "k.entk", h) as s:
            with pytest.raises(IntegrityError, match="model"):
                s.resume_plan(model_fingerprint=b"\x00" * 32)
            with pytest.raises(IntegrityError, match="row data"):
                s.resume_plan(b"\x01" * 32, data_fingerprint_rows=b"\x00" * 32)

    def test_append_symmetric_geometry(self, tmp_path):
        a = np.random.default_rng(5).standard_normal((4, 4))
        a = a + a.T
        old = tmp_path / "old.entk"
        with KernelStore.create(old, header(4, symmetric=True)) as s:
            fill(s, a)
        before = digest(old)
        with KernelStore.open(old) as s, s.append_rows(tmp_path / "new.entk", 2) as t:
            assert t.plan.rows == t.plan.cols == 6
            assert t.completed() == [0, 1, 4]
            assert t.missing() == [2, 5, 8]
            full_grid_new = [tid for tid in range(t.plan.n_tiles) if t.plan.position(tid)[0] >= 2
                             or t.plan.position(tid)[1] >= 2]
            assert len(full_grid_new) == 5
            for tid in t.completed():
                old_id = s.plan.tile_id(*t.plan.position(tid))
                np.testing.assert_array_equal(t.read_tile(tid), s.read_tile(old_id))
        assert digest(old) == before

    def test_append_zero_rows_identical(self, tmp_path):
        old, new = tmp_path / "old.entk", tmp_path / "new.entk"
        with KernelStore.create(old, header(5, symmetric=True)) as s:
            fill(s, np.eye(5))
            s.append_rows(new, 0).close()
        assert digest(old) == digest(new)

    def test_append_ragged_tile_recomputed(self, tmp_path):
        old = tmp_path / "old.entk"
        with KernelStore.create(old, header(5, 3)) as s:
            fill(s, np.ones((5, 3)))
            with s.append_rows(tmp_path / "new.entk", 1) as t:
                # row tile 2 held only row 4; with 6 rows it gains row 5 and must be recomputed
                assert t.completed() == [0, 1, 2, 3]
                assert t.missing() == [4, 5]

    def test_append_refusals(self, tmp_path):
        old = tmp_path / "old.entk"
        with KernelStore.create(old, header(2, model_fingerprint=b"\x07" * 32)) as s:
            with pytest.raises(DimensionError):
                s.append_rows(tmp_path / "n.entk", -1)
            with pytest.raises(IntegrityError):
                s.append_rows(tmp_path / "n.entk", 1, model_fingerprint=b"\x00" * 32)
            with pytest.raises(RefusalError):
                s.append_rows(old, 1)

    def test_load_kernel(self, tmp_path):
        p = tmp_path / "k.entk"
        with KernelStore.create(p, header(3, symmetric=True)) as s:
            fill(s, np.eye(3))
        km = load_kernel(p)
        assert km.kind == "pntk" and km.symmetric
        np.testing.assert_array_equal(km.values, np.eye(3))
        assert os.path.basename(km.meta["path"]) == "k.entk"
