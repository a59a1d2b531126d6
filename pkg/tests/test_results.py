"""Binary result file round trips and corruption handling."""

import struct

import numpy as np
import pytest

from rafem.results import (
    RESULT_MAGIC,
    ResultFormatError,
    ResultWriter,
    StepRecord,
    read_result_file,
)


def sample_records(rng, node_count, steps):
    recs = []
    t = 0.0
    for i in range(steps):
        dt = float(rng.uniform(0.1, 1.0))
        t += dt
        recs.append(StepRecord(
            step=i,
            time=t,
            dt=dt,
            corrector_iters=int(rng.integers(1, 9)),
            converged=True,
            T=rng.uniform(37.0, 90.0, size=node_count),
            V=rng.uniform(0.0, 25.0, size=node_count),
        ))
    return recs


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        rng = np.random.default_rng(61)
        recs = sample_records(rng, 17, 5)
        path = tmp_path / "run.bin"
        with ResultWriter(path, 17) as writer:
            for rec in recs:
                writer.append(rec)
        back = read_result_file(path)
        assert back.node_count == 17
        assert len(back.steps) == 5
        for orig, got in zip(recs, back.steps):
            assert got.step == orig.step
            assert got.time == orig.time
            assert got.dt == orig.dt
            assert got.corrector_iters == orig.corrector_iters
            assert got.converged == orig.converged
            assert np.array_equal(got.T, orig.T)
            assert np.array_equal(got.V, orig.V)

    def test_empty_run_is_readable(self, tmp_path):
        path = tmp_path / "empty.bin"
        with ResultWriter(path, 4):
            pass
        back = read_result_file(path)
        assert back.node_count == 4
        assert back.steps == []

    def test_identical_runs_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(62)
        recs = sample_records(rng, 9, 3)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        for p in (p1, p2):
            with ResultWriter(p, 9) as writer:
                for rec in recs:
                    writer.append(rec)
        assert p1.read_bytes() == p2.read_bytes()

    def test_step_index(self, tmp_path):
        rng = np.random.default_rng(63)
        recs = sample_records(rng, 3, 4)
        path = tmp_path / "run.bin"
        with ResultWriter(path, 3) as writer:
            for rec in recs:
                writer.append(rec)
        back = read_result_file(path)
        assert back.step_index(2) == 2
        with pytest.raises(KeyError):
            back.step_index(99)


class TestCorruption:
    def write_valid(self, path):
        rng = np.random.default_rng(64)
        with ResultWriter(path, 5) as writer:
            for rec in sample_records(rng, 5, 2):
                writer.append(rec)
        return path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        blob = self.write_valid(path)
        path.write_bytes(b"XXSIM1\x00" + blob[7:])
        with pytest.raises(ResultFormatError, match="magic"):
            read_result_file(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.bin"
        blob = self.write_valid(path)
        path.write_bytes(blob[:7] + bytes([9]) + blob[8:])
        with pytest.raises(ResultFormatError, match="version"):
            read_result_file(path)

    def test_truncated_record(self, tmp_path):
        path = tmp_path / "bad.bin"
        blob = self.write_valid(path)
        path.write_bytes(blob[:-11])
        with pytest.raises(ResultFormatError, match="truncated"):
            read_result_file(path)

    def test_too_short(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(RESULT_MAGIC[:3])
        with pytest.raises(ResultFormatError):
            read_result_file(path)

    def test_zero_node_count(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(RESULT_MAGIC + bytes([1]) + struct.pack("<I", 0))
        with pytest.raises(ResultFormatError):
            read_result_file(path)

    def test_writer_rejects_wrong_field_length(self, tmp_path):
        with ResultWriter(tmp_path / "w.bin", 5) as writer:
            with pytest.raises(ValueError):
                writer.append(StepRecord(
                    step=0, time=0.5, dt=0.5, corrector_iters=1, converged=True,
                    T=np.zeros(4), V=np.zeros(5),
                ))
