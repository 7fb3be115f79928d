"""Seed forking, atomic writes and the image worker pool."""

import pytest

from compvocab.utils.io import atomic_write, parallel_map, write_json
from compvocab.utils.rng import fork_rng


class TestForkRng:
    def test_deterministic(self):
        assert fork_rng(1, "generic/2").random(4).tolist() == fork_rng(1, "generic/2").random(4).tolist()

    def test_stages_and_seeds_differ(self):
        base = fork_rng(1, "generic/2").random(4).tolist()
        assert fork_rng(1, "generic/3").random(4).tolist() != base
        assert fork_rng(2, "generic/2").random(4).tolist() != base


class TestAtomicWrite:
    def test_writes_and_creates_parents(self, tmp_path):
        path = tmp_path / "a" / "b" / "out.json"
        write_json(path, {"b": 1, "a": [1, 2]})
        assert path.read_text().startswith('{\n  "a"')
        assert list(path.parent.iterdir()) == [path]

    def test_failure_keeps_the_old_file(self, tmp_path):
        path = tmp_path / "out.txt"
        path.write_text("old")
        with pytest.raises(RuntimeError):
            with atomic_write(path) as fh:
                fh.write("new")
                raise RuntimeError("boom")
        assert path.read_text() == "old"
        assert list(tmp_path.iterdir()) == [path]


class TestParallelMap:
    @pytest.mark.parametrize("workers", [1, 4])
    def test_order_preserved(self, workers):
        assert parallel_map(lambda x: x * x, range(20), workers) == [x * x for x in range(20)]

    def test_empty(self):
        assert parallel_map(str, [], 4) == []
