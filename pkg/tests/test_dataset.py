import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from percepgen.dataset import (
    DatasetConfig, DatasetManifest, build_dataset, load_arrays, sample_counts, split_dataset,
    stable_seed, synthetic_source,
)
from percepgen.errors import DatasetError
from percepgen.prompts import parse_prompt
from percepgen.tasks import TaskCategory


def small_config(**kw):
    base = dict(categories=["F", "DRE", "ID", "C"], per_category=5, resolution=32, seed=11,
                effects={"segments": 3})
    base.update(kw)
    return DatasetConfig(**base)


def test_counts_and_layout(tiny_manifest):
    m = tiny_manifest
    assert len(m.records) == 48
    assert all(n == 8 for n in m.counts.values())
    assert (m.root / "manifest.jsonl").exists()
    x, y = m.load_pair(m.records[0])
    assert x.shape == y.shape == (32, 32, 3)
    m.verify()
    for r in m.records:
        assert parse_prompt(r.prompt).tasks == r.tasks
        assert r.input_path.startswith("input/") and r.target_path.startswith("target/")


def test_rebuild_is_byte_identical(tmp_path, source_dir):
    a = build_dataset(source_dir, small_config(), tmp_path / "a")
    b = build_dataset(source_dir, small_config(), tmp_path / "b")
    assert a.digest() == b.digest()
    for r in a.records:
        assert (tmp_path / "a" / r.input_path).read_bytes() == (tmp_path / "b" / r.input_path).read_bytes()
        assert (tmp_path / "a" / r.target_path).read_bytes() == (tmp_path / "b" / r.target_path).read_bytes()
    c = build_dataset(source_dir, small_config(seed=12), tmp_path / "c")
    assert c.digest() != a.digest()


def test_parallel_build_matches_serial(tmp_path, source_dir):
    a = build_dataset(source_dir, small_config(per_category=3), tmp_path / "a")
    b = build_dataset(source_dir, small_config(per_category=3, workers=2), tmp_path / "b")
    assert a.digest() == b.digest()
    for r in a.records:
        assert (tmp_path / "a" / r.target_path).read_bytes() == (tmp_path / "b" / r.target_path).read_bytes()


def test_manifest_round_trip(tiny_manifest):
    again = DatasetManifest.load(tiny_manifest.root)
    assert again.digest() == tiny_manifest.digest()
    assert again.created_with == tiny_manifest.created_with
    header = json.loads((tiny_manifest.root / "manifest.jsonl").read_text().splitlines()[0])
    assert header["type"] == "header" and header["counts"]["ID+F"] == 8


def test_load_errors(tmp_path):
    with pytest.raises(DatasetError):
        DatasetManifest.load(tmp_path / "missing.jsonl")
    bad = tmp_path / "m.jsonl"
    bad.write_text('{"id": 1}\n')
    with pytest.raises(DatasetError):
        DatasetManifest.load(bad)
    bad.write_text('{"type": "header", "format": 99}\n')
    with pytest.raises(DatasetError):
        DatasetManifest.load(bad)


def test_verify_catches_problems(tiny_manifest):
    m = tiny_manifest
    r0 = m.records[0]
    wrong = DatasetManifest(m.root, [replace(r0, prompt="apply chromostereopsis and foveate")] + m.records[1:], m.header)
    with pytest.raises(DatasetError):
        wrong.verify()
    missing = DatasetManifest(m.root, [replace(r0, input_path="input/nope.png")], m.header)
    with pytest.raises(DatasetError):
        missing.verify()
    dup = DatasetManifest(m.root, [r0, r0], m.header)
    with pytest.raises(DatasetError):
        dup.verify()


def test_insufficient_sources(tmp_path, source_dir):
    with pytest.raises(DatasetError, match="source images"):
        build_dataset(source_dir, small_config(per_category=50), tmp_path / "x")
    with pytest.raises(DatasetError):
        build_dataset(tmp_path / "nowhere", small_config(), tmp_path / "y")


def test_split_stratified(tiny_manifest):
    m = tiny_manifest
    for cat, recs in m.by_category().items():
        assert sum(r.split == "test" for r in recs) == 2
    assert not {r.id for r in m.split("train")} & {r.id for r in m.split("test")}
    assert split_dataset(m, 0.25, seed=0).digest() == m.digest()
    assert split_dataset(m, 0.25, seed=1).digest() != m.digest()
    assert all(r.split == "train" for r in split_dataset(m, 0.0).records)
    with pytest.raises(DatasetError):
        split_dataset(m, 1.0)


def test_split_fraction_on_full_counts():
    # the stratified count rule, checked on a synthetic manifest without images
    from percepgen.dataset import Record
    from percepgen.tasks import TaskKind, TaskSpec

    recs = [Record(f"{k.value}_{i}", "i", "t", "x", (TaskSpec(k),)) for k in TaskKind for i in range(880)]
    m = split_dataset(DatasetManifest(".", recs, {}), 0.1, seed=0)
    for cat, rs in m.by_category("test").items():
        assert len(rs) == 88


def test_sample_counts(tiny_manifest):
    all_counts = sample_counts(tiny_manifest)
    assert all(n == 6 for n in all_counts.values()) and len(all_counts) == 6
    p1 = sample_counts(tiny_manifest, phase=1)
    assert set(p1) == {TaskCategory.parse(c) for c in ("F", "DRE", "ID", "C")}
    empty = DatasetManifest(tiny_manifest.root, [r for r in tiny_manifest.records if r.category.name != "C"],
                            tiny_manifest.header)
    assert sample_counts(empty)[TaskCategory.parse("C")] == 0


def test_adjective_sampling_distribution(tmp_path, source_dir):
    from percepgen.dataset import _sample_intensities

    rng = np.random.default_rng(0)
    cat = TaskCategory.parse("F")
    draws = Counter(_sample_intensities(cat, DatasetConfig().adjectives, rng)[0].intensity for _ in range(4000))
    assert draws[1.0] / 4000 == pytest.approx(0.8, abs=0.03)  # none + strongly
    assert draws[0.3] / 4000 == pytest.approx(0.1, abs=0.02)


def test_load_arrays(tiny_manifest):
    x, y = load_arrays(tiny_manifest, tiny_manifest.records[:3])
    assert x.shape == (3, 3, 32, 32) and x.dtype == np.float32
    assert x.min() >= -1 and x.max() <= 1


def test_synthetic_source_deterministic():
    a, b = synthetic_source(40, 5), synthetic_source(40, 5)
    assert a.equals(b) and not a.equals(synthetic_source(40, 6))
    assert stable_seed("a", 1) == stable_seed("a", 1) != stable_seed("a", 2)
