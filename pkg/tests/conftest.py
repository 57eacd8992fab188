import sys

import pytest
import torch

from percepgen.dataset import DatasetConfig, build_dataset, split_dataset, write_synthetic_sources
from percepgen.model import DiscriminatorConfig, GeneratorConfig

torch.set_num_threads(max(1, torch.get_num_threads()))


def tiny_generator(**kw):
    cfg = dict(input_size=32, levels=3, base_channels=8, max_multiplier=4, em_hidden=[64])
    cfg.update(kw)
    return GeneratorConfig(**cfg)


def tiny_discriminator(**kw):
    cfg = dict(layers=2, base_channels=8, text_channels=4)
    cfg.update(kw)
    return DiscriminatorConfig(**cfg)


@pytest.fixture(scope="session")
def source_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sources")
    write_synthetic_sources(d, 12, size=48, seed=1)
    return d


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory, source_dir):
    """Six categories x 8 pairs at 32x32, 25% held out."""
    out = tmp_path_factory.mktemp("tiny_ds")
    cfg = DatasetConfig(categories=["F", "DRE", "ID", "C", "ID+F", "DRE+C"], per_category=8,
                        resolution=32, seed=3, effects={"segments": 3})
    m = split_dataset(build_dataset(source_dir, cfg, out), 0.25, seed=0)
    m.save()
    return m


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title} - {detail}")
