import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from illutransfer.network import ScaleConfig
from illutransfer.tensor import TrainConfig
from illutransfer.transfer import train_from_scratch
from illutransfer.dataset import SyntheticConfig, compute_mean_rgb, generate_synthetic, label_indices, load_images


class Domains:
    """Small two-domain synthetic dataset loaded into arrays."""

    def __init__(self, root, num_classes, per_class, side, seed):
        self.natural = generate_synthetic(SyntheticConfig(num_classes, per_class, side, "natural", seed=seed),
                                          root / "natural")
        self.illustration = generate_synthetic(
            SyntheticConfig(num_classes, per_class, side, "illustration", seed=seed), root / "illustration")
        self.class_names = self.natural.class_names
        self.side = side
        self.mean = compute_mean_rgb(self.natural, self.natural.subset("train"))

    def split(self, domain, name):
        m = getattr(self, domain)
        rec = m.subset(name)
        return load_images(m, rec, self.mean, self.side), label_indices(rec, m.class_names)


@pytest.fixture(scope="session")
def small_domains(tmp_path_factory):
    return Domains(tmp_path_factory.mktemp("domains"), num_classes=4, per_class=150, side=32, seed=42)


SMALL_BASELINE_CFG = TrainConfig(batch_size=16, base_lr=3e-3, dropout_p=0.0, max_epochs=40, patience=8, seed=7)


@pytest.fixture(scope="session")
def small_baseline(small_domains):
    """(net, report) from training on the small natural domain; about a minute and a half."""
    d = small_domains
    return train_from_scratch(ScaleConfig(input_side=d.side), d.split("natural", "train"),
                              d.split("natural", "val"), SMALL_BASELINE_CFG, d.class_names, d.mean)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        ok, detail = acceptance.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
