import dataclasses

import pytest

from bilora.data import TRAIN_FAMILIES, DatasetManifest, gen_dataset
from bilora.model import CaptionModel, ModelConfig
from bilora.train import TrainConfig, train


@pytest.fixture(scope="session")
def mid_manifest(tmp_path_factory):
    """Five families, 60 training images each: enough for a usable base."""
    return gen_dataset(tmp_path_factory.mktemp("mid"), TRAIN_FAMILIES, {"train": 60, "val": 4, "test": 10}, seed=0)


@pytest.fixture(scope="session")
def mid_base(mid_manifest):
    cfg = TrainConfig(stage="pretrain", epochs=6, concept_images=300, early_stop=False)
    return train(CaptionModel(ModelConfig(seed=0)), mid_manifest, cfg)


@pytest.fixture(scope="session")
def tiny_manifest(mid_manifest):
    """Four reals and four fam_a fakes; the val split repeats the train split."""
    pool = mid_manifest.select("train", ["fam_a"])
    train_recs = [r for r in pool if r.label == 0][:4] + [r for r in pool if r.label == 1][:4]
    val = [dataclasses.replace(r, split="val") for r in train_recs]
    test = [dataclasses.replace(r, split="test") for r in train_recs]
    return DatasetManifest(train_recs + val + test, seed=0, root=mid_manifest.root)


ACCEPTANCE_LOG: list[dict] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LOG


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(ACCEPTANCE_LOG, key=lambda e: e["key"]):
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"[{status}] {entry['key']}: {entry['title']} -- {entry['detail']}")
