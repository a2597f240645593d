"""Shared fixtures plus the acceptance-criteria summary printer."""

from dataclasses import dataclass
from pathlib import Path

import pytest

# One line per acceptance criterion, printed after the test summary so
# pass/fail status is visible even with output capture on.
ACCEPTANCE_REPORT = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_REPORT.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_REPORT:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line(line)

from patret.augment import AugmentPolicy
from patret.dataset import generate_synthetic
from patret.model import BackboneConfig
from patret.retrieval import embed_dataset, save_embeddings
from patret.train import TrainConfig, train


@dataclass
class PipelineArtifacts:
    corpus_dir: Path
    manifest_path: Path
    config_path: Path
    checkpoint_path: Path
    gallery_path: Path
    val_path: Path
    gallery_size: int
    first_image: Path


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory) -> PipelineArtifacts:
    root = tmp_path_factory.mktemp("pipeline")
    corpus = root / "corpus"
    manifest = generate_synthetic(
        corpus, num_ids=6, views_per_id=3, image_size=32, stroke_width=2, seed=3
    )
    config = TrainConfig(
        manifest_path=str(corpus / "manifest.jsonl"),
        policy=AugmentPolicy(
            crop_size=28, translate_max=2, hflip_prob=0.5, eval_size=32
        ),
        backbone=BackboneConfig([4, 8], input_size=32),
        embed_dim=16,
        batch_size=8,
        max_iters=6,
        log_every=3,
        eval_every=6,
        seed=0,
        checkpoint_path=str(root / "model.prkt"),
        log_path=str(root / "log.csv"),
    )
    config_path = config.save(root / "toy.json")
    result = train(config)
    gallery = embed_dataset(result.checkpoint_path, manifest, None)
    gallery_path = save_embeddings(gallery, root / "gallery.pemb")
    val = embed_dataset(result.checkpoint_path, manifest, "val")
    val_path = save_embeddings(val, root / "val.pemb")
    return PipelineArtifacts(
        corpus_dir=corpus,
        manifest_path=corpus / "manifest.jsonl",
        config_path=config_path,
        checkpoint_path=result.checkpoint_path,
        gallery_path=gallery_path,
        val_path=val_path,
        gallery_size=gallery.size,
        first_image=corpus / gallery.refs[0],
    )
