"""Shared fixtures: tiny architectures and a small synthetic face corpus.

Everything here is sized for a single CPU; session-scoped fixtures cache the
expensive artifacts (rendered corpora, trained checkpoints) so individual
tests stay fast.
"""

import json
import os

import numpy as np
import pytest

from residen.config import resolve_run_config
from residen.residen_net import DenseBlockConfig, ResiDenConfig
from residen.expression import ExprNetConfig
from residen.fusion import FusionConfig
from residen.synth import SynthSpec, generate

TINY_AUS = [1, 2, 4, 5, 6, 9]


def tiny_residen_config(num_outputs: int = 6, **overrides) -> ResiDenConfig:
    kwargs = dict(
        input_hw=32,
        stem_channels=8,
        blocks=(DenseBlockConfig(2, 4), DenseBlockConfig(2, 4), DenseBlockConfig(3, 4)),
        trunk_channels=8,
        post_conv_channels=(8, 8),
        head_widths=(16, 16, 24),
        head_dropout=(0.0, 0.4, 0.2),
        num_outputs=num_outputs,
    )
    kwargs.update(overrides)
    return ResiDenConfig(**kwargs)


def tiny_expr_config(**overrides) -> ExprNetConfig:
    kwargs = dict(
        input_hw=32,
        conv_channels=(4, 6, 6, 8),
        pool_after=(1, 3, 4),
        fc_widths=(16, 16, 20),
        fc_dropout=(0.4, 0.2, 0.0),
        num_classes=7,
    )
    kwargs.update(overrides)
    return ExprNetConfig(**kwargs)


def tiny_fusion_config(image_cfg: ResiDenConfig, expr_width: int = 20,
                       **overrides) -> FusionConfig:
    kwargs = dict(
        image_feature_width=image_cfg.feature_width(),
        expr_raw_width=expr_width,
        reducer_widths=(12, 10),
        head_widths=(16, 16, 16),
        head_dropout=(0.0, 0.0, 0.0),
        num_aus=image_cfg.num_outputs,
    )
    kwargs.update(overrides)
    return FusionConfig(**kwargs)


def tiny_arch_dict(num_outputs: int = 6) -> dict:
    return {
        "input_hw": 32,
        "stem_channels": 8,
        "blocks": [{"num_layers": 2, "growth_rate": 4},
                   {"num_layers": 2, "growth_rate": 4},
                   {"num_layers": 3, "growth_rate": 4}],
        "trunk_channels": 8,
        "post_conv_channels": [8, 8],
        "head_widths": [16, 16, 24],
        "head_dropout": [0.0, 0.4, 0.2],
        "num_outputs": num_outputs,
    }


def tiny_expr_arch_dict() -> dict:
    return {
        "kind": "expr_cnn",
        "input_hw": 32,
        "conv_channels": [4, 6, 6, 8],
        "pool_after": [1, 3, 4],
        "fc_widths": [16, 16, 20],
        "fc_dropout": [0.4, 0.2, 0.0],
        "num_classes": 7,
    }


def au_train_config(manifest: str, out_dir: str, epochs: int = 2,
                    seed: int = 11, **training) -> dict:
    tr = {"epochs": epochs, "batch_size": 8, "lr": 0.003}
    tr.update(training)
    return resolve_run_config({
        "task": "au",
        "seed": seed,
        "architecture": tiny_arch_dict(len(TINY_AUS)),
        "data": {"manifest": manifest, "au_list": TINY_AUS, "out_hw": 32,
                 "augment": {"enabled": False}},
        "training": tr,
        "output": {"dir": out_dir},
    })


def expr_train_config(manifest: str, out_dir: str, epochs: int = 2,
                      seed: int = 5, **training) -> dict:
    tr = {"epochs": epochs, "batch_size": 8, "lr": 0.003}
    tr.update(training)
    return resolve_run_config({
        "task": "expression",
        "seed": seed,
        "architecture": tiny_expr_arch_dict(),
        "data": {"manifest": manifest, "out_hw": 32,
                 "augment": {"enabled": False}},
        "training": tr,
        "output": {"dir": out_dir},
    })


def fusion_train_config(manifest: str, out_dir: str, image_ckpt: str,
                        expr_ckpt: str, epochs: int = 2, seed: int = 13,
                        **training) -> dict:
    tr = {"epochs": epochs, "batch_size": 8, "lr": 0.003,
          "image_checkpoint": image_ckpt, "expr_checkpoint": expr_ckpt}
    tr.update(training)
    return resolve_run_config({
        "task": "fusion",
        "seed": seed,
        "architecture": {
            "image_feature_width": 8,
            "expr_raw_width": 20,
            "reducer_widths": [12, 10],
            "head_widths": [16, 16, 16],
            "head_dropout": [0.0, 0.0, 0.0],
        },
        "data": {"manifest": manifest, "au_list": TINY_AUS, "out_hw": 32,
                 "augment": {"enabled": False}},
        "training": tr,
        "output": {"dir": out_dir},
    })


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> str:
    """24-sample synthetic corpus over the 6 tiny units, 32x32."""
    out = tmp_path_factory.mktemp("corpus")
    generate(SynthSpec(count=24, seed=7, au_list=tuple(TINY_AUS),
                       split_fractions=(0.7, 0.3, 0.0), out_hw=32), str(out))
    return str(out)


@pytest.fixture(scope="session")
def corpus_manifest(corpus_dir) -> str:
    return os.path.join(corpus_dir, "manifest.csv")


@pytest.fixture(scope="session")
def corpus_meta(corpus_dir) -> dict:
    with open(os.path.join(corpus_dir, "meta.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def au_checkpoint(corpus_manifest, tmp_path_factory) -> str:
    """A 2-epoch detector checkpoint on the tiny corpus."""
    from residen.training import train_run

    out = str(tmp_path_factory.mktemp("au_run"))
    result = train_run(au_train_config(corpus_manifest, out), quiet=True)
    return result["best_path"]


@pytest.fixture(scope="session")
def expr_checkpoint(corpus_manifest, tmp_path_factory) -> str:
    """A 2-epoch expression classifier checkpoint on the tiny corpus."""
    from residen.training import train_run

    out = str(tmp_path_factory.mktemp("expr_run"))
    result = train_run(expr_train_config(corpus_manifest, out), quiet=True)
    return result["best_path"]


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240521)


# test_acceptance appends one line per criterion; replaying them from the
# terminal-summary hook keeps them visible under captured output
ACCEPTANCE_LINES: "list[str]" = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
