from __future__ import annotations

import pytest

from smkd.config import ConfigError, RunConfig, arch_hash, format_config, load_config, parse_config

MINIMAL = """
# desk-scale run
dataset = synthetic
epochs = 2
"""


class TestParse:
    def test_minimal_defaults(self):
        cfg = parse_config(MINIMAL)
        assert cfg.data.dataset == "synthetic" and cfg.train.epochs == 2
        assert cfg.train.head.in_dim == cfg.train.vit.embed_dim
        assert cfg.train.augment.output_size == cfg.train.vit.image_size

    def test_nested_and_alias(self):
        cfg = parse_config(MINIMAL + "lambda = 0.25\nvit.depth = 2\nhead.out_dim = 128\neval.mode = cls+weighted\naugment.scale = 0.5, 1.0\ncold_start = yes\n")
        assert cfg.train.lam == 0.25 and cfg.train.vit.depth == 2 and cfg.train.head.out_dim == 128
        assert cfg.eval.mode == "cls+weighted" and cfg.train.augment.scale == (0.5, 1.0)
        assert cfg.train.cold_start is True

    def test_small_vit_carries_into_head_and_augment(self):
        cfg = parse_config(MINIMAL + "vit.embed_dim = 32\nvit.image_size = 16\nvit.patch_size = 4\n")
        assert cfg.train.head.in_dim == 32 and cfg.train.augment.output_size == 16

    def test_inline_comment(self):
        assert parse_config("dataset = synthetic  # built in\nepochs = 3 # short\n").train.epochs == 3

    def test_missing_key_named(self):
        with pytest.raises(ConfigError, match="epochs") as info:
            parse_config("dataset = synthetic\n")
        assert info.value.key == "epochs"

    @pytest.mark.parametrize(
        "extra,line",
        [("bogus = 1\n", 5), ("epochs_x\n", 5), ("vit.depth = two\n", 5), ("vit.unknown = 1\n", 5)],
    )
    def test_errors_carry_line(self, extra, line):
        with pytest.raises(ConfigError) as info:
            parse_config(MINIMAL + extra)
        assert info.value.line == line and f"line {line}" in str(info.value)

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(MINIMAL + "epochs = 3\n")

    def test_short_run_warmup(self):
        assert parse_config("dataset = synthetic\nepochs = 1\n").train.warmup_epochs == 0
        with pytest.raises(ConfigError):
            parse_config("dataset = synthetic\nepochs = 1\nwarmup_epochs = 3\n")

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config(MINIMAL + "loss = mim\n")


class TestFormat:
    def test_round_trip(self):
        cfg = parse_config(MINIMAL + "lambda = 0.3\nvit.depth = 3\neval.k_shot = 5\n")
        assert parse_config(format_config(cfg)) == cfg

    def test_default_round_trip(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(format_config(RunConfig()))
        assert load_config(p) == RunConfig()


class TestArchHash:
    def test_depends_only_on_architecture(self):
        a = parse_config(MINIMAL)
        b = parse_config(MINIMAL + "seed = 5\nbase_lr = 0.001\n")
        c = parse_config(MINIMAL + "vit.depth = 2\n")
        assert a.arch_hash() == b.arch_hash() != c.arch_hash()
        assert len(a.arch_hash()) == 16
        assert arch_hash(a.train.vit, a.train.head) == a.arch_hash()
