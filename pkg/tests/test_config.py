"""Config text format: parsing, validation, round-trips."""

import pytest

from nem.config import CONFIG_VERSION, ExperimentConfig, load_config, parse_config
from nem.tensor import ConfigError


class TestParsing:
    def test_empty_text_is_all_defaults(self):
        cfg = parse_config("")
        assert cfg == ExperimentConfig()

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# header\n\n  # indented comment\nmodel.k = 6\n")
        assert cfg.model_k == 6

    def test_typed_values(self):
        cfg = parse_config(
            "seed = 7\n"
            "noise.p = 0.25\n"
            "loss.next_step = true\n"
            "data.kind = flying_shapes\n"
            "data.timesteps = 20\n"
            "train.stages =\n"
        )
        assert cfg.seed == 7
        assert cfg.noise_p == 0.25
        assert cfg.loss_next_step is True
        assert cfg.train_stages == ()

    def test_stage_list(self):
        cfg = parse_config(
            "data.kind = flying_mnist\ndata.timesteps = 20\nmodel.arch = conv_mnist\n"
            "train.stages = 20,500,50000\n"
        )
        assert cfg.train_stages == (20, 500, 50000)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("model.depth = 3\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("model.k = 3\nmodel.k = 4\n")

    def test_bad_type_names_line_and_key(self):
        with pytest.raises(ConfigError, match="line 2.*model.k"):
            parse_config("seed = 1\nmodel.k = four\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config("just some words\n")

    def test_version_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="config_version"):
            parse_config(f"config_version = {CONFIG_VERSION + 1}\n")

    def test_bool_spellings(self):
        assert parse_config("loss.input_norm = YES\n").loss_input_norm is True
        assert parse_config("loss.input_norm = 0\n").loss_input_norm is False


class TestRoundTrip:
    def test_text_roundtrip_is_identity(self):
        cfg = ExperimentConfig(
            seed=3,
            data_kind="flying_shapes",
            data_timesteps=20,
            model_arch="conv_shapes",
            model_hidden=100,
            model_k=5,
            loss_placement="every_step",
            loss_next_step=True,
            noise_p=0.2,
        )
        assert parse_config(cfg.to_text()) == cfg

    def test_resolved_text_pins_every_key(self):
        text = ExperimentConfig().to_text()
        assert text.startswith(f"config_version = {CONFIG_VERSION}\n")
        # One line per schema entry plus the version line.
        assert len(text.strip().splitlines()) == 29

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("model.k = 2\n")
        assert load_config(p).model_k == 2


class TestValidation:
    def test_static_requires_single_frame(self):
        with pytest.raises(ConfigError, match="timesteps"):
            ExperimentConfig(data_kind="static_shapes", data_timesteps=5)

    def test_next_step_requires_sequences(self):
        with pytest.raises(ConfigError, match="next_step"):
            ExperimentConfig(loss_next_step=True)

    def test_nem_is_static_fc_only(self):
        with pytest.raises(ConfigError, match="nem"):
            ExperimentConfig(model_variant="nem", model_arch="conv_shapes")
        with pytest.raises(ConfigError, match="nem"):
            ExperimentConfig(
                model_variant="nem", data_kind="flying_shapes", data_timesteps=20
            )

    def test_conv_mnist_needs_mnist_data(self):
        with pytest.raises(ConfigError, match="conv_mnist"):
            ExperimentConfig(model_arch="conv_mnist")

    def test_conv_shapes_rejects_24px_frames(self):
        with pytest.raises(ConfigError, match="28x28"):
            ExperimentConfig(
                data_kind="flying_mnist", data_timesteps=20, model_arch="conv_shapes"
            )

    def test_stages_only_for_mnist(self):
        with pytest.raises(ConfigError, match="stages"):
            ExperimentConfig(train_stages=(20, 500))

    def test_stages_must_ascend(self):
        with pytest.raises(ConfigError, match="ascending"):
            ExperimentConfig(
                data_kind="flying_mnist",
                data_timesteps=20,
                model_arch="conv_mnist",
                train_stages=(500, 20),
            )

    def test_bad_enum_values(self):
        for kwargs in (
            {"data_kind": "shapes"},
            {"model_variant": "em"},
            {"noise_kind": "gaussian"},
            {"loss_placement": "sometimes"},
            {"pixel_family": "poisson"},
        ):
            with pytest.raises(ConfigError):
                ExperimentConfig(**kwargs)

    def test_range_checks(self):
        with pytest.raises(ConfigError, match="noise.p"):
            ExperimentConfig(noise_p=1.5)
        with pytest.raises(ConfigError, match=">= 1"):
            ExperimentConfig(model_k=0)
        with pytest.raises(ConfigError, match="sigma2"):
            ExperimentConfig(pixel_sigma2=0.0)


class TestShippedConfigs:
    def test_every_shipped_config_parses_and_roundtrips(self):
        import pathlib

        cfg_dir = pathlib.Path(__file__).resolve().parent.parent / "configs"
        paths = sorted(cfg_dir.glob("*.cfg"))
        assert len(paths) >= 6
        for path in paths:
            cfg = load_config(path)
            assert parse_config(cfg.to_text()) == cfg


class TestDerived:
    def test_frame_sizes(self):
        assert ExperimentConfig().frame_size() == 28
        assert ExperimentConfig().pixel_dim() == 784
        mnist = ExperimentConfig(
            data_kind="flying_mnist", data_timesteps=20, model_arch="conv_mnist"
        )
        assert mnist.frame_size() == 24
        assert mnist.pixel_dim() == 576

    def test_unroll_conversion_and_overrides(self):
        cfg = ExperimentConfig(model_k=4, model_steps=15)
        u = cfg.unroll()
        assert (u.k, u.steps, u.variant) == (4, 15, "rnnem")
        assert u.noise.kind == "bitflip" and u.noise.p == 0.1
        v = cfg.unroll(k=2, steps=50)
        assert (v.k, v.steps) == (2, 50)

    def test_stage_learning_rates(self):
        cfg = ExperimentConfig(
            data_kind="flying_mnist",
            data_timesteps=20,
            model_arch="conv_mnist",
            optim_lr=0.001,
            optim_lr_later=0.0005,
            train_stages=(20, 500, 50000),
        )
        assert cfg.stage_count() == 3
        assert cfg.lr_for_stage(0) == 0.001
        assert cfg.lr_for_stage(1) == 0.0005
        assert cfg.lr_for_stage(2) == 0.0005
        flat = ExperimentConfig(optim_lr=0.001)
        assert flat.lr_for_stage(0) == 0.001
