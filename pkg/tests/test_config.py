"""Config file parsing, validation, and environment seed override."""

import dataclasses

import pytest

from wsbvib.config import (
    SEED_ENV_VAR,
    RunConfig,
    load_cohort_config,
    load_run_config,
    parse_config_text,
    write_config,
)
from wsbvib.errors import ConfigError, MissingFileError


def write(tmp_path, text, name="cfg.txt"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestParsing:
    def test_sections_and_types(self):
        sections = parse_config_text(
            "train.manifest = m.txt\n"
            "train.batch_size=4\n"
            "model.latent_dim = 16\n"
            "model.input_resolution = 16, 16, 16\n"
            "model.bayesian = false\n"
            "loss.beta = 2.5e-3\n"
            "cohort.radius_range = 0.9 1.1\n")
        assert sections["train"] == {"manifest": "m.txt", "batch_size": 4}
        assert sections["model"]["input_resolution"] == (16, 16, 16)
        assert sections["model"]["bayesian"] is False
        assert sections["loss"]["beta"] == pytest.approx(2.5e-3)
        assert sections["cohort"]["radius_range"] == (0.9, 1.1)

    def test_comments_and_blank_lines_skipped(self):
        sections = parse_config_text("# a comment\n\ntrain.seed = 9\n")
        assert sections["train"] == {"seed": 9}

    @pytest.mark.parametrize("text,fragment", [
        ("whatever\n", "key=value"),
        ("seed = 3\n", "missing a section prefix"),
        ("nosuch.seed = 3\n", "unknown section"),
        ("train.nope = 3\n", "unknown key"),
        ("train.seed = 1\ntrain.seed = 2\n", "duplicate key"),
        ("train.batch_size = many\n", "invalid literal"),
        ("model.bayesian = maybe\n", "not a boolean"),
    ])
    def test_bad_line_reports_source_and_lineno(self, text, fragment):
        with pytest.raises(ConfigError) as err:
            parse_config_text(text, source="f.txt")
        assert "f.txt:" in str(err.value)
        assert fragment in str(err.value)

    def test_error_points_at_offending_line(self):
        with pytest.raises(ConfigError, match="f.txt:3"):
            parse_config_text("# ok\ntrain.seed = 1\nbogus line\n", source="f.txt")

    @pytest.mark.parametrize("raw,expected", [
        ("true", True), ("1", True), ("yes", True), ("on", True),
        ("False", False), ("0", False), ("no", False), ("OFF", False),
    ])
    def test_bool_spellings(self, raw, expected):
        sections = parse_config_text(f"model.bayesian = {raw}\n")
        assert sections["model"]["bayesian"] is expected


class TestLoaders:
    def test_run_config_round_trip(self, tmp_path):
        path = write(tmp_path, (
            "train.manifest = /data/manifest.txt\n"
            "train.out_dir = /tmp/out\n"
            "train.mode = vib\n"
            "train.supervision = pdm\n"
            "train.learning_rate = 5e-4\n"
            "model.latent_dim = 12\n"
            "model.conv_channels = 4,8\n"
            "loss.alpha = 0.5\n"))
        cfg = load_run_config(path)
        assert cfg.manifest == "/data/manifest.txt"
        assert cfg.mode == "vib"
        assert cfg.supervision == "pdm"
        assert cfg.learning_rate == pytest.approx(5e-4)
        assert cfg.model.latent_dim == 12
        assert cfg.model.conv_channels == (4, 8)
        assert cfg.loss.alpha == pytest.approx(0.5)
        # untouched fields keep their defaults
        assert cfg.batch_size == 8
        assert cfg.patience == 50
        assert cfg.max_epochs == 300
        assert cfg.loss.beta == pytest.approx(0.01)

    def test_manifest_required(self, tmp_path):
        path = write(tmp_path, "train.seed = 1\n")
        with pytest.raises(ConfigError, match="train.manifest is required"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_run_config(str(tmp_path / "absent.txt"))

    def test_cohort_config_load(self, tmp_path):
        path = write(tmp_path, (
            "cohort.n_train = 5\n"
            "cohort.resolution = 16,16,16\n"
            "cohort.out_dir = somewhere\n"))
        cfg = load_cohort_config(path)
        assert cfg.n_train == 5
        assert cfg.resolution == (16, 16, 16)
        assert cfg.out_dir == "somewhere"
        assert cfg.n_val == 30

    def test_write_config_round_trips(self, tmp_path):
        original = RunConfig(manifest="m.txt", mode="vib", supervision="pdm",
                             batch_size=3, seed=77)
        sections: dict = {}
        for key, value in original.as_flat_dict().items():
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = value
        path = tmp_path / "rt.txt"
        write_config(str(path), sections)
        assert load_run_config(str(path)) == original

    def test_env_seed_overrides_both_loaders(self, tmp_path, monkeypatch):
        run_path = write(tmp_path, "train.manifest = m\ntrain.seed = 1\n", "r.txt")
        cohort_path = write(tmp_path, "cohort.seed = 1\n", "c.txt")
        monkeypatch.setenv(SEED_ENV_VAR, "424242")
        assert load_run_config(run_path).seed == 424242
        assert load_cohort_config(cohort_path).seed == 424242
        monkeypatch.setenv(SEED_ENV_VAR, "not-a-number")
        with pytest.raises(ConfigError, match=SEED_ENV_VAR):
            load_run_config(run_path)

    def test_env_seed_absent_keeps_file_value(self, tmp_path, monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        path = write(tmp_path, "train.manifest = m\ntrain.seed = 31\n")
        assert load_run_config(path).seed == 31


class TestRunConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0},
        {"batch_size": 0},
        {"patience": 0},
        {"max_epochs": 0},
        {"augment_ceiling": -0.001},
        {"augment_ceiling": 0.051},
        {"mode": "map"},
        {"supervision": "mesh"},
        {"infer_latent_samples": 1},
        {"infer_mask_samples": 0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            RunConfig(manifest="m", **kwargs)

    def test_ceiling_bounds_inclusive(self):
        RunConfig(manifest="m", augment_ceiling=0.0)
        RunConfig(manifest="m", augment_ceiling=0.05)

    def test_four_way_matrix_constructs(self):
        for mode in ("vib", "bvib"):
            for supervision in ("pdm", "cloud"):
                cfg = RunConfig(manifest="m", mode=mode, supervision=supervision)
                assert cfg.network_config().bayesian == (mode == "bvib")

    def test_network_config_does_not_mutate_model(self):
        cfg = RunConfig(manifest="m", mode="vib")
        assert cfg.model.bayesian is True
        assert cfg.network_config().bayesian is False
        assert cfg.model.bayesian is True

    def test_flat_dict_covers_all_sections(self):
        flat = RunConfig(manifest="m").as_flat_dict()
        assert flat["train.manifest"] == "m"
        assert flat["model.latent_dim"] == 32
        assert flat["loss.beta"] == pytest.approx(0.01)
        prefixes = {k.split(".", 1)[0] for k in flat}
        assert prefixes == {"train", "model", "loss"}
