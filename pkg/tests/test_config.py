import json

import pytest

from ssat_forge.config import ExperimentSpec, SpecError, parse_spec


def _write(tmp_path, text, name="spec.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestDefaults:
    def test_empty_file_gives_defaults(self, tmp_path):
        spec = parse_spec(_write(tmp_path, ""))
        cfg = spec.train_config()
        assert (cfg.lam, cfg.mask_ratio, cfg.base_lr, cfg.warmup_epochs, cfg.layer_decay) == (0.1, 0.75, 1e-3, 5, 0.75)
        assert (cfg.label_smoothing, cfg.drop_path, cfg.weight_decay, cfg.min_lr) == (0.1, 0.01, 0.05, 1e-6)
        enc = spec.encoder_config()
        assert (enc.dim, enc.depth, enc.heads, enc.patch_size, enc.num_classes) == (64, 4, 4, 4, 3)

    def test_no_path(self):
        assert parse_spec(None).digest == ExperimentSpec().digest


class TestParsing:
    def test_toml_and_json_agree(self, tmp_path):
        toml = _write(tmp_path, "seed = 4\n[train]\nlam = 0.3\n[model.encoder]\ndim = 32\n")
        js = _write(tmp_path, json.dumps({"seed": 4, "train": {"lam": 0.3}, "model": {"encoder": {"dim": 32}}}), "s.json")
        assert parse_spec(toml).digest == parse_spec(js).digest

    def test_unknown_key_is_named(self, tmp_path):
        with pytest.raises(SpecError, match=r"train\.lamda"):
            parse_spec(_write(tmp_path, "[train]\nlamda = 0.3\n"))

    def test_type_error_is_named(self, tmp_path):
        with pytest.raises(SpecError, match=r"train\.epochs"):
            parse_spec(_write(tmp_path, "[train]\nepochs = 'many'\n"))

    def test_range_checked(self, tmp_path):
        with pytest.raises(SpecError, match=r"train\.lam"):
            parse_spec(_write(tmp_path, "[train]\nlam = 1.5\n"))

    @pytest.mark.parametrize(
        "text",
        [
            "[model.encoder]\ndim = 30\nheads = 4\n",
            "[model.encoder]\nimage_size = 30\n",
            "[model.decoder]\ndim = 10\nheads = 4\n",
            "[train]\nepochs = 3\nwarmup_epochs = 5\n",
            "[data]\nsource = 'cifar10'\n",
        ],
    )
    def test_cross_field_invariants(self, tmp_path, text):
        with pytest.raises(SpecError):
            parse_spec(_write(tmp_path, text))

    def test_malformed_toml(self, tmp_path):
        with pytest.raises(SpecError):
            parse_spec(_write(tmp_path, "[train\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(SpecError):
            parse_spec(tmp_path / "absent.toml")


class TestOverrides:
    def test_flags_win_over_file(self, tmp_path):
        spec = parse_spec(_write(tmp_path, "seed = 1\n[train]\nlam = 0.5\n"), {"lam": 0.9, "seed": 7, "mode": None})
        assert spec.train.lam == 0.9 and spec.seed == 7 and spec.train.mode == "ssat"

    def test_override_is_validated(self, tmp_path):
        with pytest.raises(SpecError, match="mask_ratio"):
            parse_spec(None, {"mask_ratio": 1.0})

    def test_digest_tracks_content(self):
        a = parse_spec(None, {"lam": 0.3})
        b = parse_spec(None, {"lam": 0.3})
        c = parse_spec(None, {"lam": 0.5})
        assert a.digest == b.digest != c.digest

    def test_digest_ignores_output_dir(self):
        assert parse_spec(None, {"out": "a"}).digest == parse_spec(None, {"out": "b"}).digest

    def test_seed_reaches_train_config(self):
        assert parse_spec(None, {"seed": 11}).train_config().seed == 11
