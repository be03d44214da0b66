import pytest

from metaquant.config import RunConfig
from metaquant.errors import InputError


class TestRunConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_parse_values(self):
        cfg = RunConfig.from_text(
            "# comment\n"
            "run.seed = 7\n"
            "model.widths = 8, 16 ,32\n"
            "model.tie_scales = true\n"
            "model.weight_bit_map = 2:1\n"
            "train.lr = 3e-3   # trailing comment\n"
            "distill.teacher = fp32\n"
        )
        assert cfg.run.seed == 7
        assert cfg.model.widths == (8, 16, 32)
        assert cfg.model.tie_scales is True
        assert cfg.model.weight_bit_map == {2: 1}
        assert cfg.train.lr == 0.003
        assert cfg.distill.teacher == "fp32"
        assert RunConfig.from_text(cfg.to_text()) == cfg

    @pytest.mark.parametrize("line", ["nosection = 1", "run.bogus = 1", "model.widths", "zzz.seed = 1",
                                      "train.epochs = many", "model.tie_scales = maybe"])
    def test_rejects(self, line):
        with pytest.raises(InputError, match="line 1"):
            RunConfig.from_text(line + "\n")

    def test_save_load(self, tmp_path):
        cfg = RunConfig()
        cfg.train.epochs = 3
        p = tmp_path / "c.txt"
        cfg.save(p)
        assert RunConfig.load(p) == cfg
        assert p.read_text() == cfg.to_text()

    def test_digest_tracks_content(self):
        a, b = RunConfig(), RunConfig()
        assert a.digest() == b.digest()
        b.run.seed = 1
        assert a.digest() != b.digest()
