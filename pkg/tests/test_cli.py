import csv
import math

import pytest
import torch

from c2fdft.checkpoint import load_checkpoint
from c2fdft.cli import main, pad_to_multiple
from c2fdft.metrics import load_image, save_image


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def corpus(tmp_path):
    root = tmp_path / "corpus"
    assert run("make-data", "--kind", "noise", "--synthetic", 4, "--size", 32, "--out", root,
               "--params", "sigma=0.1", "--seed", 3) == 0
    return root


class TestMakeData:
    def test_noise_corpus_and_manifest(self, tmp_path):
        out = tmp_path / "c"
        assert run("make-data", "--kind", "noise", "--synthetic", 8, "--out", out, "--params", "sigma=0.1", "--seed", 5) == 0
        assert len(list((out / "clean").glob("*.png"))) == 8
        assert len(list((out / "degraded").glob("*.png"))) == 8
        manifest = (out / "manifest.txt").read_text()
        assert "'sigma': 0.1" in manifest and "seed=5" in manifest

    def test_rerun_is_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            run("make-data", "--kind", "rain", "--synthetic", 3, "--out", tmp_path / name, "--seed", 1)
        for f in (tmp_path / "a" / "degraded").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "degraded" / f.name).read_bytes()

    def test_identity_blur_from_src(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        g = torch.Generator().manual_seed(0)
        for i in range(3):
            save_image(torch.rand(3, 24, 24, generator=g), src / f"img{i}.png")
        out = tmp_path / "c"
        assert run("make-data", "--kind", "blur", "--src", src, "--out", out, "--params", "size=1") == 0
        for f in sorted((out / "clean").iterdir()):
            a, b = load_image(f), load_image(out / "degraded" / f.name)
            assert (a - b).abs().max().item() <= 1 / 255 + 1e-7
        assert sorted(p.name for p in (out / "clean").iterdir()) == ["img0.png", "img1.png", "img2.png"]

    def test_empty_src(self, tmp_path, capsys):
        (tmp_path / "src").mkdir()
        assert run("make-data", "--kind", "noise", "--src", tmp_path / "src", "--out", tmp_path / "o") == 1
        assert capsys.readouterr().err.startswith("c2fdft: error:")


class TestTrain:
    def test_fine_without_init(self, corpus, tiny_config_file, tmp_path, capsys):
        code = run("train", "--stage", "fine", "--config", tiny_config_file, "--data", corpus, "--out", tmp_path / "r")
        assert code != 0
        err = capsys.readouterr().err
        assert err.startswith("c2fdft: error:") and "coarse checkpoint" in err

    def test_bad_config_lists_fields(self, corpus, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("model.nope = 1\ncoarse.lr_start = fast\n")
        assert run("train", "--stage", "coarse", "--config", cfg, "--data", corpus, "--out", tmp_path / "r") == 1
        err = capsys.readouterr().err
        assert "model.nope" in err and "coarse.lr_start" in err

    def test_coarse_then_fine_and_resume(self, corpus, tiny_config_file, tmp_path):
        full, part = tmp_path / "full", tmp_path / "part"
        assert run("train", "--stage", "coarse", "--config", tiny_config_file, "--data", corpus, "--out", full) == 0
        assert (full / "coarse_final.c2f").exists() and (full / "coarse_0000010.c2f").exists()
        ck = load_checkpoint(full / "coarse_final.c2f")
        assert ck.stage == "coarse" and ck.iteration == 20

        assert run("train", "--stage", "coarse", "--config", tiny_config_file, "--data", corpus, "--out", part,
                   "--stop-at", 10) == 0
        assert run("train", "--stage", "coarse", "--resume", part / "coarse_0000010.c2f", "--data", corpus,
                   "--out", part) == 0
        full_log = (full / "coarse_metrics.log").read_text().splitlines()
        part_log = (part / "coarse_metrics.log").read_text().splitlines()
        assert part_log == full_log
        a, b = load_checkpoint(full / "coarse_final.c2f"), load_checkpoint(part / "coarse_final.c2f")
        for k in a.params:
            assert torch.equal(a.params[k], b.params[k])

        fine = tmp_path / "fine"
        assert run("train", "--stage", "fine", "--config", tiny_config_file, "--data", corpus,
                   "--init", full / "coarse_final.c2f", "--out", fine) == 0
        fck = load_checkpoint(fine / "fine_final.c2f")
        assert fck.stage == "fine" and fck.iteration == 4
        assert fck.meta["init_from"].endswith("coarse_final.c2f")
        # fine stage refuses a fine checkpoint as init
        assert run("train", "--stage", "fine", "--init", fine / "fine_final.c2f", "--data", corpus,
                   "--out", tmp_path / "x") == 1


class TestRestore:
    def test_pad_to_multiple(self):
        x, size = pad_to_multiple(torch.rand(1, 3, 37, 41))
        assert x.shape == (1, 3, 40, 48) and size == (37, 41)

    def test_odd_size_default_steps_and_determinism(self, random_checkpoint, tmp_path, capsys):
        inp = tmp_path / "in"
        inp.mkdir()
        save_image(torch.rand(3, 37, 41), inp / "odd.png")
        for name in ("o1", "o2"):
            assert run("restore", "--ckpt", random_checkpoint, "--input", inp, "--output", tmp_path / name,
                       "--seed", 4, "--debug-steps") == 0
        assert "S=4" in capsys.readouterr().out
        out = load_image(tmp_path / "o1" / "odd.png")
        assert out.shape == (3, 37, 41)
        assert (tmp_path / "o1" / "odd.png").read_bytes() == (tmp_path / "o2" / "odd.png").read_bytes()
        assert len(list((tmp_path / "o1" / "steps").glob("odd_*.png"))) == 4

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run("restore", "--ckpt", tmp_path / "none.c2f", "--input", tmp_path, "--output", tmp_path / "o") == 1
        assert "checkpoint" in capsys.readouterr().err


class TestEval:
    def test_identical_dirs(self, corpus, tmp_path):
        out = tmp_path / "r.csv"
        assert run("eval", "--pred", corpus / "clean", "--gt", corpus / "clean", "--y-channel", "--out", out) == 0
        rows = read_csv(out)
        assert rows[-1][0] == "MEAN" and float(rows[-1][2]) == pytest.approx(1.0)
        assert rows[1][1] == "inf" and rows[-1][1] == "inf"

    def test_constant_offset_and_aggregation(self, tmp_path):
        pred, gt = tmp_path / "p", tmp_path / "g"
        pred.mkdir()
        gt.mkdir()
        g = torch.Generator().manual_seed(0)
        for i in range(3):
            base = torch.randint(0, 200, (3, 16, 16), generator=g).float() / 255
            save_image(base, gt / f"{i}.png")
            save_image(base + (i + 1) * 17 / 255, pred / f"{i}.png")
        out = tmp_path / "r.csv"
        assert run("eval", "--pred", pred, "--gt", gt, "--out", out) == 0
        rows = read_csv(out)
        for i in range(3):
            assert float(rows[1 + i][1]) == pytest.approx(20 * math.log10(255 / (17 * (i + 1))), abs=1e-4)
        mean = sum(float(r[1]) for r in rows[1:4]) / 3
        assert float(rows[-1][1]) == pytest.approx(mean, abs=1e-5)

    def test_unpaired_exits_nonzero(self, corpus, tmp_path, capsys):
        other = tmp_path / "o"
        other.mkdir()
        assert run("eval", "--pred", other, "--gt", corpus / "clean") == 1
        assert capsys.readouterr().err.startswith("c2fdft: error:")


class TestAblateSteps:
    def test_rows_match_restore_plus_eval(self, random_checkpoint, corpus, tmp_path):
        out = tmp_path / "abl.csv"
        assert run("ablate-steps", "--ckpt", random_checkpoint, "--corpus", corpus, "--steps", "2,3", "--seed", 1,
                   "--out", out) == 0
        rows = read_csv(out)
        assert rows[0] == ["steps", "psnr_db", "ssim", "seconds"]
        for row in rows[1:]:
            S = row[0]
            pred = tmp_path / f"pred{S}"
            assert run("restore", "--ckpt", random_checkpoint, "--input", corpus / "degraded", "--output", pred,
                       "--steps", S, "--seed", 1) == 0
            ev = tmp_path / f"ev{S}.csv"
            assert run("eval", "--pred", pred, "--gt", corpus / "clean", "--y-channel", "--out", ev) == 0
            mean = read_csv(ev)[-1]
            assert row[1] == mean[1] and row[2] == mean[2]

    def test_rejects_small_steps(self, random_checkpoint, corpus, capsys):
        assert run("ablate-steps", "--ckpt", random_checkpoint, "--corpus", corpus, "--steps", "1,4") == 1
        assert ">= 2" in capsys.readouterr().err
