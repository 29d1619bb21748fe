import csv
import json

import numpy as np
import pytest
import torch

from medvsr import checkpoint as ck
from medvsr.cli import ABLATION_AXES, RESOLVED, main
from medvsr.config import DESK, PAPER, RunConfig
from medvsr.data import DegradationSpec, degrade, load_clip, save_clip, synth_clip
from medvsr.errors import ContractError
from medvsr.model import MedVSR, ModelConfig, forward_clip
from medvsr.train import make_optimizer, train_step

TINY = ["width=8", "d_state=4", "heads=2", "depth=1", "dcn_groups=2", "window=8",
        "batch=1", "frames=2", "patch=32", "synth_clips=2", "synth_size=64", "synth_frames=3"]


def run(verb, *args, overrides=()):
    argv = [verb, *map(str, args)]
    for o in overrides:
        argv += ["--override", o]
    return main(argv)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- config ------------------------------------------------------------------------

def test_dump_load_roundtrip(tmp_path):
    cfg = DESK.with_overrides(["lpe=false", "lr=0.5", "hr_root=/x y"])
    cfg.write(tmp_path / "c")
    assert RunConfig.load(tmp_path / "c") == cfg


def test_loads_comments_and_types():
    cfg = RunConfig.loads("# desk\n\niterations = 7\nsp = false  \nnoise_std=0\n")
    assert (cfg.iterations, cfg.sp, cfg.noise_std) == (7, False, 0.0)


@pytest.mark.parametrize("text", ["itrations = 3", "iterations = three", "sp = maybe",
                                  "iterations", "k = 4", "iterations = 1\niterations = 2"])
def test_bad_config_rejected(text):
    with pytest.raises(ContractError):
        RunConfig.loads(text)


def test_profiles():
    assert DESK.model_config() == ModelConfig()
    assert (PAPER.width, PAPER.iterations, PAPER.lr, PAPER.patch) == (64, 100_000, 2e-4, 256)
    assert DESK.schedule().beta2 == 0.99 and PAPER.schedule().beta2 == 0.999


# -- checkpoint --------------------------------------------------------------------

def test_checkpoint_roundtrip_bytes_and_outputs(tmp_path):
    torch.manual_seed(0)
    model = MedVSR(ModelConfig(width=8, d_state=4, heads=2, depth=1, dcn_groups=2))
    opt = make_optimizer(model)
    train_step(model, opt, torch.rand(1, 2, 3, 8, 8), torch.rand(1, 2, 3, 32, 32))
    ck.save_checkpoint(tmp_path / "a.mvsr", model, opt, 1, np.random.default_rng(3), {"seed": 0})
    loaded = ck.load_checkpoint(tmp_path / "a.mvsr")
    rebuilt = loaded.build_model()
    opt2 = make_optimizer(rebuilt)
    ck.restore_optimizer(rebuilt, opt2, loaded)
    ck.save_checkpoint(tmp_path / "b.mvsr", rebuilt, opt2, 1, ck.restore_rng(loaded), {"seed": 0})
    assert (tmp_path / "a.mvsr").read_bytes() == (tmp_path / "b.mvsr").read_bytes()
    assert ck.payload_bytes(tmp_path / "a.mvsr") == ck.payload_bytes(tmp_path / "b.mvsr")
    clip = np.random.default_rng(1).random((2, 8, 8, 3))
    assert np.array_equal(forward_clip(model, clip), forward_clip(rebuilt, clip))
    manifest, _ = ck.read_manifest(tmp_path / "a.mvsr")
    assert manifest["iteration"] == 1 and manifest["config"]["width"] == 8


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(ContractError):
        ck.load_checkpoint(tmp_path / "x")


# -- degrade -----------------------------------------------------------------------

@pytest.fixture
def hr_tree(tmp_path):
    root = tmp_path / "hr"
    for i, kind in enumerate(["moving_bars", "drifting_texture"]):
        save_clip(synth_clip(kind, 3, 32, 32, seed=i), root / f"clip{i}")
    return root


def test_degrade_tree_deterministic(tmp_path, hr_tree):
    for name in ("a", "b"):
        assert run("degrade", "--out", tmp_path / name, overrides=[f"hr_root={hr_tree}"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 6
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert sorted(c["clip"] for c in manifest["clips"]) == ["clip0", "clip1"]
    assert (tmp_path / "a" / RESOLVED).exists()


def test_degrade_noise_free_is_bicubic(tmp_path, hr_tree):
    assert run("degrade", "--out", tmp_path / "lr",
               overrides=[f"hr_root={hr_tree}", "noise_std=0"]) == 0
    ref = degrade(load_clip(hr_tree / "clip1"), DegradationSpec(noise_std=0))
    np.testing.assert_allclose(load_clip(tmp_path / "lr" / "clip1"), ref, atol=0.5 / 255 + 1e-12)


def test_degrade_missing_tree(tmp_path):
    assert run("degrade", "--out", tmp_path, overrides=[f"hr_root={tmp_path / 'nope'}"]) == 2


# -- train / infer -----------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--out", out, "--seed", 1,
               overrides=TINY + ["iterations=1"]) == 0
    return out


def test_single_iteration_outputs(trained):
    assert [p.name for p in (trained / "checkpoints").iterdir()] == ["ckpt_000001.mvsr"]
    rows = read_rows(trained / "loss.csv")
    assert rows[0] == ["iteration", "loss", "lr"] and len(rows) == 2
    assert float(rows[1][2]) == 1e-3  # desk peak rate on the first step
    echo = RunConfig.load(trained / RESOLVED)
    assert echo.iterations == 1 and echo.seed == 1


def test_lr_column_follows_cosine(tmp_path):
    assert run("train", "--out", tmp_path, overrides=TINY + ["iterations=3", "lr=2e-4"]) == 0
    lrs = [float(r[2]) for r in read_rows(tmp_path / "loss.csv")[1:]]
    assert lrs[0] == 2e-4 and lrs[-1] == pytest.approx(1e-7, abs=1e-20)


def test_infer_single_frame_and_rerun(tmp_path, trained):
    save_clip(np.random.default_rng(2).random((1, 8, 10, 3)), tmp_path / "lr")
    ckpt = trained / "checkpoints" / "ckpt_000001.mvsr"
    for name in ("a", "b"):
        assert run("infer", "--checkpoint", ckpt, "--input", tmp_path / "lr",
                   "--out", tmp_path / name) == 0
    out = load_clip(tmp_path / "a")
    assert out.shape == (1, 32, 40, 3)
    assert (tmp_path / "a" / "frame_00001.png").read_bytes() == \
        (tmp_path / "b" / "frame_00001.png").read_bytes()


def test_infer_config_mismatch(tmp_path, trained):
    save_clip(np.zeros((1, 8, 8, 3)), tmp_path / "lr")
    assert run("infer", "--checkpoint", trained / "checkpoints" / "ckpt_000001.mvsr",
               "--input", tmp_path / "lr", overrides=["width=16"]) == 2


def test_unknown_override_exit_code(tmp_path):
    assert run("train", "--out", tmp_path, overrides=["widht=8"]) == 2


# -- eval / flow-error / ablate ----------------------------------------------------

def test_eval_sentinel_and_rows(tmp_path, capsys):
    save_clip(np.random.default_rng(3).random((3, 16, 16, 3)), tmp_path / "gt")
    assert run("eval", "--sr", tmp_path / "gt", "--gt", tmp_path / "gt", "--out", tmp_path / "ev") == 0
    rows = read_rows(tmp_path / "ev" / "metrics.csv")[1:]
    assert len(rows) == 3 and all(float(r[2]) == 99.0 and float(r[3]) == pytest.approx(1, abs=1e-9)
                                  for r in rows)
    summary = read_rows(tmp_path / "ev" / "summary.csv")
    assert summary[-1][0] == "mean" and float(summary[-1][1]) == 99.0
    assert "psnr 99.0000" in capsys.readouterr().out


def test_eval_aggregate_matches_rows(tmp_path):
    rng = np.random.default_rng(4)
    for c, T in (("x", 2), ("y", 3)):
        gt = rng.random((T, 16, 16, 3))
        save_clip(gt, tmp_path / "gt" / c)
        save_clip(np.clip(gt + rng.normal(0, 0.05, gt.shape), 0, 1), tmp_path / "sr" / c)
    assert run("eval", "--sr", tmp_path / "sr", "--gt", tmp_path / "gt", "--out", tmp_path / "ev") == 0
    rows = read_rows(tmp_path / "ev" / "metrics.csv")[1:]
    per_clip = [np.mean([float(r[2]) for r in rows if r[0] == c]) for c in ("x", "y")]
    mean = float(read_rows(tmp_path / "ev" / "summary.csv")[-1][1])
    assert abs(mean - np.mean(per_clip)) <= 1e-9


def test_eval_frame_count_mismatch(tmp_path):
    save_clip(np.zeros((2, 12, 12, 3)), tmp_path / "sr")
    save_clip(np.zeros((3, 12, 12, 3)), tmp_path / "gt")
    assert run("eval", "--sr", tmp_path / "sr", "--gt", tmp_path / "gt", "--out", tmp_path / "e") == 2


def test_flow_error_static_and_jitter(tmp_path):
    save_clip(np.repeat(np.random.default_rng(5).random((1, 24, 24, 3)), 3, axis=0), tmp_path / "s")
    assert run("flow-error", "--input", tmp_path / "s", "--method", "zero", "--out", tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "flow_error.json").read_text())["mean"] == 0.0
    save_clip(synth_clip("jitter", 5, 48, 48, seed=1, velocity=(0.5, 0)), tmp_path / "j")
    save_clip(synth_clip("drifting_texture", 5, 48, 48, seed=1, velocity=(0.5, 0)), tmp_path / "d")
    errs = []
    for name in ("j", "d", "j"):
        assert run("flow-error", "--input", tmp_path / name, "--out", tmp_path / f"o{name}") == 0
        errs.append(json.loads((tmp_path / f"o{name}" / "flow_error.json").read_text())["mean"])
    assert errs[0] > errs[1] and errs[0] == errs[2]


def test_ablate_unknown_axis(tmp_path):
    assert run("ablate", "--axis", "depth", "--out", tmp_path) == 2


def test_ablation_axes_cover_the_tables():
    assert list(ABLATION_AXES["prop"]) == ["t2t", "t1t", "t2t1", "both"]
    assert [v for v in ABLATION_AXES["lksb"] if v.startswith("k")] == ["k3", "k5", "k7", "k9"]
    assert list(ABLATION_AXES["window"]) == ["l4", "l8", "l16", "l32"]


def test_ablate_variant_flags_round_trip(tmp_path):
    out = tmp_path / "abl"
    assert run("ablate", "--axis", "issb", "--out", out,
               overrides=TINY + ["iterations=1", "synth_clips=1"]) == 0
    rows = {r[0]: r for r in read_rows(out / "ablation.csv")[1:]}
    assert list(rows) == ["full", "no_lw", "no_cat"]
    assert int(rows["no_cat"][1]) > int(rows["full"][1])
    assert RunConfig.load(out / "no_cat" / RESOLVED).cat is False
    assert RunConfig.load(out / "no_lw" / RESOLVED).issb_lw is False
