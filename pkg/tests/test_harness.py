import csv
import json
import shutil
import struct

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import FAST_LR
from oracles import triangular_by_hand
from surgseg.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_header, save_checkpoint
from surgseg.cli import main
from surgseg.config import ConfigError, TrainConfig, apply_overrides, config_from_dict, load_config
from surgseg.data import IDENTITY_AUGMENTATION, load_dataset, synth_generate, write_image
from surgseg.evaluate import (
    RegistryMismatchError,
    ablate_losses,
    evaluate,
    infer_overlay,
    load_pair,
)
from surgseg.fusion import LabelRegistry
from surgseg.loss import LossConfig, combined_loss
from surgseg.train import NonFiniteLossError, build_model, lr_at, param_hash, train, triangular_lr


def cfg(root, out, head="tool", **kw):
    base = dict(dataset_root=str(root), output_dir=str(out), head=head, batch_size=4, epochs=1, **FAST_LR)
    base.update(kw)
    return TrainConfig(**base)


def blank_checkpoints(tmp_path, registry):
    """Checkpoints whose classifiers ignore features and always favour background."""
    paths = {}
    for head in ("anatomy", "tool"):
        model = build_model(TrainConfig(head=head), registry)
        with torch.no_grad():
            model.decoder.classifier.weight.zero_()
            model.decoder.classifier.bias.fill_(-5.0)
            model.decoder.classifier.bias[0] = 5.0
        paths[head] = save_checkpoint(tmp_path / f"{head}.ckpt", model, head=head, registry=registry)
    return paths


@pytest.fixture(scope="module")
def trained_pair(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("pair")
    ck = {}
    for head in ("anatomy", "tool"):
        res = train(cfg(small_dataset, out / head, head=head, max_steps=3))
        ck[head] = res.last_checkpoint
    return ck


# ---- scheduler

def test_triangular_trace():
    assert [lr_at(TrainConfig(lr_base=5e-6, lr_max=5e-5, cycle_length_steps=10), s) for s in (0, 5, 10)] == \
        pytest.approx([5e-6, 5e-5, 5e-6], abs=1e-15)


def test_triangular_matches_hand_and_torch():
    model = torch.nn.Linear(1, 1)
    opt = torch.optim.SGD(model.parameters(), lr=1e-3)
    ref = torch.optim.lr_scheduler.CyclicLR(opt, base_lr=1e-4, max_lr=2e-3, step_size_up=10,
                                            mode="triangular", cycle_momentum=False)
    for step in range(100):
        ours = triangular_lr(step, 1e-4, 2e-3, 20)
        assert ours == pytest.approx(triangular_by_hand(step, 1e-4, 2e-3, 20), abs=1e-15)
        assert ours == pytest.approx(opt.param_groups[0]["lr"], abs=1e-12)
        opt.step()
        ref.step()


def test_constant_scheduler():
    c = TrainConfig(scheduler="constant", lr_base=3e-4)
    assert {lr_at(c, s) for s in range(50)} == {3e-4}


# ---- config

def test_config_unknown_key():
    with pytest.raises(ConfigError, match="lr_maxx"):
        config_from_dict({"lr_maxx": 1.0})
    with pytest.raises(ConfigError, match="loss.gamma"):
        config_from_dict({"loss": {"gamma": 1.0}})


def test_config_yaml_and_overrides(tmp_path):
    (tmp_path / "c.yaml").write_text("head: anatomy\nloss:\n  alpha: 0.6\n  beta: 0.4\n")
    c = load_config(tmp_path / "c.yaml")
    assert c.head == "anatomy" and c.loss.alpha == 0.6 and c.resolved_head_kind == "mlp"
    c2 = apply_overrides(c, {"loss.lambda_combined": 1.0, "epochs": 3})
    assert c2.loss.lambda_combined == 1.0 and c2.epochs == 3 and c.epochs == 100
    with pytest.raises(ConfigError):
        apply_overrides(c, {"loss.nope": 1})


def test_config_roundtrip():
    c = TrainConfig(head="anatomy", seed=4)
    assert config_from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(head="liver")
    with pytest.raises(ConfigError):
        TrainConfig(lr_base=1e-3, lr_max=1e-4)


# ---- checkpoints

def test_checkpoint_roundtrip_bit_identical(tmp_path, registry):
    model = build_model(TrainConfig(head="tool"), registry)
    path = save_checkpoint(tmp_path / "m.ckpt", model, head="tool", registry=registry, step=7)
    loaded, header = load_checkpoint(path)
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k
    assert header["step"] == 7 and header["head"] == "tool"
    assert LabelRegistry(header["registry"]) == registry
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(model.eval()(x), loaded(x))


def test_checkpoint_layout(tmp_path, registry):
    model = build_model(TrainConfig(head="anatomy"), registry)
    path = save_checkpoint(tmp_path / "m.ckpt", model, head="anatomy", registry=registry)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    total = 0
    for t in header["tensors"]:
        item = 4 if t["dtype"] == "float32" else 8
        assert t["nbytes"] == item * int(np.prod(t["shape"], dtype=np.int64))
        assert t["offset"] == total
        total += t["nbytes"]
    assert len(raw) == 16 + n + total


def test_checkpoint_corruption(tmp_path, registry):
    model = build_model(TrainConfig(), registry)
    path = save_checkpoint(tmp_path / "m.ckpt", model, head="tool", registry=registry)
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        read_header(tmp_path / "bad.ckpt")


# ---- training

def test_nan_parameter_guard(small_dataset, tmp_path, registry):
    c = cfg(small_dataset, tmp_path, max_steps=2)
    model = build_model(c, registry)
    with torch.no_grad():
        model.decoder.classifier.weight[0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as e:
        train(c, model=model, registry=registry, save=False)
    assert e.value.step == 0


def test_epoch_hash_determinism(small_dataset, tmp_path):
    hashes = [param_hash(train(cfg(small_dataset, tmp_path / str(i)), save=False).model) for i in range(2)]
    assert hashes[0] == hashes[1]
    other = param_hash(train(cfg(small_dataset, tmp_path / "x", seed=1), save=False).model)
    assert other != hashes[0]


def test_train_writes_artifacts(small_dataset, tmp_path):
    res = train(cfg(small_dataset, tmp_path, epochs=2))
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    hist = json.loads((tmp_path / "history.json").read_text())
    assert [h["epoch"] for h in hist] == [0, 1] and all("val_miou" in h for h in hist)
    assert res.step == 2 * 4


def test_single_batch_overfit(small_dataset, registry):
    samples = [s for s in load_dataset(small_dataset, "train") if (s.tool_mask != 0).any()][:4]
    c = TrainConfig(dataset_root=str(small_dataset), output_dir="unused", head="tool", batch_size=4,
                    epochs=150, scheduler="constant", lr_base=1e-3, augmentation=IDENTITY_AUGMENTATION)
    res = train(c, train_samples=samples, val_samples=[], registry=registry, save=False)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"] * 0.5


# ---- evaluation

def test_injected_ground_truth_scores_one(small_dataset):
    rep = evaluate(None, small_dataset, "val", "fused", inject_gt=True)
    assert rep["miou"] == pytest.approx(1.0) and rep["mean_dice"] == pytest.approx(1.0)


def test_anatomy_eval_does_not_read_tool_masks(small_dataset, trained_pair, tmp_path):
    before = evaluate(trained_pair, small_dataset, "val", "anatomy")
    copy = tmp_path / "copy"
    shutil.copytree(small_dataset, copy)
    shutil.rmtree(copy / "masks_tool")
    after = evaluate(trained_pair, copy, "val", "anatomy")
    assert before["miou"] == after["miou"] and before["per_class"] == after["per_class"]


def test_eval_report_shape(small_dataset, trained_pair):
    rep = evaluate(trained_pair, small_dataset, "val", "fused")
    assert [r["id"] for r in rep["per_class"]] == [0, 1, 2, 3, 4]
    assert rep["config"]["mode"] == "fused"
    assert 0.0 <= rep["miou"] <= 1.0


def test_load_pair_checks(small_dataset, trained_pair, tmp_path, registry):
    with pytest.raises(ValueError, match="head"):
        load_pair({"anatomy": trained_pair["tool"], "tool": trained_pair["tool"]}, ("anatomy", "tool"))
    other = LabelRegistry(registry.to_list()[1:] + [{"id": 5, "name": "x", "head": "tool", "color": [1, 2, 3]}])
    model = build_model(TrainConfig(head="tool"), other)
    bad = save_checkpoint(tmp_path / "t.ckpt", model, head="tool", registry=other)
    with pytest.raises(RegistryMismatchError):
        load_pair({"anatomy": trained_pair["anatomy"], "tool": bad}, ("anatomy", "tool"))


# ---- overlay

def test_overlay_all_background_is_input(tmp_path, registry):
    ck = blank_checkpoints(tmp_path, registry)
    rng = np.random.default_rng(0)
    write_image(tmp_path / "img.png", rng.random((3, 64, 64)).astype(np.float32))
    res = infer_overlay(ck, tmp_path / "img.png", tmp_path / "out/o")
    assert res["classes_present"] == [0]
    with Image.open(tmp_path / "img.png") as a, Image.open(res["overlay"]) as b:
        assert np.array_equal(np.asarray(a.convert("RGB")), np.asarray(b))


def test_overlay_palette_and_padding(tmp_path, registry):
    ck = blank_checkpoints(tmp_path, registry)
    write_image(tmp_path / "odd.png", np.full((3, 50, 70), 0.5, np.float32))
    res = infer_overlay(ck, tmp_path / "odd.png", tmp_path / "o")
    meta = json.loads(res["meta"].read_text())
    assert meta["original_size"] == [50, 70] and meta["padded_size"] == [64, 96]
    assert meta["padding"] == {"bottom": 14, "right": 26}
    with Image.open(res["mask"]) as m:
        assert m.size == (70, 50) and m.mode == "P"
        pal = m.getpalette()
    for c in registry.to_list():
        assert pal[3 * c["id"]:3 * c["id"] + 3] == list(c["color"])


def test_overlay_unreadable_image(tmp_path, registry):
    ck = blank_checkpoints(tmp_path, registry)
    (tmp_path / "x.png").write_bytes(b"garbage")
    with pytest.raises(ValueError, match="cannot read"):
        infer_overlay(ck, tmp_path / "x.png", tmp_path / "o")


# ---- CLI

def test_cli_synth_train_eval(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n-train", "4", "--n-val", "2", "--size", "32"]) == 0
    assert (tmp_path / "d/classes.json").exists()
    capsys.readouterr()
    rc = main(["train", "--dataset-root", str(tmp_path / "d"), "--output-dir", str(tmp_path / "r"),
               "--head", "tool", "--epochs", "1", "--set", "batch_size=2"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["steps"] == 2 and out["last"].endswith("last.ckpt")
    rc = main(["eval", "--data", str(tmp_path / "d"), "--mode", "tool", "--tool", out["last"],
               "--out", str(tmp_path / "rep")])
    assert rc == 0 and (tmp_path / "rep.csv").exists()


def test_cli_error_json(tmp_path, capsys):
    rc = main(["train", "--dataset-root", str(tmp_path / "missing"), "--output-dir", str(tmp_path)])
    err = json.loads(capsys.readouterr().err)
    assert rc == 1 and set(err) == {"error", "message"}
    rc = main(["train", "--set", "lr_maxx=1"])
    assert rc == 1 and json.loads(capsys.readouterr().err)["error"] == "ConfigError"


# ---- ablation harness

def test_ablation_schema_and_probe(small_dataset, tmp_path):
    c = cfg(small_dataset, tmp_path, max_steps=2)
    rep = ablate_losses(c, seeds=(0,), out_dir=tmp_path)
    assert [r["loss"] for r in rep["rows"]] == ["tversky", "cross_entropy", "combined"]
    assert [r["lambda_combined"] for r in rep["rows"]] == [1.0, 0.0, 0.7]
    with (tmp_path / "ablation.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Loss Function", "mIoU", "Dice"] and len(rows) == 4
    # the lambda=1 run really optimised the Tversky-only objective
    run = tmp_path / "tversky" / "seed0"
    logits = torch.from_numpy(np.load(run / "probe_logits.npy"))
    targets = torch.from_numpy(np.load(run / "probe_targets.npy"))
    recomputed = combined_loss(logits.softmax(1), targets, LossConfig(lambda_combined=1.0))
    assert float(recomputed) == pytest.approx(json.loads((run / "probe.json").read_text())["loss"], rel=1e-6)
    assert read_header(run / "last.ckpt")[0]["config"]["loss"]["lambda_combined"] == 1.0


def test_synth_fixture_is_seeded(small_dataset, tmp_path):
    again = synth_generate(tmp_path, seed=3, n_train=16, n_val=8, size=64)
    assert (again / "images/val/val_00007.png").read_bytes() == \
        (small_dataset / "images/val/val_00007.png").read_bytes()


@pytest.mark.slow
def test_fusion_benefit_over_seeds(tmp_path):
    """Fused mIoU beats either head alone (scored on global ids) on >= 4 of 5 seeds."""
    root = synth_generate(tmp_path / "d", seed=7, n_train=200, n_val=50, size=64)
    wins = []
    for seed in range(5):
        ck = {h: train(cfg(root, tmp_path / f"s{seed}" / h, head=h, epochs=4, seed=seed)).last_checkpoint
              for h in ("anatomy", "tool")}
        fused = evaluate(ck, root, "val", "fused")["miou"]
        single = max(evaluate(ck, root, "val", h, label_space="global")["miou"] for h in ("anatomy", "tool"))
        wins.append(fused >= single)
    assert sum(wins) >= 4, wins
