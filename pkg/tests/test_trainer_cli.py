import json

import numpy as np
import pytest

from glinpaint import tensor as T
from glinpaint.cli import main
from glinpaint.data import load_image, load_mask, save_image, save_mask, synthetic_image
from glinpaint.network import InpaintNet, NetConfig
from glinpaint.pconv import MaskPlane
from glinpaint.tensor import NonFiniteError, Tensor4
from glinpaint.train import (AdamState, Checkpoint, Sample, TrainConfig, TrainingAborted, adam_step, batch_for,
                             evaluate, infer, metrics_json, metrics_text, train)

TINY = {"stem_channels": 2, "proj_channels": 2, "recon_channels": [4, 4, 4], "head_channels": [4, 4],
        "n_res_blocks": 1}


def tiny_cfg(**kw):
    base = dict(lr_train=1e-3, lr_finetune=1e-4, batch_size=2, epochs_train=2, epochs_finetune=0, T=3,
                net=dict(TINY), mask_classes=["10-20"])
    base.update(kw)
    return TrainConfig(**base)


def samples(n=3, size=64):
    return [Sample(synthetic_image(i, size)) for i in range(n)]


def param_bytes(params):
    return {k: p.data.tobytes() for k, p in params.items()}


@pytest.fixture(scope="module")
def trained():
    return train(tiny_cfg(), samples())


# ---------------------------------------------------------------- Adam


def test_adam_first_step_magnitude_is_lr():
    p = {"a": Tensor4(np.array([1.0, -2.0, 3.0, 0.5]).reshape(1, 1, 2, 2), requires_grad=True)}
    before = p["a"].data.copy()
    p["a"].grad = np.array([0.3, -7.0, 1e-3, 50.0]).reshape(1, 1, 2, 2)
    adam_step(p, AdamState(), lr=0.01)
    np.testing.assert_allclose(before - p["a"].data, 0.01 * np.sign(p["a"].grad), rtol=1e-4)


def test_adam_zero_grad_and_frozen_and_identical():
    p = {k: Tensor4(np.ones((1, 1, 2, 2)), requires_grad=True) for k in "abc"}
    p["a"].grad = np.zeros((1, 1, 2, 2))
    p["b"].grad = np.full((1, 1, 2, 2), 0.5)
    p["c"].grad = np.full((1, 1, 2, 2), 0.5)
    adam_step(p, AdamState(), 0.1, frozen=["c"])
    assert (p["a"].data == 1).all() and (p["c"].data == 1).all() and (p["b"].data < 1).all()
    q = {k: Tensor4(np.ones((1, 1, 1, 2)), requires_grad=True) for k in "xy"}
    for t in q.values():
        t.grad = np.array([[[[0.2, -0.4]]]])
    adam_step(q, AdamState(), 0.1)
    np.testing.assert_array_equal(q["x"].data, q["y"].data)


def test_adam_rejects_non_finite():
    p = {"a": Tensor4(np.ones((1, 1, 1, 1)), requires_grad=True)}
    p["a"].grad = np.full((1, 1, 1, 1), np.nan)
    state = AdamState()
    with pytest.raises(NonFiniteError):
        adam_step(p, state, 0.1)
    assert state.step == 0 and p["a"].data[0, 0, 0, 0] == 1.0


# ---------------------------------------------------------------- config / checkpoint


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_train=0)
    with pytest.raises(ValueError):
        TrainConfig(T=1)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    cfg = tiny_cfg()
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_checkpoint_round_trip_is_byte_identical(trained, tmp_path):
    ck = trained.checkpoint
    ck.save(tmp_path / "a.bin")
    again = Checkpoint.load(tmp_path / "a.bin")
    again.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert again.epoch == 2 and again.adam.step == 4
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(b"NOPE" + ck.to_bytes()[4:])
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(ck.to_bytes() + b"x")


def test_resume_reproduces_uninterrupted_run(trained):
    cfg = tiny_cfg()
    half = train(cfg, samples(), stop_after_epoch=1)
    rest = train(cfg, samples(), resume=Checkpoint.from_bytes(half.checkpoint.to_bytes()))
    assert param_bytes(rest.net.params) == param_bytes(trained.net.params)
    assert rest.checkpoint.to_bytes() == trained.checkpoint.to_bytes()
    assert [r["loss"] for r in half.history + rest.history] == [r["loss"] for r in trained.history]


def test_finetune_freezes_batchnorm_affine():
    cfg = tiny_cfg(epochs_train=1, epochs_finetune=1)
    phase1 = train(cfg, samples(), stop_after_epoch=1)
    full = train(cfg, samples())
    assert {r["phase"] for r in full.history} == {"train", "finetune"}
    names = full.net.bn_param_names()
    assert names
    for k in names:
        np.testing.assert_array_equal(full.net.params[k].data, phase1.net.params[k].data)
    other = [k for k in full.net.params if k not in names]
    assert any(not np.array_equal(full.net.params[k].data, phase1.net.params[k].data) for k in other)


def test_batches_use_given_masks_and_structure_maps():
    img = synthetic_image(0, 64)
    bits = np.ones((64, 64), np.uint8)
    bits[5:20, 5:20] = 0
    st = Tensor4(np.full((1, 3, 64, 64), 0.25))
    gt, masked, struct, m = batch_for([Sample(img, MaskPlane(bits), st)], [0], tiny_cfg(), epoch=0)
    assert m == MaskPlane(bits)
    np.testing.assert_array_equal(struct.data, st.data)
    assert not masked.data[..., bits == 0].any()
    np.testing.assert_array_equal(gt.data, img.data)


def test_training_errors():
    with pytest.raises(ValueError):
        train(tiny_cfg(), [])
    with pytest.raises(ValueError):
        train(tiny_cfg())


def test_non_finite_loss_aborts_with_last_good_checkpoint():
    calls = {"n": 0}

    class Exploding:
        def __call__(self, out, gt, m):
            calls["n"] += 1
            if calls["n"] > 2:
                raise NonFiniteError("loss is nan")
            d = T.mean_all(T.abs_(T.sub(out, gt)))
            return d, {}

    with pytest.raises(TrainingAborted) as info:
        train(tiny_cfg(), samples(), loss_fn=Exploding())
    assert info.value.checkpoint.epoch == 1


@pytest.mark.slow
def test_single_image_loss_decreases_over_200_steps():
    cfg = tiny_cfg(batch_size=1, epochs_train=200, fixed_masks=True)
    res = train(cfg, samples(1))
    losses = [r["loss"] for r in res.history]
    assert len(losses) == 200
    assert np.mean(losses[-10:]) < losses[0]
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------- inference / evaluation


def test_infer_properties(trained):
    ck = trained.checkpoint
    img = synthetic_image(9, 64)
    full = infer(ck, img, MaskPlane.full(64, 64))
    np.testing.assert_array_equal(full.data, img.data)
    bits = np.ones((64, 64), np.uint8)
    bits[20:40, 10:50] = 0
    a = infer(ck, img, MaskPlane(bits))
    b = infer(ck, img, MaskPlane(bits))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.min() >= 0 and a.data.max() <= 1
    np.testing.assert_array_equal(a.data[..., bits == 1], img.data[..., bits == 1])
    with pytest.raises(ValueError):
        infer(ck, img, MaskPlane(bits), T=6)
    with pytest.raises(ValueError):
        infer(ck, synthetic_image(0, 48), MaskPlane.full(48, 48))


def test_evaluate_oracle_and_copy_baseline():
    images = [synthetic_image(100 + i, 64) for i in range(4)]
    oracle = evaluate(lambda img, m: img, images, ["10-20", "40-50"])
    for row in oracle.values():
        assert row["psnr"] == float("inf") and row["ssim"] == 1.0 and row["l1"] == 0.0
    copy = evaluate(lambda img, m: T.mul_plane(img, m.plane(1)), images, ["10-20", "40-50"])
    assert copy["40-50"]["l1"] > copy["10-20"]["l1"]


def test_metrics_text_and_json_agree():
    images = [synthetic_image(200 + i, 64) for i in range(2)]
    table = evaluate(lambda img, m: T.mul_plane(img, m.plane(1)), images, ["10-20", "20-30"])
    table["oracle"] = {"psnr": float("inf"), "ssim": 1.0, "l1": 0.0, "n": 2}
    doc = json.loads(metrics_json(table))
    rows = {ln.split()[0]: ln.split()[1:] for ln in metrics_text(table).splitlines()[1:]}
    for cls, r in doc.items():
        n, p, s, l1 = rows[cls]
        assert int(n) == r["n"]
        assert p == "inf" if r["psnr"] == "inf" else float(p) == pytest.approx(r["psnr"], abs=1e-6)
        assert float(s) == pytest.approx(r["ssim"], abs=1e-6)
        assert float(l1) == pytest.approx(r["l1"], abs=1e-6)


# ---------------------------------------------------------------- CLI


def test_cli_mask_gen(tmp_path):
    assert main(["mask-gen", "--class", "20-30", "--n", "3", "--size", "64", "--seed", "4",
                 "--out", str(tmp_path / "m")]) == 0
    files = sorted((tmp_path / "m").glob("mask_*.png"))
    assert [f.name for f in files] == ["mask_00000.png", "mask_00001.png", "mask_00002.png"]
    for f in files:
        assert 0.2 < load_mask(f).hole_fraction() <= 0.3


def test_cli_train_infer_eval(tmp_path, capsys):
    root = tmp_path
    for i in range(2):
        save_image(synthetic_image(i, 64), root / f"img{i}.png")
    manifest = {"resolution": 64, "items": [{"image": f"img{i}.png"} for i in range(2)]}
    (root / "set.json").write_text(json.dumps(manifest))
    cfg = tiny_cfg(epochs_train=1, train_manifest=str(root / "set.json")).to_dict()
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "ck.bin"),
                 "--history", str(root / "hist.json"), "--log-every", "1"]) == 0
    assert len(json.loads((root / "hist.json").read_text())) == 1

    bits = np.ones((64, 64), np.uint8)
    bits[10:30, 10:30] = 0
    save_mask(MaskPlane(bits), root / "mask.png")
    assert main(["infer", "--ckpt", str(root / "ck.bin"), "--image", str(root / "img0.png"),
                 "--mask", str(root / "mask.png"), "--out", str(root / "out.png")]) == 0
    out = load_image(root / "out.png")
    src = load_image(root / "img0.png")
    np.testing.assert_array_equal(out.data[..., bits == 1], src.data[..., bits == 1])
    assert main(["infer", "--ckpt", str(root / "ck.bin"), "--image", str(root / "img0.png"),
                 "--mask", str(root / "mask.png"), "--out", str(root / "x.png"), "--T", "5"]) == 2

    capsys.readouterr()
    assert main(["eval", "--ckpt", str(root / "ck.bin"), "--manifest", str(root / "set.json"),
                 "--classes", "10-20", "--json", str(root / "m.json")]) == 0
    assert "10-20" in capsys.readouterr().out
    assert json.loads((root / "m.json").read_text())["10-20"]["n"] == 2


def test_cli_rejects_bad_arguments(capsys):
    with pytest.raises(SystemExit):
        main(["ablate", "--gle", "maybe"])
    with pytest.raises(SystemExit):
        main(["eval", "--ckpt", "x", "--manifest", "y", "--classes", "5-15"])
    assert main(["train", "--config", "/nonexistent/cfg.json"]) == 2


def test_cli_gradcheck_single_module(capsys):
    assert main(["gradcheck", "--module", "losses"]) == 0
    assert "passed" in capsys.readouterr().out
