"""Command-line entry point: ``glinpaint <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import MaskSpec, RATIO_CLASSES, generate_mask, load_manifest, save_mask


def _onoff(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _classes(v: str) -> list[str]:
    out = [c.strip() for c in v.split(",") if c.strip()]
    bad = [c for c in out if c not in RATIO_CLASSES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown ratio classes {bad}; choose from {list(RATIO_CLASSES)}")
    return out


def cmd_train(a) -> int:
    from .train import Checkpoint, TrainConfig, train

    cfg = TrainConfig.from_json(a.config)
    resume = Checkpoint.load(a.resume) if a.resume else None

    def show(rec):
        if rec["step"] % a.log_every == 0:
            print(f"epoch {rec['epoch']:3d} step {rec['step']:6d} [{rec['phase']}] loss {rec['loss']:.5f}",
                  flush=True)

    res = train(cfg, resume=resume, on_step=show)
    res.checkpoint.save(a.out)
    if a.history:
        Path(a.history).write_text(json.dumps(res.history, indent=1))
    print(f"saved {a.out} after {res.checkpoint.adam.step} steps")
    return 0


def cmd_infer(a) -> int:
    from .train import infer_files

    infer_files(a.ckpt, a.image, a.mask, a.out, T=a.T)
    print(f"wrote {a.out}")
    return 0


def cmd_eval(a) -> int:
    from .train import Checkpoint, checkpoint_predictor, evaluate, metrics_json, metrics_text

    m = load_manifest(a.manifest)
    if not len(m):
        print("empty manifest", file=sys.stderr)
        return 2
    images = [m.load(i)[0] for i in range(len(m))]
    table = evaluate(checkpoint_predictor(Checkpoint.load(a.ckpt)), images, a.classes,
                     seed=a.seed, with_border=a.border)
    print(metrics_text(table))
    if a.json:
        Path(a.json).write_text(metrics_json(table))
    return 0


def cmd_mask_gen(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(a.n):
        m = generate_mask(MaskSpec(a.ratio_class, a.border, seed=a.seed * 1_000_003 + i), a.size, a.size)
        save_mask(m, out / f"mask_{i:05d}.png")
    print(f"wrote {a.n} masks to {out}")
    return 0


def cmd_gradcheck(a) -> int:
    from .checks import report, run_checks

    results = run_checks(a.module)
    print(report(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def cmd_ablate(a) -> int:
    from .experiments import ABLATIONS, ablation, ablation_order

    if a.gle is None and a.reinpaint is None:
        variants = list(ABLATIONS)
    else:
        want = {"gle": True if a.gle is None else a.gle,
                "reinpaint": True if a.reinpaint is None else a.reinpaint}
        variants = [k for k, v in ABLATIONS.items() if v == want]
    res = ablation(epochs=a.epochs, lr=a.lr, T=a.T, seed=a.seed, variants=variants)
    for line in ablation_order(res):
        print("inversion:", line)
    if a.json:
        Path(a.json).write_text(json.dumps({k: {"l1": v["l1"], "final_loss": v["final_loss"]}
                                            for k, v in res.items()}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glinpaint", description="Pyramid-feature iterative image inpainting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="checkpoint.bin")
    t.add_argument("--resume")
    t.add_argument("--history", help="write the per-step log as JSON")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="inpaint one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--mask", required=True, help="grayscale, >=128 marks known pixels")
    i.add_argument("--out", required=True)
    i.add_argument("--T", type=int)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="PSNR / SSIM / L1 per mask ratio class")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--classes", type=_classes, default=["10-20", "30-40", "40-50"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--border", action="store_true")
    e.add_argument("--json")
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("mask-gen", help="write synthetic free-form masks as PNG")
    m.add_argument("--class", dest="ratio_class", required=True, choices=list(RATIO_CLASSES))
    m.add_argument("--n", type=int, default=100)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--size", type=int, default=256)
    m.add_argument("--border", action="store_true")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_mask_gen)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module")
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("ablate", help="train ablation variants on the synthetic set and compare L1")
    b.add_argument("--gle", type=_onoff)
    b.add_argument("--reinpaint", type=_onoff)
    b.add_argument("--epochs", type=int, default=30)
    b.add_argument("--lr", type=float, default=1e-3)
    b.add_argument("--T", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json")
    b.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
