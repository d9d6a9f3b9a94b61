"""Reference desk-scale MAE run: 64 synthetic 32x32x6 images, patch 8, ratio 0.75, Lion."""

import argparse
from pathlib import Path

from phenobench.toy_mae import MaeConfig, save_checkpoint, synthetic_images, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/mae_reference"))
    args = ap.parse_args()

    cfg = MaeConfig(seed=args.seed)
    imgs = synthetic_images(64, seed=0, basis_seed=0)
    val = synthetic_images(16, seed=1, basis_seed=0)
    model, curve = train(cfg, imgs, args.steps, val)

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "loss_curve.csv").write_text(curve.to_csv(), encoding="utf-8")
    save_checkpoint(model, args.out / "checkpoint.bin")
    for step, v in zip(curve.steps, curve.validation):
        if step % 100 == 0 or step == curve.steps[-1]:
            print(f"step {step:4d}  validation masked MSE {v:.6g}")
    print(f"final/initial = {curve.validation[-1] / curve.validation[0]:.4f}")


if __name__ == "__main__":
    main()
