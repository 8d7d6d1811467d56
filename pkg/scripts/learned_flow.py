"""Joint training with the learned flow network: endpoint error before and after.

Usage: python scripts/learned_flow.py [--seed 0] [--epochs 20] [--clips 60] [--phase-one-fraction 0.8] [--out results/learned_flow]
       [--pretrained results/desk/seed0]

Pretrains reference and update single-frame nets, attaches a zero-initialised
flow network, trains jointly with learned flow, and reports the mean
endpoint error against ground-truth flow on held-out clips plus mIoU at n=5.
"""
import argparse
import json
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from fusionseg.bench import endpoint_error, evaluate  # noqa: E402
from fusionseg.experiment import DeskConfig, assemble, datasets, pretrained  # noqa: E402
from fusionseg.nets import build_models  # noqa: E402
from fusionseg.pipeline import PipelineConfig  # noqa: E402
from fusionseg.train import TrainConfig, train  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--clips", type=int, default=60)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--phase-one-fraction", type=float, default=0.8)
    ap.add_argument("--out", default="results/learned_flow")
    ap.add_argument("--pretrained", help="directory with cached single_T*.ckpt (default: --out)")
    a = ap.parse_args()

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = DeskConfig(train_clips=a.clips, val_clips=10, eval_clips=20,
                     train=TrainConfig(epochs=a.epochs, lr=a.lr, flow_source="learned",
                                       phase_one_fraction=a.phase_one_fraction))
    trn, val, ev = datasets(cfg, a.seed)
    cache = Path(a.pretrained) if a.pretrained else out
    ref = pretrained(cfg, cfg.net.reference_depth, a.seed, trn, cache)
    upd = pretrained(cfg, cfg.net.update_depth, a.seed, trn, cache)
    models = assemble(cfg.net, ref, upd)
    models.flow = build_models(cfg.net, seed=a.seed, learned_flow=True).flow
    pipe = PipelineConfig(5, "accel", "learned")

    before = {"epe": endpoint_error(models.flow, ev), "miou": evaluate(models, ev, pipe).miou}
    print(f"before: EPE {before['epe']:.4f}  mIoU@n5 {100 * before['miou']:.2f}", flush=True)
    # the best-by-validation epoch may fall in phase one, before the flow net trains,
    # so the final phase-two state is captured as well
    epe_log, final = [], {}

    def on_epoch(epoch, m):
        epe_log.append(endpoint_error(m.flow, ev))
        final.update(m.state_dict())
        print(f"epoch {epoch}: EPE {epe_log[-1]:.4f}", flush=True)

    res = train(models, trn, replace(cfg.train, seed=a.seed), val_clips=val, on_epoch=on_epoch)
    best = {"epoch": res.best_epoch, "epe": endpoint_error(models.flow, ev),
            "miou": evaluate(models, ev, pipe).miou}
    models.load_state_dict(final)
    last = {"epe": endpoint_error(models.flow, ev), "miou": evaluate(models, ev, pipe).miou}
    print(f"best-by-val (epoch {best['epoch']}): EPE {best['epe']:.4f}  mIoU@n5 {100 * best['miou']:.2f}")
    print(f"final:  EPE {last['epe']:.4f}  mIoU@n5 {100 * last['miou']:.2f}")
    models.save(out / "accel_learned.ckpt")
    (out / "train_log.csv").write_text(res.log_csv())
    (out / "summary.json").write_text(json.dumps(
        {"before": before, "best": best, "final": last, "epe_per_epoch": epe_log, "args": vars(a)}, indent=1))


if __name__ == "__main__":
    main()
