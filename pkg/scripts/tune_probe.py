"""Scratch probe for desk-scale tuning: prints density/coverage/ordering stats per seed."""

import argparse
import time

import numpy as np

from wstal import dataio, generator as gen, selector, student as stu
from wstal.cli import generator_proposals, student_predictions
from wstal.config import PipelineConfig
from wstal.core import iou as interval_iou
from wstal.evaluate import map_suite
from wstal.selector import fp_distribution, iou_scores, max_gt_iou


def run(seed, gen_iters, gen_lr, batch, stu_iters, noise, alpha, students=True, nocv=False):
    cfg = PipelineConfig.from_dict({
        "data": {"noise_sigma": noise},
        "hyperparameters": {"alpha": alpha},
        "generator": {"iterations": gen_iters, "lr": gen_lr, "batch": batch, "embed_dim": 64},
        "student": {"iterations": stu_iters, "lr": 1e-3, "batch": 8, "embed_dim": 64},
    })
    videos, gt = dataio.generate_synth(cfg.synth_config(seed))
    t0 = time.time()
    net, log = gen.train_generator(videos, cfg.gen_config(cfg.data.num_snippets, seed))
    t_gen = time.time() - t0
    pool = generator_proposals(net, videos, cfg, "pseudo")
    gtbv = {}
    for s in gt:
        gtbv.setdefault(s.video_id, []).append(s)
    bv = {}
    for p in pool:
        bv.setdefault(p.video_id, []).append(p)
    h = cfg.hyperparameters

    def coverage(props):
        b = {}
        for p in props:
            b.setdefault(p.video_id, []).append(p)
        return sum(
            1 for s in gt
            if any(interval_iou(p.interval, s.interval) >= 0.5 for p in b.get(s.video_id, []))
        ) / len(gt)

    def prec(ps):
        return sum(1 for p in ps if max_gt_iou(p, gtbv.get(p.video_id, [])) >= 0.1) / max(1, len(ps))

    fps, tps = [], []
    for vid, group in bv.items():
        for p, sc in zip(group, iou_scores(group)):
            (fps if max_gt_iou(p, gtbv.get(vid, [])) < 0.1 else tps).append(sc)
    rows = fp_distribution(pool, gt)
    fp_counts = [r.fp_count for r in rows] or [0]
    unf = selector.filter_proposals(pool, 0.0, 0.0)
    fil = selector.filter_proposals(pool, h.gamma, h.eta)
    print(
        f"seed={seed} n={len(pool)} mil={log[-1]['mil']:.2f} t={t_gen:.0f}s "
        f"FPm={np.mean(fps):.2f} TPm={np.mean(tps):.2f} mode={int(np.argmax(fp_counts))} "
        f"hist={fp_counts[:4]} prec {prec(pool):.2f}->{prec(fil.all_proposals()):.2f} "
        f"cov {coverage(pool):.2f}->{coverage(fil.all_proposals()):.2f}"
    )
    out = {}
    if students:
        def smap(pseudo):
            scfg = cfg.student_config(cfg.data.num_snippets, seed)
            snet, _, _ = stu.train_student(videos, pseudo, scfg)
            preds = student_predictions(snet, videos, scfg.score_thresh, scfg.nms_iou)
            return 100 * map_suite(preds, gt).avg_all

        out["unfiltered"] = smap(unf)
        out["filtered"] = smap(fil)
        line = f"   student unfiltered={out['unfiltered']:.2f} filtered={out['filtered']:.2f}"
        if nocv:
            net2, _ = gen.train_generator(videos, cfg.gen_config(cfg.data.num_snippets, seed, lambda2=0.0))
            pool2 = generator_proposals(net2, videos, cfg, "pseudo")
            out["nocv"] = smap(selector.filter_proposals(pool2, h.gamma, h.eta))
            line += f" nocv={out['nocv']:.2f}"
        print(line)
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--gen-iters", type=int, default=600)
    ap.add_argument("--gen-lr", type=float, default=1e-3)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--stu-iters", type=int, default=360)
    ap.add_argument("--noise", type=float, default=0.25)
    ap.add_argument("--alpha", type=float, default=0.95)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--no-students", action="store_true")
    ap.add_argument("--nocv", action="store_true")
    args = ap.parse_args()
    t0 = time.time()
    results = [
        run(s, args.gen_iters, args.gen_lr, args.batch, args.stu_iters, args.noise,
            args.alpha, students=not args.no_students, nocv=args.nocv)
        for s in args.seeds
    ]
    if results and results[0]:
        margin = np.mean([r["filtered"] - r["unfiltered"] for r in results])
        print(f"avg filtered-unfiltered margin: {margin:.2f}")
        if "nocv" in results[0]:
            print(f"avg cv margin: {np.mean([r['filtered'] - r['nocv'] for r in results]):.2f}")
    print(f"total {time.time() - t0:.0f}s")
