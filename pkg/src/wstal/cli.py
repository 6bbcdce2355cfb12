"""Stage-by-stage command line:

    synth-gen        build the synthetic oracle dataset
    train-generator  train the proposal generator
    gen-proposals    decode the generator into proposals
    select           density + confidence filtering into pseudo labels
    train-student    supervised student training on pseudo labels
    distill          late EMA-teacher self-distillation round
    infer            decode the student into predictions
    eval             tIoU mAP table (the only training-path command that reads ground truth)
    ablate           cumulative component ladder on the synthetic dataset
    report           aggregate metrics CSVs across runs/seeds

Every command takes --config and --seed and is byte-reproducible given both.
Artifacts carry the config hash and seed; errors are emitted as one JSON
object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from . import diffnum as dn
from . import generator as gen
from . import postprocess as pp
from . import selector
from . import student as stu
from .config import PipelineConfig
from .core import MissingArtifact, PipelineError, PseudoLabelSet, VideoRecord
from .evaluate import MapResult, map_suite
from .generator import GeneratorNet
from .student import EmaState, StudentNet


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found at {p}", path=str(p))
    return p


def _meta(cfg: PipelineConfig, seed: int, stage: str) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": seed, "stage": stage}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header: list[str], rows: list[list], meta: dict) -> None:
    lines = [f"# config_hash={meta['config_hash']} seed={meta['seed']}"]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(str(c) for c in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    rows = []
    with open(path, newline="") as fh:
        for record in csv.reader(line for line in fh if not line.startswith("#")):
            if record:
                rows.append(record)
    if not rows:
        raise MissingArtifact(f"no rows in {path}", path=str(path))
    return rows[0], rows[1:]


def _load_dataset(cfg: PipelineConfig, manifest_path) -> list[VideoRecord]:
    _require_file(manifest_path, "feature manifest")
    return dataio.load_videos(manifest_path, cfg.data.num_classes)


def _min_snippets(videos: list[VideoRecord]) -> int:
    return min(v.num_snippets for v in videos)


def _save_net(path, net, meta: dict) -> None:
    dn.save_checkpoint(path, net.params, {**meta, "arch": net.arch_meta()})


def _load_arch(path, expected_kind: str):
    params, meta = dn.load_checkpoint(_require_file(path, f"{expected_kind} checkpoint"))
    arch = meta.get("arch", {})
    if arch.get("kind") != expected_kind:
        raise MissingArtifact(
            f"checkpoint at {path} has kind {arch.get('kind')!r}, expected {expected_kind!r}",
            path=str(path),
        )
    return params, arch


def _load_generator(path) -> GeneratorNet:
    params, arch = _load_arch(path, "generator")
    return GeneratorNet(params, arch["in_dim"], arch["embed_dim"], arch["num_classes"], arch["kernel_width"])


def _load_student(path) -> StudentNet:
    params, arch = _load_arch(path, "student")
    return StudentNet(params, arch["in_dim"], arch["embed_dim"], arch["num_classes"], arch["kernel_width"])


def generator_proposals(net: GeneratorNet, videos: list[VideoRecord], cfg: PipelineConfig, mode: str):
    """Decode every video; pseudo mode adds the labeled classes and keeps density."""
    post = cfg.postprocess
    nms_threshold = post.nms_pseudo if mode == "pseudo" else post.nms_infer
    out = []
    for video in videos:
        cas = gen.compute_cas(video, net)
        proposals = pp.cas_to_proposals(
            cas.logits.data,
            video.id,
            k=cfg.derived_k(video.num_snippets),
            thresholds=post.thresholds,
            min_len=post.min_len,
            merge_gap=post.merge_gap,
            class_keep=post.class_keep,
            label_classes=video.label_class_ids() if mode == "pseudo" else None,
        )
        out.extend(pp.nms(proposals, nms_threshold))
    return out


def student_predictions(net: StudentNet, videos: list[VideoRecord], score_thresh: float, nms_iou: float):
    preds = []
    for video in videos:
        out = net.forward(video.features)
        preds.extend(stu.decode(out.class_logits.data, out.offsets.data, video.id, score_thresh, nms_iou))
    return preds


def _train_log_csv(path, log: list[dict], meta: dict) -> None:
    if not log:
        _write_csv(path, ["iteration"], [], meta)
        return
    header = list(log[0].keys())
    rows = [[row["iteration"]] + [f"{row[k]:.6f}" for k in header[1:]] for row in log]
    _write_csv(path, header, rows, meta)


def cmd_synth_gen(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    videos, ground_truth = dataio.generate_synth(cfg.synth_config(args.seed))
    dataio.write_dataset(out, videos, ground_truth)
    (out / "run_meta.json").write_text(json.dumps(_meta(cfg, args.seed, "synth-gen"), sort_keys=True) + "\n")
    print(f"wrote {len(videos)} videos, {len(ground_truth)} ground-truth segments to {out}")


def cmd_train_generator(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    videos = _load_dataset(cfg, args.features)
    gen_cfg = cfg.gen_config(_min_snippets(videos), args.seed)
    net, log = gen.train_generator(videos, gen_cfg)
    meta = _meta(cfg, args.seed, "train-generator")
    _save_net(out / "generator.ckpt", net, meta)
    _train_log_csv(out / "generator_train_log.csv", log, meta)
    print(f"trained generator for {gen_cfg.iterations} iterations; final loss {log[-1]['total']:.4f}")


def cmd_gen_proposals(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    videos = _load_dataset(cfg, args.features)
    net = _load_generator(args.checkpoint)
    proposals = generator_proposals(net, videos, cfg, args.mode)
    dataio.write_proposals(out / "proposals.jsonl", proposals, _meta(cfg, args.seed, "gen-proposals"))
    print(f"decoded {len(proposals)} proposals ({args.mode} mode) to {out / 'proposals.jsonl'}")


def cmd_select(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    proposals = dataio.read_proposals(_require_file(args.proposals, "proposals file"))
    h = cfg.hyperparameters
    pseudo = selector.filter_proposals(proposals, h.gamma, h.eta)
    dataio.write_proposals(out / "pseudo_labels.jsonl", pseudo.all_proposals(), _meta(cfg, args.seed, "select"))
    print(f"kept {len(pseudo)} of {len(proposals)} proposals (gamma={h.gamma}, eta={h.eta})")


def cmd_train_student(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    videos = _load_dataset(cfg, args.features)
    pseudo = PseudoLabelSet.from_proposals(
        dataio.read_proposals(_require_file(args.proposals, "pseudo-label file"))
    )
    stu_cfg = cfg.student_config(_min_snippets(videos), args.seed)
    net, ema, log = stu.train_student(videos, pseudo, stu_cfg)
    meta = _meta(cfg, args.seed, "train-student")
    _save_net(out / "student.ckpt", net, meta)
    dn.save_checkpoint(out / "ema.ckpt", ema.as_params(), {**meta, "arch": net.arch_meta()})
    _train_log_csv(out / "student_train_log.csv", log, meta)
    print(f"trained student for {stu_cfg.supervised_iterations} iterations; final loss {log[-1]['total']:.4f}")


def cmd_distill(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    videos = _load_dataset(cfg, args.features)
    net = _load_student(args.checkpoint)
    ema_params, _ = _load_arch(args.ema_checkpoint, "student")
    stu_cfg = cfg.student_config(_min_snippets(videos), args.seed)
    ema = EmaState(shadow=ema_params.as_arrays(), alpha=stu_cfg.ema_alpha)
    net, ema, pseudo, log = stu.distill_round(net, ema, videos, stu_cfg)
    meta = _meta(cfg, args.seed, "distill")
    _save_net(out / "student_distilled.ckpt", net, meta)
    dn.save_checkpoint(out / "ema_distilled.ckpt", ema.as_params(), {**meta, "arch": net.arch_meta()})
    dataio.write_proposals(out / "distill_pseudo_labels.jsonl", pseudo.all_proposals(), meta)
    _train_log_csv(out / "distill_train_log.csv", log, meta)
    print(f"distilled for {stu_cfg.distill_iterations} iterations on {len(pseudo)} teacher labels")


def cmd_infer(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    videos = _load_dataset(cfg, args.features)
    net = _load_student(args.checkpoint)
    preds = student_predictions(net, videos, cfg.student.score_thresh, cfg.student.nms_iou)
    dataio.write_proposals(out / "predictions.jsonl", preds, _meta(cfg, args.seed, "infer"))
    print(f"wrote {len(preds)} predictions to {out / 'predictions.jsonl'}")


def _print_map(label: str, result: MapResult) -> None:
    header, row = result.csv_rows(label)
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    print("  ".join(v.rjust(w) for v, w in zip(row, widths)))


def cmd_eval(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    preds = dataio.read_proposals(_require_file(args.proposals, "predictions file"))
    ground_truth = dataio.read_segments(_require_file(args.gt, "ground-truth file"))
    result = map_suite(preds, ground_truth)
    meta = _meta(cfg, args.seed, "eval")
    header, row = result.csv_rows(args.label)
    _write_csv(out / "metrics.csv", header, [row], meta)
    _print_map(args.label, result)
    if args.fp_hist:
        rows = selector.fp_distribution(preds, ground_truth)
        _write_csv(
            out / "fp_hist.csv",
            ["bin_upper", "fp_count", "tp_count"],
            [[f"{r.bin_upper:.1f}", r.fp_count, r.tp_count] for r in rows],
            meta,
        )


def run_ablation(cfg: PipelineConfig, seed: int) -> list[tuple[str, MapResult]]:
    """Cumulative ladder: each row adds one mechanism on top of the previous row."""
    videos, ground_truth = dataio.generate_synth(cfg.synth_config(seed))
    t_min = _min_snippets(videos)
    h = cfg.hyperparameters
    results: list[tuple[str, MapResult]] = []

    net_base, _ = gen.train_generator(videos, cfg.gen_config(t_min, seed, lambda2=0.0))
    results.append(("base", map_suite(generator_proposals(net_base, videos, cfg, "infer"), ground_truth)))

    net_cv, _ = gen.train_generator(videos, cfg.gen_config(t_min, seed))
    results.append(("+cross_video", map_suite(generator_proposals(net_cv, videos, cfg, "infer"), ground_truth)))

    pool = generator_proposals(net_cv, videos, cfg, "pseudo")

    def student_row(pseudo: PseudoLabelSet, use_mil: bool, distill: bool) -> MapResult:
        stu_cfg = cfg.student_config(t_min, seed, use_mil=use_mil)
        net, ema, _ = stu.train_student(videos, pseudo, stu_cfg)
        if distill:
            net, ema, _, _ = stu.distill_round(net, ema, videos, stu_cfg)
        preds = student_predictions(net, videos, stu_cfg.score_thresh, stu_cfg.nms_iou)
        return map_suite(preds, ground_truth)

    results.append(("+student", student_row(selector.filter_proposals(pool, 0.0, 0.0), False, False)))
    thresholded = selector.filter_proposals(pool, 0.0, h.eta)
    results.append(("+thresholding", student_row(thresholded, False, False)))
    results.append(("+mil_loss", student_row(thresholded, True, False)))
    filtered = selector.filter_proposals(pool, h.gamma, h.eta)
    results.append(("+fp_filter", student_row(filtered, True, False)))
    results.append(("+ema_teacher", student_row(filtered, True, True)))
    return results


def cmd_ablate(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    results = run_ablation(cfg, args.seed)
    header = None
    rows = []
    for name, result in results:
        h, row = result.csv_rows(name)
        header = h
        rows.append(row)
        _print_map(name, result)
    _write_csv(out / "ablation.csv", header, rows, _meta(cfg, args.seed, "ablate"))
    print(f"wrote {len(rows)} ablation rows to {out / 'ablation.csv'}")


def cmd_report(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    out = _out_dir(args)
    header = None
    grouped: dict[str, list[list[float]]] = {}
    order: list[str] = []
    for path in args.inputs:
        file_header, rows = _read_csv(_require_file(path, "metrics csv"))
        if header is None:
            header = file_header
        elif header != file_header:
            raise MissingArtifact(f"column mismatch in {path}: {file_header} vs {header}", path=str(path))
        for row in rows:
            label = row[0]
            if label not in grouped:
                grouped[label] = []
                order.append(label)
            grouped[label].append([float(v) for v in row[1:]])
    out_rows = []
    for label in order:
        mean = np.mean(np.array(grouped[label]), axis=0)
        out_rows.append([label] + [f"{v:.4f}" for v in mean])
    _write_csv(out / "report.csv", header, out_rows, _meta(cfg, args.seed, "report"))
    widths = [max(len(h), *(len(r[i]) for r in out_rows)) for i, h in enumerate(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for row in out_rows:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wstal", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--seed", required=True, type=int)
        p.add_argument("--out", required=True, help="output directory")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(handler=handler)
        return p

    add("synth-gen", cmd_synth_gen)
    add("train-generator", cmd_train_generator, **{"--features": dict(required=True)})
    add("gen-proposals", cmd_gen_proposals, **{
        "--features": dict(required=True),
        "--checkpoint": dict(required=True),
        "--mode": dict(choices=["pseudo", "infer"], default="pseudo"),
    })
    add("select", cmd_select, **{"--proposals": dict(required=True)})
    add("train-student", cmd_train_student, **{
        "--features": dict(required=True),
        "--proposals": dict(required=True, help="pseudo-label JSONL"),
    })
    add("distill", cmd_distill, **{
        "--features": dict(required=True),
        "--checkpoint": dict(required=True, help="student checkpoint"),
        "--ema-checkpoint": dict(required=True, dest="ema_checkpoint"),
    })
    add("infer", cmd_infer, **{
        "--features": dict(required=True),
        "--checkpoint": dict(required=True, help="student checkpoint"),
    })
    add("eval", cmd_eval, **{
        "--proposals": dict(required=True),
        "--gt": dict(required=True),
        "--label": dict(default="run"),
        "--fp-hist": dict(action="store_true", dest="fp_hist",
                          help="also write the density-score FP/TP histogram"),
    })
    add("ablate", cmd_ablate)
    report = add("report", cmd_report)
    report.add_argument("inputs", nargs="+", help="metrics CSV files to aggregate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except PipelineError as exc:
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        if getattr(exc, "path", None):
            payload["error"]["path"] = exc.path
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
