"""命令行入口: train / eval / sample / plot-density / check

退出码: 0 成功，1 自检失败，2 输入或配置无效，3 训练发散。
"""

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import checkpoint as ckpt
from . import pipeline
from .checks import InvariantSuite
from .config import config_to_flat, configure_threads, load_config
from .errors import DivergedLoss, OutputLocked, VoronoiFlowError
from .plotting import density_svg, plot_loss

logger = logging.getLogger("voronoi-flows")

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3

LOCK_NAME = ".lock"
CHECKPOINT_NAME = "checkpoint.json"
METRICS_NAME = "metrics.csv"
SUMMARY_NAME = "summary.json"
EVAL_REPORT_NAME = "eval_report.json"
SAMPLES_NAME = "samples.csv"
GRID_NAME = "density_grid.csv"
BOUNDARIES_NAME = "boundaries.csv"
SVG_NAME = "density.svg"


@contextlib.contextmanager
def output_lock(out_dir):
    """独占输出目录；已有 .lock 时抛出 OutputLocked"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise OutputLocked(f"输出目录 {out_dir} 正被另一个进程使用 ({path} 已存在)") from e
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield out_dir
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def write_json(data, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def _finite_or_none(value):
    value = float(value)
    return value if np.isfinite(value) else None


def _save_training_artifacts(models, report, dataset, out_dir):
    ckpt.save(pipeline.to_checkpoint(models, report, dataset), os.path.join(out_dir, CHECKPOINT_NAME))
    report.to_frame().to_csv(os.path.join(out_dir, METRICS_NAME), index=False, float_format="%.17g")
    if report.history:
        plot_loss(report, out_dir)


def cmd_train(args):
    config = load_config(args.config)
    if args.seed is not None:
        config.optimizer.seed = args.seed
    out_dir = args.out or config.output.dir
    with output_lock(out_dir):
        dataset = pipeline.load_dataset(config)
        rng = np.random.default_rng(config.optimizer.seed)
        models = pipeline.build_models(config, dataset, rng)
        try:
            report = pipeline.train_models(models, dataset, rng)
        except DivergedLoss as e:
            if e.report is not None:
                _save_training_artifacts(models, e.report, dataset, out_dir)
                logger.error(f"训练发散, 已保存第 {e.report.best_epoch} 轮的参数和 {len(e.report.history)} 轮指标")
            raise
        _save_training_artifacts(models, report, dataset, out_dir)

        eval_rng = np.random.default_rng(config.optimizer.seed)
        test_nll = pipeline.per_example_nll(models, dataset.test, config.output.eval_samples, eval_rng)
        summary = {
            "task": config.task,
            "best_epoch": report.best_epoch,
            "best_val_nll": _finite_or_none(report.best_val_nll),
            "final_val_nll": _finite_or_none(report.last_val_nll),
            "stopped_early": report.stopped_early,
            "epochs_run": len(report.history),
            "test_nll": _finite_or_none(np.mean(test_nll)),
            "eval_samples": config.output.eval_samples,
            "oracles": dataset.oracles,
            "config": config_to_flat(config),
        }
        write_json(summary, os.path.join(out_dir, SUMMARY_NAME))
    print(f"✅ 训练完成: 最佳验证 NLL {report.best_val_nll:.4f} (第 {report.best_epoch} 轮), "
          f"测试 NLL {np.mean(test_nll):.4f} nats")
    for name, value in dataset.oracles.items():
        print(f"   参照 {name}: {value:.4f} nats")
    return EXIT_OK


def _load_models(path):
    return pipeline.restore_models(ckpt.load(path))


def _default_out(args):
    return args.out or os.path.dirname(os.path.abspath(args.checkpoint))


def cmd_eval(args):
    config, models, _ = _load_models(args.checkpoint)
    if args.data:
        values = pipeline.encode_external(models, args.data)
    else:
        values = pipeline.load_dataset(config).part(args.split)
    seed = args.seed if args.seed is not None else config.optimizer.seed
    num_samples = args.samples or config.output.eval_samples
    nll = np.asarray(pipeline.per_example_nll(models, values, num_samples, np.random.default_rng(seed)))
    n = len(nll)
    stderr = float(np.std(nll, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    report = {"mean_nll": _finite_or_none(np.mean(nll)), "stderr": _finite_or_none(stderr),
              "n": n, "S": num_samples, "seed": seed}
    out_dir = _default_out(args)
    with output_lock(out_dir):
        write_json(report, os.path.join(out_dir, EVAL_REPORT_NAME))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_sample(args):
    config, models, _ = _load_models(args.checkpoint)
    seed = args.seed if args.seed is not None else config.optimizer.seed
    frame = pipeline.draw_samples(models, args.samples or 1000, np.random.default_rng(seed))
    out_dir = _default_out(args)
    with output_lock(out_dir):
        path = os.path.join(out_dir, SAMPLES_NAME)
        frame.to_csv(path, index=False, float_format="%.17g")
    print(f"✅ 已写出 {len(frame)} 个样本: {path}")
    return EXIT_OK


class BoundsAction(argparse.Action):
    """--bounds XMIN XMAX YMIN YMAX；要求 min < max"""

    def __call__(self, parser, namespace, values, option_string=None):
        xmin, xmax, ymin, ymax = values
        if xmin >= xmax or ymin >= ymax:
            parser.error(f"{option_string} 要求 XMIN < XMAX 且 YMIN < YMAX, 实际 {values}")
        setattr(namespace, self.dest, tuple(values))


def cmd_plot_density(args):
    _, models, _ = _load_models(args.checkpoint)
    pipeline.require_two_dimensional(models)
    bounds = args.bounds or pipeline.default_bounds(models)
    density, labels = pipeline.density_grid(models, bounds, args.grid)
    segments = pipeline.boundary_segments(labels, bounds)
    cell_area = (bounds[1] - bounds[0]) * (bounds[3] - bounds[2]) / args.grid ** 2
    out_dir = _default_out(args)
    with output_lock(out_dir):
        pd.DataFrame(density).to_csv(os.path.join(out_dir, GRID_NAME), header=False, index=False,
                                     float_format="%.17g")
        pd.DataFrame(segments, columns=["x0", "y0", "x1", "y1"]).to_csv(
            os.path.join(out_dir, BOUNDARIES_NAME), index=False, float_format="%.17g")
        density_svg(density, bounds, segments, os.path.join(out_dir, SVG_NAME))
    print(f"✅ 密度网格 {args.grid}×{args.grid}, 网格积分 {np.sum(density) * cell_area:.4f}, "
          f"{len(segments)} 段胞腔边界")
    return EXIT_OK


def cmd_check(args):
    suite = InvariantSuite(seed=args.seed or 0)
    suite.run()
    print(suite.report())
    return EXIT_OK if suite.all_passed else EXIT_CHECKS_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="voronoi-flows", description="Voronoi 半离散归一化流")
    parser.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="按配置训练并保存检查点")
    train.add_argument("--config", required=True, help="key = value 配置文件")
    train.add_argument("--out", help="输出目录 (默认: 配置中的 output.dir)")
    train.add_argument("--seed", type=int, help="覆盖 optimizer.seed")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", help="计算数据集上的平均 NLL (nats)")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", help="外部 CSV (默认: 配置中的数据集)")
    evaluate.add_argument("--split", choices=["train", "val", "test"], default="test")
    evaluate.add_argument("--samples", type=int, help="ELBO 的采样数 S")
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--out", help="输出目录 (默认: 检查点所在目录)")
    evaluate.set_defaults(handler=cmd_eval)

    sample = sub.add_parser("sample", help="从模型采样并写出 CSV")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--samples", type=int, default=1000)
    sample.add_argument("--seed", type=int)
    sample.add_argument("--out")
    sample.set_defaults(handler=cmd_sample)

    plot = sub.add_parser("plot-density", help="二维模型的密度网格与胞腔边界")
    plot.add_argument("--checkpoint", required=True)
    plot.add_argument("--grid", type=int, default=200)
    plot.add_argument("--bounds", nargs=4, type=float, action=BoundsAction,
                      metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    plot.add_argument("--out")
    plot.set_defaults(handler=cmd_plot_density)

    check = sub.add_parser("check", help="运行不变量自检")
    check.add_argument("--seed", type=int, default=0)
    check.set_defaults(handler=cmd_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    if getattr(args, "samples", None) is not None and args.samples < 1:
        logger.error("--samples 必须 >= 1")
        return EXIT_INVALID
    if getattr(args, "grid", None) is not None and args.grid < 2:
        logger.error("--grid 必须 >= 2")
        return EXIT_INVALID
    try:
        with contextlib.ExitStack() as stack:
            limits = configure_threads()
            if limits is not None:
                stack.enter_context(limits)
            return args.handler(args)
    except DivergedLoss as e:
        logger.error(f"训练发散: {e}")
        return EXIT_DIVERGED
    except VoronoiFlowError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
