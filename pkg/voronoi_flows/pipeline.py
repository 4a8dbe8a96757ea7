"""配置 -> 数据集 / 模型 的装配，以及各任务共用的训练、评估、采样入口"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from . import checkpoint as ckpt
from .config import SYNTHETIC_CONTINUOUS, config_from_dict
from .data import (
    discrete_entropy,
    encode_with_vocab,
    gaussian_mixture_logpdf,
    load_csv_continuous,
    load_csv_discrete,
    marginal_histogram_nll,
    split,
    synth_categorical,
    synth_continuous_2d,
    synth_quantized_2d,
)
from .errors import ConfigInvalid, NotTwoDimensional, ShapeMismatch
from .models.autodiff import ParameterSet, Tape
from .models.dequant import DequantModel, JointDensity, nll_bound, sample_codes, train
from .models.flows import FlowDensity, FlowStack, train_flow
from .models.mixture import MixtureModel, mixture_logprob, mixture_sample, train_mixture
from .models.optimizer import TrainingReport

logger = logging.getLogger("voronoi-flows.pipeline")

GAUSSIAN_SHAPES = ("eight_gaussians", "two_gaussians")


@dataclass
class Dataset:
    """train / val / test 三个切片；离散任务是编码矩阵，连续任务是实数矩阵"""

    kind: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    vocab: Optional[List[List[str]]] = None
    columns: Optional[List[str]] = None
    cardinalities: Optional[List[int]] = None
    oracles: Dict[str, float] = field(default_factory=dict)

    @property
    def dim(self):
        return self.train.shape[1]

    def part(self, name):
        if name not in ("train", "val", "test"):
            raise ValueError(f"未知的数据切片: {name}")
        return getattr(self, name)


def load_dataset(config):
    data_cfg = config.data
    if config.task == "dequant":
        if data_cfg.source == "csv":
            table = load_csv_discrete(data_cfg.path)
        elif data_cfg.generator == "two_values":
            table = synth_categorical(data_cfg.probs, data_cfg.num_samples, data_cfg.seed)
        else:
            table = synth_quantized_2d(data_cfg.generator, data_cfg.bins, data_cfg.num_samples, data_cfg.seed)
        parts = split(table, data_cfg.ratios, data_cfg.seed)
        dataset = Dataset("discrete", table.codes[parts.train], table.codes[parts.val], table.codes[parts.test],
                          vocab=table.vocab, columns=table.columns, cardinalities=table.cardinalities)
        dataset.oracles["marginal_histogram_nll"] = marginal_histogram_nll(
            dataset.train, dataset.test, table.cardinalities)
        if data_cfg.source == "synthetic" and data_cfg.generator == "two_values":
            dataset.oracles["entropy"] = discrete_entropy(data_cfg.probs)
    else:
        if data_cfg.source == "csv":
            values = load_csv_continuous(data_cfg.path)
        elif data_cfg.generator in SYNTHETIC_CONTINUOUS:
            values = synth_continuous_2d(data_cfg.generator, data_cfg.num_samples, data_cfg.seed)
        else:
            raise ConfigInvalid(f"{config.task} 任务需要连续数据, 生成器 {data_cfg.generator} 只产生离散数据")
        parts = split(len(values), data_cfg.ratios, data_cfg.seed)
        dataset = Dataset("continuous", values[parts.train], values[parts.val], values[parts.test])
        if data_cfg.source == "synthetic" and data_cfg.generator in GAUSSIAN_SHAPES:
            dataset.oracles["generator_nll"] = -float(np.mean(gaussian_mixture_logpdf(data_cfg.generator,
                                                                                      dataset.test)))
    logger.info(f"数据集: train/val/test = {len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)}")
    return dataset


@dataclass
class Models:
    """一个任务的全部模型，共享同一个 ParameterSet"""

    task: str
    config: object
    params: ParameterSet
    dequant: Optional[DequantModel] = None
    density: Optional[JointDensity] = None
    mixture: Optional[MixtureModel] = None
    flow: Optional[FlowDensity] = None
    vocab: Optional[List[List[str]]] = None
    columns: Optional[List[str]] = None

    @property
    def dim(self):
        if self.task == "dequant":
            return self.dequant.total_dim
        if self.task == "mixture":
            return self.mixture.dim
        return self.flow.dim


def _assemble(config, params, dim=None, cardinalities=None, rng=None, train_x=None):
    models = Models(config.task, config, params)
    if config.task == "dequant":
        models.dequant = DequantModel.build(params, cardinalities, config, rng)
        models.density = JointDensity.build(params, models.dequant.total_dim, config, rng)
    elif config.task == "mixture":
        if rng is None:
            models.mixture = MixtureModel.from_config(params, dim, config)
        else:
            models.mixture = MixtureModel.build(params, train_x, config, rng)
    else:
        stack = FlowStack.from_config("flow", dim, config.network, config.density.num_blocks,
                                      config.density.base_std, tail_scale=config.density.tail_scale)
        if rng is not None:
            stack.init_params(params, rng)
        models.flow = FlowDensity(stack, params)
    return models


def build_models(config, dataset, rng):
    params = ParameterSet()
    models = _assemble(config, params, dim=dataset.dim, cardinalities=dataset.cardinalities,
                       rng=rng, train_x=dataset.train)
    models.vocab, models.columns = dataset.vocab, dataset.columns
    logger.info(f"模型参数: {len(params)} 个张量, {params.num_values()} 个数")
    return models


def train_models(models, dataset, rng):
    config = models.config
    margin = config.tessellation.projection_margin
    if models.task == "dequant":
        return train(models.dequant, models.density, dataset.train, dataset.val, config.optimizer, rng,
                     num_samples=config.dequant.train_samples, margin=margin, val_seed=config.optimizer.seed)
    if models.task == "mixture":
        return train_mixture(models.mixture, dataset.train, dataset.val, config.optimizer, rng, margin=margin)
    return train_flow(models.flow, dataset.train, dataset.val, config.optimizer, rng)


def per_example_nll(models, values, num_samples, rng):
    """离散任务: 负 ELBO（S 个样本）；连续任务: 精确的 -log p(x)"""
    if models.task == "dequant":
        return nll_bound(models.dequant, models.density, values, num_samples, rng)
    if models.task == "mixture":
        return -mixture_logprob(models.mixture, values)
    return -models.flow.logprob_values(values)


def draw_samples(models, n, rng):
    """返回 DataFrame: 离散任务按词表解码，连续任务为坐标 x0, x1, ..."""
    if models.task == "dequant":
        codes = sample_codes(models.dequant, models.density, n, rng)
        return pd.DataFrame({
            name: np.asarray(models.vocab[v], dtype=object)[codes[:, v]]
            for v, name in enumerate(models.columns)
        }, columns=models.columns)
    if models.task == "mixture":
        values = mixture_sample(models.mixture, n, rng)
    else:
        values = models.flow.sample(n, rng)
    return pd.DataFrame(values, columns=[f"x{d}" for d in range(values.shape[1])])


def encode_external(models, path):
    if models.task == "dequant":
        return encode_with_vocab(path, models.vocab, models.columns).codes
    values = load_csv_continuous(path)
    if values.shape[1] != models.dim:
        raise ShapeMismatch(f"{path} 有 {values.shape[1]} 列, 模型维度为 {models.dim}")
    return values


# ============= 二维网格 =============

def require_two_dimensional(models):
    if models.dim != 2:
        raise NotTwoDimensional(f"模型维度为 {models.dim}, 只能对二维模型画密度图")


def default_bounds(models):
    """(xmin, xmax, ymin, ymax)；有镶嵌时取盒约束"""
    require_two_dimensional(models)
    if models.task == "dequant":
        boxes = [models.dequant.tessellation(v) for v in range(models.dequant.num_variables)]
        lo = np.concatenate([t.box_lo for t in boxes])
        hi = np.concatenate([t.box_hi for t in boxes])
    elif models.task == "mixture" and not models.mixture.pre_flow.blocks:
        tess = models.mixture.tessellation()
        lo, hi = tess.box_lo, tess.box_hi
    else:
        lo, hi = np.full(2, -4.0), np.full(2, 4.0)
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def log_density(models, points):
    points = np.asarray(points, dtype=np.float64)
    if models.task == "dequant":
        tape = Tape(models.params, record=False)
        return models.density.log_prob(tape, points).value
    if models.task == "mixture":
        return mixture_logprob(models.mixture, points)
    return models.flow.logprob_values(points)


def cell_labels(models, points):
    """每个点所在胞腔的编号；没有镶嵌的模型全部为 0"""
    points = np.asarray(points, dtype=np.float64)
    if models.task == "dequant":
        codes = models.dequant.quantize_values(points)
        return np.ravel_multi_index(tuple(codes.T), tuple(models.dequant.num_cells))
    if models.task == "mixture":
        tape = Tape(models.params, record=False)
        latent, _ = models.mixture.pre_flow.inverse(tape, points)
        return models.mixture.tessellation().locate_batch(latent.value)
    return np.zeros(len(points), dtype=np.int64)


# ============= 检查点 =============

def to_checkpoint(models, report=None, dataset=None):
    extra = {"dim": int(models.dim)}
    if dataset is not None and dataset.oracles:
        extra["oracles"] = dict(dataset.oracles)
    return ckpt.Checkpoint(
        task=models.task,
        config=models.config.model_dump(mode="json"),
        parameters=ckpt.parameters_to_records(models.params),
        vocab=models.vocab,
        columns=models.columns,
        cardinalities=models.dequant.cardinalities if models.dequant is not None else None,
        history=report.to_dict() if report is not None else {},
        extra=extra,
    )


def restore_models(checkpoint):
    """检查点 -> (Config, Models, TrainingReport)"""
    config = config_from_dict(checkpoint.config)
    params = ckpt.records_to_parameters(checkpoint.parameters)
    models = _assemble(config, params, dim=checkpoint.extra.get("dim"), cardinalities=checkpoint.cardinalities)
    models.vocab, models.columns = checkpoint.vocab, checkpoint.columns
    return config, models, TrainingReport.from_dict(checkpoint.history)


def density_grid(models, bounds, size):
    """在 size×size 网格的格心上计算密度与胞腔编号

    返回:
        (density, labels)，两者都是 size×size，行对应 y，列对应 x
    """
    require_two_dimensional(models)
    xmin, xmax, ymin, ymax = bounds
    xs = xmin + (np.arange(size) + 0.5) * (xmax - xmin) / size
    ys = ymin + (np.arange(size) + 0.5) * (ymax - ymin) / size
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    density = np.exp(log_density(models, points)).reshape(size, size)
    labels = cell_labels(models, points).reshape(size, size)
    return density, labels


def boundary_segments(labels, bounds):
    """相邻格子的胞腔编号不同处画一条格边，返回 M×4 的 (x0, y0, x1, y1)"""
    rows, cols = labels.shape
    xmin, xmax, ymin, ymax = bounds
    hx = (xmax - xmin) / cols
    hy = (ymax - ymin) / rows
    segments = []
    # 左右相邻 -> 竖直的格边
    for i, j in zip(*np.nonzero(labels[:, 1:] != labels[:, :-1])):
        x = xmin + (j + 1) * hx
        segments.append((x, ymin + i * hy, x, ymin + (i + 1) * hy))
    # 上下相邻 -> 水平的格边
    for i, j in zip(*np.nonzero(labels[1:, :] != labels[:-1, :])):
        y = ymin + (i + 1) * hy
        segments.append((xmin + j * hx, y, xmin + (j + 1) * hx, y))
    return np.array(segments, dtype=np.float64).reshape(-1, 4)
