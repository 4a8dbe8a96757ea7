import logging
import os
from typing import Literal, Optional, Tuple

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from threadpoolctl import threadpool_limits

from .errors import ConfigInvalid

logger = logging.getLogger("voronoi-flows.config")

# Voronoi flows 默认配置

# 数据集
DATA_CONFIG = {
    # synthetic: 内置生成器; csv: 用户提供的表格
    "source": "synthetic",
    "path": None,
    # checkerboard / two_moons / rings / eight_gaussians / two_gaussians / two_values
    "generator": "checkerboard",
    # 离散化的分箱数（quantized 2D 实验使用 91）
    "bins": 8,
    "num_samples": 20000,
    # two_values 生成器的取值概率
    "probs": (0.9, 0.1),
    # 训练 / 验证 / 测试比例
    "ratios": (0.8, 0.1, 0.1),
    "seed": 0,
}

# Voronoi 镶嵌
TESSELLATION_CONFIG = {
    # 锚点初始化 N(0, init_std^2)，限制在 [-init_bound, init_bound]^D
    "init_std": 0.5,
    "init_bound": 4.0,
    # 压缩尺度 γ 的初值
    "init_scale": 1.0,
    # 盒约束是否参与训练
    "train_box": True,
    # 每步更新后锚点离盒边界的最小距离
    "projection_margin": 1e-3,
}

# 耦合网络
NETWORK_CONFIG = {
    "hidden_layers": 2,
    "hidden_units": 128,
    # swish / gelu / tanh / softplus
    "activation": "swish",
    # log-scale 的平滑截断 c_s
    "log_scale_clamp": 5.0,
    # 条件嵌入维度
    "cond_embed_dim": 8,
}

# Voronoi 去量化
DEQUANT_CONFIG = {
    # 每个离散变量的嵌入维度
    "embed_dim": 4,
    # 条件去量化流的耦合块数
    "num_blocks": 4,
    "base_std": 1.0,
    # 所有变量共用一个条件流
    "shared_flow": True,
    # cardinality: K_v = |Y_v|; max: 每个变量都用 max_v |Y_v| 个胞腔
    "cells": "cardinality",
    # 训练时每个样本的去量化采样数
    "train_samples": 1,
    # 条件流数据一侧 SinhTail 的尺度, None 表示不加
    "tail_scale": None,
}

# 联合密度模型 p(x)（task = flow 时也用这一节）
DENSITY_CONFIG = {
    "num_blocks": 4,
    "base_std": 1.0,
    "tail_scale": None,
}

# Voronoi 混合模型
MIXTURE_CONFIG = {
    "num_components": 8,
    # 镶嵌之前的流层数
    "pre_flow_blocks": 0,
    "comp_flow_blocks": 4,
    # 分量基分布的标准差
    "comp_base_std": 0.2,
    # 分量流的 SinhTail 尺度, None 表示不加
    "comp_tail_scale": None,
    # 盒约束 = 数据范围 + margin
    "box_margin": 1.0,
    "train_box": False,
    # k-means 初始化使用的子样本大小
    "init_subsample": 2000,
    # 盒外点在训练中的惩罚: -(offset + slope * 距离)
    "outside_offset": 50.0,
    "outside_slope": 10.0,
}

# 优化器
OPTIMIZER_CONFIG = {
    # 显式学习率，None 时使用 lr_preset
    "lr": None,
    "lr_preset": "default",
    "batch_size": 256,
    "epochs": 50,
    "seed": 0,
    # 早停的耐心轮数
    "patience": 10,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    # 梯度全局范数上限, None 表示不裁剪
    "clip_norm": None,
    # 余弦退火: 最后一轮的学习率 = lr * lr_final_ratio, 1.0 为恒定学习率
    "lr_final_ratio": 1.0,
}

# 学习率预设（对应公开的超参数扫描）
LR_PRESETS = {
    "default": 1e-3,
    "uci-1e-3": 1e-3,
    "uci-5e-4": 5e-4,
    "uci-1e-4": 1e-4,
    "mixture-1e-3": 1e-3,
    "mixture-5e-3": 5e-3,
}

# 输出
OUTPUT_CONFIG = {
    "dir": "outputs",
    # 评估时 ELBO 的采样数
    "eval_samples": 16,
}

SYNTHETIC_DISCRETE = ("checkerboard", "two_moons", "rings", "two_values")
SYNTHETIC_CONTINUOUS = ("checkerboard", "two_moons", "rings", "eight_gaussians", "two_gaussians")


def _tuple_of_floats(value):
    if isinstance(value, str):
        return tuple(float(part) for part in value.split(",") if part.strip())
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    source: Literal["synthetic", "csv"] = DATA_CONFIG["source"]
    path: Optional[str] = DATA_CONFIG["path"]
    generator: str = DATA_CONFIG["generator"]
    bins: int = Field(DATA_CONFIG["bins"], ge=2)
    num_samples: int = Field(DATA_CONFIG["num_samples"], ge=10)
    probs: Tuple[float, ...] = DATA_CONFIG["probs"]
    ratios: Tuple[float, float, float] = DATA_CONFIG["ratios"]
    seed: int = DATA_CONFIG["seed"]

    @field_validator("probs", "ratios", mode="before")
    @classmethod
    def split_floats(cls, value):
        return _tuple_of_floats(value)

    @model_validator(mode="after")
    def check_source(self):
        if self.source == "csv" and not self.path:
            raise ValueError("data.source = csv 时必须提供 data.path")
        if self.source == "synthetic" and self.generator not in set(SYNTHETIC_DISCRETE + SYNTHETIC_CONTINUOUS):
            raise ValueError(f"未知的生成器: {self.generator}")
        return self


class TessellationSection(_Section):
    init_std: float = Field(TESSELLATION_CONFIG["init_std"], gt=0)
    init_bound: float = Field(TESSELLATION_CONFIG["init_bound"], gt=0)
    init_scale: float = Field(TESSELLATION_CONFIG["init_scale"], gt=0)
    train_box: bool = TESSELLATION_CONFIG["train_box"]
    projection_margin: float = Field(TESSELLATION_CONFIG["projection_margin"], gt=0)


class NetworkSection(_Section):
    hidden_layers: int = Field(NETWORK_CONFIG["hidden_layers"], ge=1)
    hidden_units: int = Field(NETWORK_CONFIG["hidden_units"], ge=1)
    activation: Literal["swish", "gelu", "tanh", "softplus"] = NETWORK_CONFIG["activation"]
    log_scale_clamp: float = Field(NETWORK_CONFIG["log_scale_clamp"], gt=0)
    cond_embed_dim: int = Field(NETWORK_CONFIG["cond_embed_dim"], ge=1)


class DequantSection(_Section):
    embed_dim: int = Field(DEQUANT_CONFIG["embed_dim"], ge=1)
    num_blocks: int = Field(DEQUANT_CONFIG["num_blocks"], ge=0)
    base_std: float = Field(DEQUANT_CONFIG["base_std"], gt=0)
    shared_flow: bool = DEQUANT_CONFIG["shared_flow"]
    cells: Literal["cardinality", "max"] = DEQUANT_CONFIG["cells"]
    train_samples: int = Field(DEQUANT_CONFIG["train_samples"], ge=1)
    tail_scale: Optional[float] = Field(DEQUANT_CONFIG["tail_scale"], gt=0)


class DensitySection(_Section):
    num_blocks: int = Field(DENSITY_CONFIG["num_blocks"], ge=0)
    base_std: float = Field(DENSITY_CONFIG["base_std"], gt=0)
    tail_scale: Optional[float] = Field(DENSITY_CONFIG["tail_scale"], gt=0)


class MixtureSection(_Section):
    num_components: int = Field(MIXTURE_CONFIG["num_components"], ge=1)
    pre_flow_blocks: int = Field(MIXTURE_CONFIG["pre_flow_blocks"], ge=0)
    comp_flow_blocks: int = Field(MIXTURE_CONFIG["comp_flow_blocks"], ge=0)
    comp_base_std: float = Field(MIXTURE_CONFIG["comp_base_std"], gt=0)
    comp_tail_scale: Optional[float] = Field(MIXTURE_CONFIG["comp_tail_scale"], gt=0)
    box_margin: float = Field(MIXTURE_CONFIG["box_margin"], gt=0)
    train_box: bool = MIXTURE_CONFIG["train_box"]
    init_subsample: int = Field(MIXTURE_CONFIG["init_subsample"], ge=1)
    outside_offset: float = Field(MIXTURE_CONFIG["outside_offset"], ge=0)
    outside_slope: float = Field(MIXTURE_CONFIG["outside_slope"], ge=0)


class OptimizerSection(_Section):
    lr: Optional[float] = Field(OPTIMIZER_CONFIG["lr"], gt=0)
    lr_preset: Literal[tuple(LR_PRESETS)] = OPTIMIZER_CONFIG["lr_preset"]
    batch_size: int = Field(OPTIMIZER_CONFIG["batch_size"], ge=1)
    epochs: int = Field(OPTIMIZER_CONFIG["epochs"], ge=1)
    seed: int = OPTIMIZER_CONFIG["seed"]
    patience: int = Field(OPTIMIZER_CONFIG["patience"], ge=1)
    beta1: float = Field(OPTIMIZER_CONFIG["beta1"], ge=0, lt=1)
    beta2: float = Field(OPTIMIZER_CONFIG["beta2"], ge=0, lt=1)
    eps: float = Field(OPTIMIZER_CONFIG["eps"], gt=0)
    clip_norm: Optional[float] = Field(OPTIMIZER_CONFIG["clip_norm"], gt=0)
    lr_final_ratio: float = Field(OPTIMIZER_CONFIG["lr_final_ratio"], gt=0, le=1)

    @property
    def learning_rate(self):
        return self.lr if self.lr is not None else LR_PRESETS[self.lr_preset]


class OutputSection(_Section):
    dir: str = OUTPUT_CONFIG["dir"]
    eval_samples: int = Field(OUTPUT_CONFIG["eval_samples"], ge=1)


class Config(_Section):
    """完整的运行配置；所有字段在任何计算开始之前校验"""

    task: Literal["dequant", "mixture", "flow"] = "dequant"
    data: DataSection = Field(default_factory=DataSection)
    tessellation: TessellationSection = Field(default_factory=TessellationSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    dequant: DequantSection = Field(default_factory=DequantSection)
    density: DensitySection = Field(default_factory=DensitySection)
    mixture: MixtureSection = Field(default_factory=MixtureSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def check_task_data(self):
        if self.task == "dequant" and self.data.source == "synthetic" \
                and self.data.generator not in SYNTHETIC_DISCRETE:
            raise ValueError(f"去量化任务需要离散数据, 生成器 {self.data.generator} 只产生连续数据")
        return self


def _describe(error):
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def config_from_dict(raw):
    try:
        return Config.model_validate(raw)
    except ValidationError as e:
        raise ConfigInvalid(f"配置无效: {_describe(e)}") from e


def fold_sections(flat):
    """把 section.key = value 形式的扁平键值折叠成嵌套字典"""
    nested = {}
    for key, value in flat.items():
        if value is None:
            raise ConfigInvalid(f"配置项 {key} 缺少取值")
        if "." in key:
            section, name = key.split(".", 1)
            entry = nested.setdefault(section, {})
            if not isinstance(entry, dict):
                raise ConfigInvalid(f"{section} 既是值又是分节")
            entry[name] = value
        else:
            nested[key] = value
    return nested


def load_config(path):
    """读取扁平 key = value 配置文件

    参数:
        path: 配置文件路径

    返回:
        Config
    """
    if not os.path.isfile(path):
        raise ConfigInvalid(f"配置文件不存在: {path}")
    flat = dotenv_values(path, interpolate=False)
    for key in flat:
        if key.count(".") > 1:
            raise ConfigInvalid(f"配置键最多一层分节: {key}")
    config = config_from_dict(fold_sections(flat))
    logger.info(f"已加载配置 {path} (task={config.task})")
    return config


def config_to_flat(config):
    """Config -> 扁平键值（写入检查点和 summary）"""
    flat = {}
    for key, value in config.model_dump(mode="json").items():
        if isinstance(value, dict):
            for name, item in value.items():
                flat[f"{key}.{name}"] = item
        else:
            flat[key] = value
    return flat


def configure_threads():
    """按 VF_THREADS（环境变量或 .env）限制 BLAS/OpenMP 线程数"""
    load_dotenv()
    threads = os.getenv("VF_THREADS")
    if not threads:
        return None
    try:
        count = int(threads)
    except ValueError as e:
        raise ConfigInvalid(f"VF_THREADS 必须是正整数: {threads}") from e
    if count < 1:
        raise ConfigInvalid(f"VF_THREADS 必须是正整数: {threads}")
    logger.info(f"线程数限制为 {count}")
    return threadpool_limits(limits=count)
