"""数据集读取与合成

离散表格按列首次出现的顺序编码；常数列被丢弃。
合成数据: 量化的二维分布（离散任务）和连续二维玩具分布（混合模型任务）。
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from sklearn.datasets import make_moons
from sklearn.preprocessing import KBinsDiscretizer

from .errors import BadRatios, EmptyFile, RaggedRows, VocabMismatch

logger = logging.getLogger("voronoi-flows.data")

LOG_2PI = float(np.log(2.0 * np.pi))

# 8-Gaussians: 半径 2√2 的圆周上 8 个中心
EIGHT_GAUSSIANS_RADIUS = 2.0 * np.sqrt(2.0)
EIGHT_GAUSSIANS_STD = 0.5 / np.sqrt(2.0)
TWO_GAUSSIANS_CENTER = 2.0
TWO_GAUSSIANS_STD = 0.3


@dataclass
class DiscreteTable:
    codes: np.ndarray
    cardinalities: List[int]
    vocab: List[List[str]]
    columns: List[str]

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)

    @property
    def num_rows(self):
        return self.codes.shape[0]

    @property
    def num_variables(self):
        return self.codes.shape[1]

    def decode(self, codes=None):
        """编码 -> 原始字符串（DataFrame）"""
        codes = self.codes if codes is None else np.asarray(codes, dtype=np.int64)
        return pd.DataFrame({
            name: np.asarray(self.vocab[v], dtype=object)[codes[:, v]]
            for v, name in enumerate(self.columns)
        }, columns=self.columns)

    def subset(self, rows):
        return DiscreteTable(self.codes[rows], list(self.cardinalities), self.vocab, self.columns)


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def sizes(self):
        return len(self.train), len(self.val), len(self.test)


def _read_strings(path):
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8-sig")
    except pd.errors.EmptyDataError as e:
        raise EmptyFile(f"文件为空: {path}") from e
    except pd.errors.ParserError as e:
        raise RaggedRows(f"CSV 行的字段数不一致: {e}") from e
    if frame.empty:
        raise EmptyFile(f"文件没有数据行: {path}")
    if frame.isna().to_numpy().any():
        raise RaggedRows(f"CSV 存在缺少字段的行: {path}")
    return frame


def load_csv_discrete(path, drop_constant=True):
    """读取离散 CSV 表格

    参数:
        path: UTF-8 CSV，第一行为表头
        drop_constant: 丢弃只有一个取值的列

    返回:
        DiscreteTable
    """
    frame = _read_strings(path)
    codes, vocab, columns = [], [], []
    for name in frame.columns:
        column_codes, uniques = pd.factorize(frame[name], sort=False)
        if drop_constant and len(uniques) < 2:
            logger.warning(f"列 {name} 只有一个取值 ({uniques[0]!r}), 已丢弃")
            continue
        codes.append(column_codes)
        vocab.append([str(u) for u in uniques])
        columns.append(str(name))
    if not columns:
        raise EmptyFile(f"{path} 中没有可用的列")
    table = DiscreteTable(np.stack(codes, axis=1), [len(v) for v in vocab], vocab, columns)
    logger.info(f"读取 {path}: {table.num_rows} 行, {table.num_variables} 个变量, 取值数 {table.cardinalities}")
    return table


def encode_with_vocab(path, vocab, columns):
    """用已有的词表（例如检查点中保存的）编码新的 CSV"""
    frame = _read_strings(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise VocabMismatch(f"CSV 缺少列: {missing}")
    codes = np.empty((len(frame), len(columns)), dtype=np.int64)
    for v, name in enumerate(columns):
        lookup = {value: i for i, value in enumerate(vocab[v])}
        values = frame[name].to_numpy()
        unseen = sorted(set(values) - set(lookup))
        if unseen:
            raise VocabMismatch(f"列 {name} 含有词表之外的取值: {unseen[:5]}")
        codes[:, v] = [lookup[value] for value in values]
    return DiscreteTable(codes, [len(v) for v in vocab], vocab, list(columns))


def load_csv_continuous(path):
    try:
        frame = pd.read_csv(path, encoding="utf-8-sig")
    except pd.errors.EmptyDataError as e:
        raise EmptyFile(f"文件为空: {path}") from e
    except pd.errors.ParserError as e:
        raise RaggedRows(f"CSV 行的字段数不一致: {e}") from e
    if frame.empty:
        raise EmptyFile(f"文件没有数据行: {path}")
    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise RaggedRows(f"{path} 含有缺失或非数值的字段")
    return values


def split(num_rows, ratios=(0.8, 0.1, 0.1), seed=0):
    """确定性的 train / val / test 划分

    验证集和测试集大小为 floor(N * r)，其余归入训练集。
    """
    if hasattr(num_rows, "num_rows"):
        num_rows = num_rows.num_rows
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise BadRatios(f"划分比例必须是三个非负数且和为 1: {ratios}")
    n_val = int(np.floor(num_rows * ratios[1] + 1e-9))
    n_test = int(np.floor(num_rows * ratios[2] + 1e-9))
    order = np.random.default_rng(seed).permutation(num_rows)
    n_train = num_rows - n_val - n_test
    return Split(train=order[:n_train], val=order[n_train:n_train + n_val], test=order[n_train + n_val:])


# ============= 连续二维生成器 =============

def _checkerboard(n, rng):
    # [-4, 4]^2 上 4×4 棋盘的 8 个黑格
    squares = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
    chosen = squares[rng.integers(0, len(squares), size=n)]
    return -4.0 + 2.0 * (chosen + rng.uniform(size=(n, 2)))


def _two_moons(n, rng):
    points, _ = make_moons(n_samples=n, noise=0.05, random_state=int(rng.integers(0, 2**31 - 1)))
    return 2.0 * points - np.array([1.0, 0.5])


def _rings(n, rng):
    radii = np.array([1.0, 2.0, 3.0])
    radius = radii[rng.integers(0, len(radii), size=n)] + rng.normal(0.0, 0.08, size=n)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def gaussian_centers(shape):
    if shape == "eight_gaussians":
        angles = np.arange(8) * np.pi / 4.0
        return EIGHT_GAUSSIANS_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1), EIGHT_GAUSSIANS_STD
    if shape == "two_gaussians":
        return np.array([[-TWO_GAUSSIANS_CENTER, 0.0], [TWO_GAUSSIANS_CENTER, 0.0]]), TWO_GAUSSIANS_STD
    raise ValueError(f"{shape} 没有解析密度")


def _gaussian_mixture(shape):
    def generate(n, rng):
        centers, std = gaussian_centers(shape)
        return centers[rng.integers(0, len(centers), size=n)] + rng.normal(0.0, std, size=(n, 2))
    return generate


CONTINUOUS_GENERATORS = {
    "checkerboard": _checkerboard,
    "two_moons": _two_moons,
    "rings": _rings,
    "eight_gaussians": _gaussian_mixture("eight_gaussians"),
    "two_gaussians": _gaussian_mixture("two_gaussians"),
}


def synth_continuous_2d(shape, n, seed=0):
    if shape not in CONTINUOUS_GENERATORS:
        raise ValueError(f"未知的生成器: {shape}, 可选 {sorted(CONTINUOUS_GENERATORS)}")
    return CONTINUOUS_GENERATORS[shape](int(n), np.random.default_rng(seed))


def gaussian_mixture_logpdf(shape, x):
    """等权各向同性高斯混合生成器的解析对数密度"""
    centers, std = gaussian_centers(shape)
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    comp = -0.5 * sq / std ** 2 - x.shape[1] * (0.5 * LOG_2PI + np.log(std))
    return logsumexp(comp, axis=1) - np.log(len(centers))


# ============= 离散合成数据 =============

def synth_quantized_2d(shape, bins, n, seed=0):
    """对连续二维样本每个坐标做等宽分箱，得到两个离散变量（不携带顺序信息）"""
    if bins < 2:
        raise ValueError("bins 必须 >= 2")
    points = synth_continuous_2d(shape, n, seed)
    discretizer = KBinsDiscretizer(n_bins=int(bins), encode="ordinal", strategy="uniform", subsample=None)
    codes = discretizer.fit_transform(points).astype(np.int64)
    vocab = [[str(b) for b in range(bins)] for _ in range(2)]
    return DiscreteTable(codes, [int(bins)] * 2, vocab, ["x0", "x1"])


def synth_categorical(probs, n, seed=0):
    """单个离散变量，取值 v0, v1, ... 按 probs 采样"""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or len(probs) < 2 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"probs 必须是至少两个元素的概率向量: {probs}")
    codes = np.random.default_rng(seed).choice(len(probs), size=int(n), p=probs)
    return DiscreteTable(codes[:, None], [len(probs)], [[f"v{i}" for i in range(len(probs))]], ["y"])


# ============= 基准 =============

def discrete_entropy(probs):
    probs = np.asarray(probs, dtype=np.float64)
    nonzero = probs[probs > 0]
    return float(-np.sum(nonzero * np.log(nonzero)))


def marginal_histogram_nll(train_codes, test_codes, cardinalities):
    """各变量独立的直方图模型（加一平滑）在测试集上的平均 NLL"""
    train_codes = np.asarray(train_codes, dtype=np.int64)
    test_codes = np.asarray(test_codes, dtype=np.int64)
    total = np.zeros(len(test_codes))
    for v, card in enumerate(cardinalities):
        counts = np.bincount(train_codes[:, v], minlength=card) + 1.0
        log_p = np.log(counts / counts.sum())
        total -= log_p[test_codes[:, v]]
    return float(np.mean(total))
