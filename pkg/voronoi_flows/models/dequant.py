"""Voronoi 去量化

每个离散变量 v 有自己的镶嵌；取值 j 对应胞腔 j。去量化样本:
z ~ N(0, σ^2)，z' = cond_flow(z | v, y_v)，u = x_{y_v} + z'，x_v = f_{y_v}(u)。
由于 f_k 的值域就是 V_k，quantize(dequantize(y)) = y 恒成立。
"""

import logging

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .cell_map import map_forward, map_inverse
from .flows import FlowStack
from .optimizer import fit
from .tessellation import (
    geometry_vars,
    project_anchors,
    random_anchors,
    register_geometry,
    tessellation_from_params,
)

logger = logging.getLogger("voronoi-flows.dequant")

EVAL_BATCH = 2048


class DequantModel:
    """所有离散变量的去量化分布 q(x | y)

    参数:
        params: 共享的 ParameterSet
        cardinalities: 每个变量的取值个数
        embed_dim: 每个变量的连续嵌入维度 D
        num_cells: 每个变量的胞腔数（>= 取值个数）
        flows: 变量 -> (FlowStack, 条件编号偏移)
    """

    def __init__(self, params, cardinalities, embed_dim, num_cells, flows, prefix="dequant"):
        self.params = params
        self.cardinalities = [int(c) for c in cardinalities]
        self.embed_dim = int(embed_dim)
        self.num_cells = [int(k) for k in num_cells]
        self.flows = flows
        self.prefix = prefix
        for card, cells in zip(self.cardinalities, self.num_cells):
            if cells < card:
                raise ValueError(f"胞腔数 {cells} 少于取值个数 {card}")

    @classmethod
    def build(cls, params, cardinalities, config, rng=None, prefix="dequant"):
        """按配置创建模型

        参数:
            config: Config（使用 tessellation / network / dequant 三节）
            rng: 提供时初始化参数；为 None 时只搭结构（参数由检查点恢复）
        """
        cards = [int(c) for c in cardinalities]
        if config.dequant.cells == "max":
            num_cells = [max(cards)] * len(cards)
        else:
            num_cells = list(cards)
        dim = config.dequant.embed_dim
        tess_cfg = config.tessellation

        for v, cells in enumerate(num_cells):
            if rng is None:
                break
            anchors = random_anchors(rng, cells, dim, std=tess_cfg.init_std, bound=tess_cfg.init_bound)
            bound = np.full(dim, tess_cfg.init_bound)
            register_geometry(params, f"{prefix}.tess{v}", anchors, -bound, bound,
                              scales=np.full(cells, tess_cfg.init_scale), train_box=tess_cfg.train_box)

        flows = {}
        if config.dequant.shared_flow:
            stack = FlowStack.from_config(f"{prefix}.flow", dim, config.network, config.dequant.num_blocks,
                                          config.dequant.base_std, num_conditions=int(np.sum(cards)),
                                          tail_scale=config.dequant.tail_scale)
            if rng is not None:
                stack.init_params(params, rng)
            offsets = np.concatenate([[0], np.cumsum(cards)[:-1]])
            for v in range(len(cards)):
                flows[v] = (stack, int(offsets[v]))
        else:
            for v, card in enumerate(cards):
                stack = FlowStack.from_config(f"{prefix}.flow{v}", dim, config.network, config.dequant.num_blocks,
                                              config.dequant.base_std, num_conditions=card,
                                              tail_scale=config.dequant.tail_scale)
                if rng is not None:
                    stack.init_params(params, rng)
                flows[v] = (stack, 0)
        logger.info(f"去量化模型: {len(cards)} 个变量, D={dim}, 胞腔数={num_cells}, "
                    f"{'共享' if config.dequant.shared_flow else '独立'}条件流")
        return cls(params, cards, dim, num_cells, flows, prefix=prefix)

    @property
    def num_variables(self):
        return len(self.cardinalities)

    @property
    def total_dim(self):
        return self.num_variables * self.embed_dim

    def tess_prefix(self, v):
        return f"{self.prefix}.tess{v}"

    def tessellation(self, v):
        return tessellation_from_params(self.params, self.tess_prefix(v))

    def columns(self, v):
        return slice(v * self.embed_dim, (v + 1) * self.embed_dim)

    def project(self, params, margin):
        for v in range(self.num_variables):
            project_anchors(params, self.tess_prefix(v), margin)

    def check_codes(self, y):
        y = np.asarray(y, dtype=np.int64)
        if y.ndim != 2 or y.shape[1] != self.num_variables:
            raise ValueError(f"离散编码应为 N×{self.num_variables} 矩阵, 实际 {y.shape}")
        if np.any(y < 0) or np.any(y >= np.asarray(self.cardinalities)[None, :]):
            raise ValueError("离散编码超出取值范围")
        return y

    def draw_noise(self, n, rng):
        return [self.flows[v][0].base.sample(n, rng) for v in range(self.num_variables)]

    def dequantize_tape(self, tape, y, rng=None, noise=None):
        """在 tape 上计算 (x, log q(x|y))

        参数:
            y: N×V 编码
            noise: 可选的基分布噪声列表（梯度检查时固定随机性）

        返回:
            (x: N×ΣD Var, logq: N Var)
        """
        y = self.check_codes(y)
        noise = noise if noise is not None else self.draw_noise(len(y), rng)
        xs = []
        logq = tape.constant(np.zeros(len(y)))
        for v in range(self.num_variables):
            stack, offset = self.flows[v]
            codes = y[:, v]
            z = tape.constant(noise[v])
            shifted, flow_logdet = stack.forward(tape, z, codes + offset)
            geom = geometry_vars(tape, self.tess_prefix(v))
            u = ad.take(geom.anchors, codes) + shifted
            mapped = map_forward(tape, geom, codes, u)
            xs.append(mapped.point)
            logq = logq + stack.base.log_prob(z) - flow_logdet - mapped.logdet
        x = xs[0] if len(xs) == 1 else ad.concat(xs, axis=1)
        return x, logq

    def log_q_tape(self, tape, x, y):
        """逆向计算 log q(x|y)；x[:, v] 必须落在胞腔 y_v 内"""
        y = self.check_codes(y)
        x = tape.lift(x)
        logq = tape.constant(np.zeros(len(y)))
        for v in range(self.num_variables):
            stack, offset = self.flows[v]
            codes = y[:, v]
            geom = geometry_vars(tape, self.tess_prefix(v))
            mapped = map_inverse(tape, geom, codes, x[:, self.columns(v)])
            shifted = mapped.point - ad.take(geom.anchors, codes)
            z, flow_logdet = stack.inverse(tape, shifted, codes + offset)
            logq = logq + stack.base.log_prob(z) + flow_logdet + mapped.logdet
        return logq

    def quantize_values(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([self.tessellation(v).locate_batch(x[:, self.columns(v)])
                         for v in range(self.num_variables)], axis=1)


class JointDensity:
    """所有变量嵌入空间上的联合密度 p(x)（一个耦合流）"""

    def __init__(self, params, stack):
        self.params = params
        self.stack = stack

    @classmethod
    def build(cls, params, dim, config, rng=None, name="density"):
        stack = FlowStack.from_config(name, dim, config.network, config.density.num_blocks,
                                      config.density.base_std, tail_scale=config.density.tail_scale)
        if rng is not None:
            stack.init_params(params, rng)
        return cls(params, stack)

    @property
    def dim(self):
        return self.stack.dim

    def log_prob(self, tape, x):
        return self.stack.log_prob(tape, x)

    def sample(self, n, rng):
        tape = ad.Tape(self.params, record=False)
        return self.stack.sample(tape, n, rng).value


class PushforwardDensity:
    """p(x) = p(g(x)) q(x | g(x))，在这个构造下 ELBO 是紧的

    log_py: 与变量取值同形状的对数概率表（单变量时为一维数组）
    """

    def __init__(self, model, log_py):
        self.model = model
        self.log_py = np.asarray(log_py, dtype=np.float64)

    def log_prob(self, tape, x):
        x = tape.lift(x)
        codes = self.model.quantize_values(x.value)
        weights = self.log_py[tuple(codes.T)]
        return self.model.log_q_tape(tape, x, codes) + weights


# ============= 函数式接口 =============

def _as_batch(y):
    y = np.asarray(y, dtype=np.int64)
    return (y[None, :], True) if y.ndim == 1 else (y, False)


def dequantize(model, y, rng):
    """采样 x ~ q(x|y)，返回 (x, logq)；y 为单个编码向量或 N×V 矩阵"""
    batch, single = _as_batch(y)
    tape = ad.Tape(model.params, record=False)
    x, logq = model.dequantize_tape(tape, batch, rng)
    if single:
        return x.value[0], float(logq.value[0])
    return x.value, logq.value


def quantize(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return model.quantize_values(x[None, :])[0]
    return model.quantize_values(x)


def log_q(model, x, y):
    x = np.asarray(x, dtype=np.float64)
    batch, single = _as_batch(y)
    tape = ad.Tape(model.params, record=False)
    values = model.log_q_tape(tape, x.reshape(len(batch), -1), batch).value
    return float(values[0]) if single else values


def _check_num_samples(num_samples):
    if int(num_samples) < 1:
        raise ValueError(f"采样数 S 必须 >= 1, 实际 {num_samples}")
    return int(num_samples)


def _importance_terms(model, density, y, num_samples, rng):
    """返回 N×S 的 log p(x_s) - log q(x_s|y)"""
    num_samples = _check_num_samples(num_samples)
    repeated = np.repeat(y, num_samples, axis=0)
    tape = ad.Tape(model.params, record=False)
    x, logq = model.dequantize_tape(tape, repeated, rng)
    terms = density.log_prob(tape, x).value - logq.value
    return terms.reshape(len(y), num_samples)


def _batched(model, density, y, num_samples, rng, reduce):
    batch, single = _as_batch(y)
    num_samples = _check_num_samples(num_samples)
    step = max(1, EVAL_BATCH // num_samples)
    values = np.concatenate([
        reduce(_importance_terms(model, density, batch[i:i + step], num_samples, rng))
        for i in range(0, len(batch), step)
    ])
    return float(values[0]) if single else values


def elbo(model, density, y, num_samples, rng):
    """(1/S) Σ_s [log p(x_s) - log q(x_s|y)]，逐样本返回"""
    return _batched(model, density, y, num_samples, rng, lambda t: np.mean(t, axis=1))


def log_evidence_estimate(model, density, y, num_samples, rng):
    """重要性采样估计 log p(y) = log (1/S) Σ_s p(x_s)/q(x_s|y)"""
    return _batched(model, density, y, num_samples, rng,
                    lambda t: logsumexp(t, axis=1) - np.log(t.shape[1]))


def nll_bound(model, density, codes, num_samples, rng):
    """逐样本的负 ELBO（nats）"""
    return -np.asarray(elbo(model, density, np.asarray(codes), num_samples, rng))


def elbo_loss(tape, model, density, y, num_samples=1, rng=None, noise=None):
    """批内平均负 ELBO（训练目标）"""
    repeated = np.repeat(np.asarray(y, dtype=np.int64), num_samples, axis=0)
    x, logq = model.dequantize_tape(tape, repeated, rng, noise=noise)
    return -ad.sum(density.log_prob(tape, x) - logq) / float(len(repeated))


def train(model, density, train_codes, val_codes, optimizer_config, rng,
          num_samples=1, margin=1e-3, val_seed=0):
    """联合训练去量化模型和密度模型，在验证集负 ELBO 上早停

    返回:
        TrainingReport
    """
    train_codes = model.check_codes(train_codes)
    val_codes = model.check_codes(val_codes)

    def batch_loss(tape, batch, batch_rng):
        return elbo_loss(tape, model, density, train_codes[batch], num_samples, batch_rng)

    def val_loss():
        # 固定种子，使各轮验证结果可比较
        return float(np.mean(nll_bound(model, density, val_codes, 1, np.random.default_rng(val_seed))))

    return fit(model.params, batch_loss, len(train_codes), val_loss, optimizer_config, rng,
               project=lambda params: model.project(params, margin), name="dequant")


def sample_codes(model, density, n, rng, max_rounds=100):
    """从 p(x) 采样并量化；落在多余胞腔（cells = max 时）的样本被丢弃重采"""
    collected = []
    remaining = n
    cards = np.asarray(model.cardinalities)[None, :]
    for _ in range(max_rounds):
        codes = model.quantize_values(density.sample(remaining, rng))
        valid = np.all(codes < cards, axis=1)
        collected.append(codes[valid])
        remaining -= int(np.sum(valid))
        if remaining <= 0:
            return np.concatenate(collected)[:n]
        logger.debug(f"{int(np.sum(~valid))} 个样本落在未使用的胞腔, 重新采样")
    raise RuntimeError(f"{max_rounds} 轮后仍有 {remaining} 个样本落在未使用的胞腔")
