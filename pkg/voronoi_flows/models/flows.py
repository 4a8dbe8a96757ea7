"""仿射耦合流

约定: forward 是生成方向（基分布 -> 数据），log_prob 走 inverse 方向回到基分布。
耦合块的 mask 为 True 的坐标原样通过，其余坐标做 y = x * exp(s) + t。
"""

import logging

import numpy as np

from ..errors import NonFiniteActivation
from . import autodiff as ad
from .optimizer import fit

logger = logging.getLogger("voronoi-flows.flows")

LOG_2PI = float(np.log(2.0 * np.pi))

ACTIVATIONS = {
    "swish": ad.swish,
    "gelu": ad.gelu,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
}


def coupling_masks(dim, num_blocks):
    """依次循环: 前一半、后一半、奇数下标、偶数下标（True = 直通）"""
    index = np.arange(dim)
    schemes = [
        index < dim // 2,
        index >= dim // 2,
        index % 2 == 1,
        index % 2 == 0,
    ]
    if dim == 1:
        # 唯一的坐标总是被变换，网络只看条件输入
        schemes = [np.zeros(1, dtype=bool)]
    return [schemes[i % len(schemes)] for i in range(num_blocks)]


class DiagonalGaussian:
    def __init__(self, dim, std=1.0, mean=0.0):
        self.dim = dim
        self.std = float(std)
        self.mean = float(mean)

    def log_prob(self, z):
        """z: N×D 的 Var，返回长度 N 的 Var"""
        scaled = (z - self.mean) / self.std
        const = -self.dim * (0.5 * LOG_2PI + np.log(self.std))
        return -0.5 * ad.sum(ad.square(scaled), axis=1) + const

    def log_prob_value(self, z):
        z = np.asarray(z, dtype=np.float64)
        const = -self.dim * (0.5 * LOG_2PI + np.log(self.std))
        return -0.5 * np.sum(((z - self.mean) / self.std) ** 2, axis=1) + const

    def sample(self, n, rng):
        return rng.normal(self.mean, self.std, size=(n, self.dim))


class AffineCoupling:
    """一个仿射耦合块

    参数:
        name: 参数名前缀
        mask: 布尔 D 维向量，True 的坐标直通
        hidden: 隐藏层宽度列表
        activation: swish / gelu / tanh / softplus
        clamp: log-scale 的平滑截断 c_s
        cond_dim: 条件嵌入维度（0 表示无条件）
    """

    def __init__(self, name, mask, hidden=(128, 128), activation="swish", clamp=5.0, cond_dim=0):
        self.name = name
        self.mask = np.asarray(mask, dtype=bool)
        self.hidden = tuple(hidden)
        self.activation = activation
        self.act = ACTIVATIONS[activation]
        self.clamp = float(clamp)
        self.cond_dim = int(cond_dim)
        self.pass_idx = np.flatnonzero(self.mask)
        self.out_idx = np.flatnonzero(~self.mask)
        self.dim = len(self.mask)
        # 拼接 [直通坐标, 变换坐标] 之后还原到原始顺序
        self.restore = np.argsort(np.concatenate([self.pass_idx, self.out_idx]))

    @property
    def num_inputs(self):
        return max(len(self.pass_idx) + self.cond_dim, 1)

    def init_params(self, params, rng):
        sizes = [self.num_inputs, *self.hidden, 2 * len(self.out_idx)]
        last = len(sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == last:
                # 最后一层置零，初始时块为恒等变换
                weight = np.zeros((fan_in, fan_out))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params.add(f"{self.name}.W{i}", weight)
            params.add(f"{self.name}.b{i}", np.zeros(fan_out))

    def _conditioner(self, tape, x, cond):
        parts = []
        if len(self.pass_idx):
            parts.append(x[:, self.pass_idx])
        if cond is not None:
            parts.append(cond)
        if not parts:
            return tape.constant(np.ones((x.shape[0], 1)))
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def shift_and_log_scale(self, tape, x, cond=None):
        h = self._conditioner(tape, x, cond)
        num_layers = len(self.hidden) + 1
        for i in range(num_layers):
            h = ad.matmul(h, tape.param(f"{self.name}.W{i}")) + tape.param(f"{self.name}.b{i}")
            if i < num_layers - 1:
                h = self.act(h)
            if not np.all(np.isfinite(h.value)):
                raise NonFiniteActivation(f"{self.name} 第 {i} 层输出含有非有限值")
        width = len(self.out_idx)
        shift = h[:, :width]
        log_scale = self.clamp * ad.tanh(h[:, width:] / self.clamp)
        return shift, log_scale

    def _assemble(self, passed, transformed):
        if not len(self.pass_idx):
            return transformed
        return ad.concat([passed, transformed], axis=1)[:, self.restore]

    def forward(self, tape, x, cond=None):
        x = tape.lift(x)
        shift, log_scale = self.shift_and_log_scale(tape, x, cond)
        y_out = x[:, self.out_idx] * ad.exp(log_scale) + shift
        passed = x[:, self.pass_idx] if len(self.pass_idx) else None
        return self._assemble(passed, y_out), ad.sum(log_scale, axis=1)

    def inverse(self, tape, y, cond=None):
        y = tape.lift(y)
        # 直通坐标不变，条件网络的输入与正向一致
        shift, log_scale = self.shift_and_log_scale(tape, y, cond)
        x_out = (y[:, self.out_idx] - shift) * ad.exp(-log_scale)
        passed = y[:, self.pass_idx] if len(self.pass_idx) else None
        return self._assemble(passed, x_out), -ad.sum(log_scale, axis=1)


class SinhTail:
    """逐坐标的 y = τ sinh(x / τ)，给分布加上重尾

    |x| << τ 时近似恒等；远离原点时 y 指数增长，反向 x = τ asinh(y / τ) 只对数增长，
    因此离锚点很远的偏移在基分布下仍有可用的对数密度。
    """

    def __init__(self, scale):
        if scale <= 0:
            raise ValueError(f"尾部尺度必须为正, 实际 {scale}")
        self.scale = float(scale)

    def forward(self, tape, x):
        a = tape.lift(x) / self.scale
        return self.scale * ad.sinh(a), ad.sum(ad.logcosh(a), axis=1)

    def inverse(self, tape, y):
        a = ad.asinh(tape.lift(y) / self.scale)
        # d asinh(u)/du = 1 / cosh(asinh(u))
        return self.scale * a, -ad.sum(ad.logcosh(a), axis=1)


class FlowStack:
    """耦合块序列 + 对角高斯基分布 + 可选的条件嵌入表

    tail_scale 不为 None 时在数据一侧接一层 SinhTail。
    """

    def __init__(self, name, dim, num_blocks=4, hidden=(128, 128), activation="swish",
                 clamp=5.0, base_std=1.0, num_conditions=0, cond_dim=8, tail_scale=None):
        self.name = name
        self.dim = dim
        self.num_conditions = num_conditions
        self.cond_dim = cond_dim if num_conditions else 0
        self.base = DiagonalGaussian(dim, std=base_std)
        self.blocks = [
            AffineCoupling(f"{name}.block{i}", mask, hidden=hidden, activation=activation,
                           clamp=clamp, cond_dim=self.cond_dim)
            for i, mask in enumerate(coupling_masks(dim, num_blocks))
        ]
        self.tail = SinhTail(tail_scale) if tail_scale is not None else None

    @classmethod
    def from_config(cls, name, dim, network, num_blocks, base_std, num_conditions=0, tail_scale=None):
        return cls(name, dim, num_blocks=num_blocks,
                   hidden=(network.hidden_units,) * network.hidden_layers,
                   activation=network.activation, clamp=network.log_scale_clamp,
                   base_std=base_std, num_conditions=num_conditions,
                   cond_dim=network.cond_embed_dim, tail_scale=tail_scale)

    def init_params(self, params, rng):
        if self.num_conditions:
            params.add(f"{self.name}.embed", rng.normal(0.0, 1.0, size=(self.num_conditions, self.cond_dim)))
        for block in self.blocks:
            block.init_params(params, rng)

    def embed(self, tape, cond_ids):
        if cond_ids is None or not self.num_conditions:
            return None
        return ad.take(tape.param(f"{self.name}.embed"), cond_ids)

    def forward(self, tape, z, cond_ids=None):
        """基分布 -> 数据，返回 (x, 每个样本的 logdet)"""
        cond = self.embed(tape, cond_ids)
        x = tape.lift(z)
        logdet = tape.constant(np.zeros(x.shape[0]))
        for block in self.blocks:
            x, ld = block.forward(tape, x, cond)
            logdet = logdet + ld
        if self.tail is not None:
            x, ld = self.tail.forward(tape, x)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, tape, x, cond_ids=None):
        """数据 -> 基分布"""
        cond = self.embed(tape, cond_ids)
        z = tape.lift(x)
        logdet = tape.constant(np.zeros(z.shape[0]))
        if self.tail is not None:
            z, ld = self.tail.inverse(tape, z)
            logdet = logdet + ld
        for block in reversed(self.blocks):
            z, ld = block.inverse(tape, z, cond)
            logdet = logdet + ld
        return z, logdet

    def log_prob(self, tape, x, cond_ids=None):
        z, logdet = self.inverse(tape, x, cond_ids)
        return self.base.log_prob(z) + logdet

    def sample(self, tape, n, rng, cond_ids=None):
        z = self.base.sample(n, rng)
        x, _ = self.forward(tape, z, cond_ids)
        return x


# ============= 函数式接口 =============

def coupling_forward(tape, block, x, cond=None):
    return block.forward(tape, x, cond)


def coupling_inverse(tape, block, y, cond=None):
    return block.inverse(tape, y, cond)


def flow_logprob(params, stack, x, cond_ids=None):
    """log p(x)，返回 numpy 数组"""
    tape = ad.Tape(params, record=False)
    return stack.log_prob(tape, np.asarray(x, dtype=np.float64), cond_ids).value


def flow_sample(params, stack, n, rng, cond_ids=None):
    if n < 1:
        raise ValueError("采样数必须 >= 1")
    tape = ad.Tape(params, record=False)
    return stack.sample(tape, n, rng, cond_ids).value


class FlowDensity:
    """单独的耦合流密度模型（task = flow 的基线）"""

    def __init__(self, stack, params):
        self.stack = stack
        self.params = params

    @property
    def dim(self):
        return self.stack.dim

    def log_prob(self, tape, x):
        return self.stack.log_prob(tape, x)

    def logprob_values(self, x, batch_size=4096):
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([flow_logprob(self.params, self.stack, x[i:i + batch_size])
                               for i in range(0, len(x), batch_size)])

    def sample(self, n, rng):
        return flow_sample(self.params, self.stack, n, rng)


def train_flow(density, train_x, val_x, optimizer_config, rng):
    """最大似然训练耦合流，返回 TrainingReport"""
    train_x = np.asarray(train_x, dtype=np.float64)

    def batch_loss(tape, batch, _rng):
        return -ad.sum(density.log_prob(tape, train_x[batch])) / float(len(batch))

    def val_loss():
        return -float(np.mean(density.logprob_values(val_x)))

    return fit(density.params, batch_loss, len(train_x), val_loss, optimizer_config, rng, name="flow")
