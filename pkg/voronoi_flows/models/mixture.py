"""不相交 Voronoi 混合模型

log p(x) = log p_comp(f_k^{-1}(z) - x_k | k) + log|det ∂f_k^{-1}/∂z| + log p(k) + log|det ∂z/∂x|，
其中 z 是 pre_flow 把 x 映回潜空间的结果，k = locate(z)。每个样本只计算一个分量。
"""

import logging
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.cluster import KMeans

from ..errors import BoundaryPoint
from . import autodiff as ad
from .cell_map import map_forward, map_inverse, relative_radius
from .flows import FlowStack
from .optimizer import fit
from .tessellation import (
    MIN_ANCHOR_DISTANCE,
    geometry_vars,
    nearest_anchor,
    project_anchors,
    register_geometry,
    tessellation_from_params,
)

logger = logging.getLogger("voronoi-flows.mixture")

BOUNDARY_NUDGE = 1e-9
EVAL_BATCH = 4096
KMEANS_RESTARTS = 4
SCALE_RANGE = (1e-2, 1e2)


class LogProbDiagnostics(NamedTuple):
    components: np.ndarray
    outside_box: np.ndarray
    on_boundary: np.ndarray
    nudged: int


class MixtureModel:
    """pre_flow + 镶嵌 + 分量先验 logits + 条件分量流"""

    def __init__(self, params, dim, num_components, pre_flow, comp_flow, prefix="mixture",
                 outside_offset=50.0, outside_slope=10.0):
        self.params = params
        self.dim = int(dim)
        self.num_components = int(num_components)
        self.pre_flow = pre_flow
        self.comp_flow = comp_flow
        self.prefix = prefix
        self.outside_offset = float(outside_offset)
        self.outside_slope = float(outside_slope)

    @property
    def tess_prefix(self):
        return f"{self.prefix}.tess"

    @property
    def logits_name(self):
        return f"{self.prefix}.logits"

    @classmethod
    def from_config(cls, params, dim, config, prefix="mixture"):
        """只搭结构，参数由检查点恢复"""
        cfg = config.mixture
        pre_flow = FlowStack.from_config(f"{prefix}.pre", dim, config.network, cfg.pre_flow_blocks, 1.0)
        comp_flow = FlowStack.from_config(f"{prefix}.comp", dim, config.network, cfg.comp_flow_blocks,
                                          cfg.comp_base_std, num_conditions=cfg.num_components,
                                          tail_scale=cfg.comp_tail_scale)
        return cls(params, dim, cfg.num_components, pre_flow, comp_flow, prefix=prefix,
                   outside_offset=cfg.outside_offset, outside_slope=cfg.outside_slope)

    @classmethod
    def build(cls, params, train_x, config, rng, prefix="mixture"):
        """创建模型；盒约束取潜空间数据范围加 margin，锚点取 k-means 聚类中心

        分量先验按聚类大小初始化；γ_k 使胞腔 k 内训练点在分量空间的中位偏移量约为 comp_base_std·√D。

        参数:
            train_x: N×D 训练数据
            config: Config（使用 network / mixture 两节）
        """
        train_x = np.asarray(train_x, dtype=np.float64)
        cfg = config.mixture
        dim = train_x.shape[1]
        mix = cls.from_config(params, dim, config, prefix=prefix)
        mix.pre_flow.init_params(params, rng)
        mix.comp_flow.init_params(params, rng)

        subsample = train_x
        if len(train_x) > cfg.init_subsample:
            subsample = train_x[rng.choice(len(train_x), size=cfg.init_subsample, replace=False)]
        tape = ad.Tape(params, record=False)
        latent, _ = mix.pre_flow.inverse(tape, subsample)
        latent = latent.value

        box_lo = latent.min(axis=0) - cfg.box_margin
        box_hi = latent.max(axis=0) + cfg.box_margin
        num_clusters = min(cfg.num_components, len(np.unique(latent, axis=0)))
        kmeans = KMeans(n_clusters=num_clusters, n_init=KMEANS_RESTARTS,
                        random_state=int(rng.integers(0, 2**31 - 1))).fit(latent)
        anchors = kmeans.cluster_centers_
        if num_clusters < cfg.num_components:
            extra = rng.uniform(box_lo + 0.5 * cfg.box_margin, box_hi - 0.5 * cfg.box_margin,
                                size=(cfg.num_components - num_clusters, dim))
            anchors = np.concatenate([anchors, extra])
        anchors = _separate(anchors, rng)
        register_geometry(params, mix.tess_prefix, anchors, box_lo, box_hi, train_box=cfg.train_box)

        cells = nearest_anchor(latent, anchors)
        counts = np.bincount(cells, minlength=cfg.num_components).astype(np.float64)
        params.add(mix.logits_name, np.log((counts + 1.0) / (len(latent) + cfg.num_components)))
        params[f"{mix.tess_prefix}.log_scale"] = np.log(_initial_scales(mix, latent, cells, cfg.comp_base_std))
        logger.info(f"混合模型: K={cfg.num_components}, D={dim}, pre_flow {cfg.pre_flow_blocks} 块, "
                    f"分量流 {cfg.comp_flow_blocks} 块, 盒约束 [{box_lo.round(3)}, {box_hi.round(3)}]")
        return mix

    def tessellation(self):
        return tessellation_from_params(self.params, self.tess_prefix)

    def log_weights(self):
        logits = self.params[self.logits_name]
        return logits - logsumexp(logits)

    def project(self, params, margin):
        project_anchors(params, self.tess_prefix, margin)

    def log_prob_tape(self, tape, x, training=False):
        """逐样本 log p(x)

        盒外的潜变量密度为 0: 评估时返回 -inf；训练时改为
        -(outside_offset + outside_slope * 到盒子的距离)，让梯度把它们拉回盒内。

        返回:
            (N 维 Var, LogProbDiagnostics)
        """
        x = tape.lift(x)
        z, pre_logdet = self.pre_flow.inverse(tape, x)
        geom = geometry_vars(tape, self.tess_prefix)
        anchors = geom.anchors.value
        lo, hi = geom.box_lo.value, geom.box_hi.value

        z_values = z.value
        ks = nearest_anchor(z_values, anchors)
        outside = ~np.all((z_values > lo) & (z_values < hi), axis=1)

        alpha = relative_radius(geom, ks, z_values)
        boundary = ~outside & (alpha >= 1.0)
        nudged = int(np.sum(boundary))
        if nudged:
            toward = anchors[ks[boundary]] - z_values[boundary]
            step = np.zeros_like(z_values)
            step[boundary] = BOUNDARY_NUDGE * toward / np.linalg.norm(toward, axis=1, keepdims=True)
            z = z + step
            z_values = z.value
            alpha = relative_radius(geom, ks, z_values)
            boundary = ~outside & (alpha >= 1.0)
            logger.warning(f"{nudged} 个点落在胞腔边界上, 已向锚点方向推移 {BOUNDARY_NUDGE:g}, "
                           f"仍无法计算的有 {int(np.sum(boundary))} 个")

        valid = ~outside & ~boundary
        xk = ad.take(geom.anchors, ks)
        z_safe = ad.where(valid[:, None], z, anchors[ks]) if not np.all(valid) else z
        inv = map_inverse(tape, geom, ks, z_safe)
        offset = inv.point - xk
        comp = self.comp_flow.log_prob(tape, offset, ks)
        logits = tape.param(self.logits_name)
        log_pk = ad.take(logits - ad.logsumexp(logits), ks)
        logprob = comp + inv.logdet + log_pk + pre_logdet

        if not np.all(valid):
            if training:
                excess = ad.relu(ad.reshape(geom.box_lo, (1, -1)) - z) + ad.relu(z - ad.reshape(geom.box_hi, (1, -1)))
                penalty = -self.outside_offset - self.outside_slope * ad.sum(excess, axis=1)
                logprob = ad.where(valid, logprob, penalty)
            else:
                logprob = ad.where(valid, logprob, -np.inf)
                if np.any(outside):
                    logger.debug(f"{int(np.sum(outside))} 个点的潜变量在盒约束之外, 密度为 0")
        return logprob, LogProbDiagnostics(ks, outside, boundary, nudged)

    def sample_tape(self, tape, n, rng):
        weights = softmax(tape.param(self.logits_name).value)
        ks = rng.choice(self.num_components, size=n, p=weights)
        offsets = self.comp_flow.sample(tape, n, rng, ks)
        geom = geometry_vars(tape, self.tess_prefix)
        u = ad.take(geom.anchors, ks) + offsets
        z = map_forward(tape, geom, ks, u).point
        x, _ = self.pre_flow.forward(tape, z)
        return x, ks, z


def _initial_scales(mix, latent, cells, base_std):
    """γ_k = median(|z - x_k| / (1 - α̃)) / (base_std √D)，空胞腔取 1"""
    geom = geometry_vars(ad.Tape(mix.params, record=False), mix.tess_prefix)
    anchors = geom.anchors.value
    alpha = np.minimum(relative_radius(geom, cells, latent), 1.0 - 1e-6)
    spread = np.linalg.norm(latent - anchors[cells], axis=1) / (1.0 - alpha)
    target = base_std * np.sqrt(latent.shape[1])
    scales = np.ones(mix.num_components)
    for k in range(mix.num_components):
        inside = spread[cells == k]
        if len(inside) and np.median(inside) > 0:
            scales[k] = np.median(inside) / target
    return np.clip(scales, *SCALE_RANGE)


def _separate(anchors, rng):
    """锚点重合时加微小扰动直到互不相同"""
    anchors = np.array(anchors, dtype=np.float64)
    for _ in range(100):
        dists = np.linalg.norm(anchors[:, None, :] - anchors[None, :, :], axis=2)
        dists[np.tril_indices(len(anchors))] = np.inf
        clash = np.unique(np.nonzero(dists <= MIN_ANCHOR_DISTANCE)[1])
        if not len(clash):
            return anchors
        anchors[clash] += rng.normal(0.0, 1e-3, size=(len(clash), anchors.shape[1]))
    return anchors


# ============= 函数式接口 =============

def mixture_logprob(mix, x, training=False, strict=False):
    """逐样本 log p(x)（numpy）

    strict=True 时，推移后仍落在胞腔边界上的点抛出 BoundaryPoint 而不是返回 -inf。
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, mix.dim)
    values = []
    for i in range(0, len(x), EVAL_BATCH):
        tape = ad.Tape(mix.params, record=False)
        logprob, diagnostics = mix.log_prob_tape(tape, x[i:i + EVAL_BATCH], training=training)
        if strict and np.any(diagnostics.on_boundary):
            raise BoundaryPoint(f"{int(np.sum(diagnostics.on_boundary))} 个点位于胞腔边界上")
        values.append(logprob.value)
    values = np.concatenate(values)
    return float(values[0]) if single else values


def mixture_logprob_bruteforce(mix, x):
    """log Σ_k 1[z ∈ V_k] p(z|k) p(k)，逐个分量计算（用于核对）"""
    x = np.asarray(x, dtype=np.float64).reshape(-1, mix.dim)
    tape = ad.Tape(mix.params, record=False)
    z, pre_logdet = mix.pre_flow.inverse(tape, x)
    tess = mix.tessellation()
    geom = geometry_vars(tape, mix.tess_prefix)
    log_weights = mix.log_weights()
    terms = np.full((len(x), mix.num_components), -np.inf)
    for k in range(mix.num_components):
        ks = np.full(len(x), k)
        inside = tess.contains_batch(ks, z.value)
        if not np.any(inside):
            continue
        rows = np.flatnonzero(inside)
        inv = map_inverse(tape, geom, ks[rows], z.value[rows])
        offset = inv.point.value - tess.anchors[k]
        comp = mix.comp_flow.log_prob(tape, offset, ks[rows]).value
        terms[rows, k] = comp + inv.logdet.value + log_weights[k]
    return logsumexp(terms, axis=1) + pre_logdet.value


def mixture_sample(mix, n, rng, return_components=False):
    if n < 1:
        raise ValueError("采样数必须 >= 1")
    tape = ad.Tape(mix.params, record=False)
    x, ks, z = mix.sample_tape(tape, n, rng)
    if return_components:
        return x.value, ks, z.value
    return x.value


def train_mixture(mix, train_x, val_x, optimizer_config, rng, margin=1e-3):
    """最大化平均 log p(x)，在验证集 NLL 上早停

    验证集使用训练时的盒外惩罚，保证早停比较的是有限值。
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)

    def batch_loss(tape, batch, _rng):
        logprob, _ = mix.log_prob_tape(tape, train_x[batch], training=True)
        return -ad.sum(logprob) / float(len(batch))

    def val_loss():
        return -float(np.mean(mixture_logprob(mix, val_x, training=True)))

    return fit(mix.params, batch_loss, len(train_x), val_loss, optimizer_config, rng,
               project=lambda params: mix.project(params, margin), name="mixture")
