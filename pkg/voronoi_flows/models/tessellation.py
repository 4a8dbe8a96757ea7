"""带盒约束的 Voronoi 镶嵌

每个胞腔 V_k 是开集: 对所有 i != k 满足 2(x_i - x_k)^T x < |x_i|^2 - |x_k|^2，
并且落在盒约束 (box_lo, box_hi) 之内。约束的列顺序在本模块和 cell_map 中一致:
先按锚点下标排列的 Voronoi 约束，再是 D 个下界，最后是 D 个上界。
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist, pdist

from ..errors import (
    AnchorOutsideBox,
    DuplicateAnchors,
    IndexOutOfRange,
    NonFiniteInput,
    NonPositiveScale,
    ShapeMismatch,
)
from . import autodiff as ad

logger = logging.getLogger("voronoi-flows.tessellation")

MIN_ANCHOR_DISTANCE = 1e-9
PROJECTION_MARGIN = 1e-3

VORONOI = "voronoi"
BOX_LOWER = "box_lower"
BOX_UPPER = "box_upper"


class ConstraintId(NamedTuple):
    kind: str
    index: int

    def __str__(self):
        return f"{self.kind}({self.index})"


@dataclass(frozen=True)
class HalfSpace:
    """半空间 {x : normal^T x < offset}"""

    normal: np.ndarray
    offset: float
    kind: str
    index: int

    @property
    def constraint_id(self):
        return ConstraintId(self.kind, self.index)


def column_to_constraint(column, num_anchors, dim):
    """把批量计算中的约束列号换算成 ConstraintId"""
    column = int(column)
    if column < num_anchors:
        return ConstraintId(VORONOI, column)
    if column < num_anchors + dim:
        return ConstraintId(BOX_LOWER, column - num_anchors)
    return ConstraintId(BOX_UPPER, column - num_anchors - dim)


def nearest_anchor(points, anchors):
    """最近锚点的下标；距离相同时取最小下标"""
    return np.argmin(cdist(points, anchors, "sqeuclidean"), axis=1)


class Tessellation:
    """不可变的 Voronoi 镶嵌（锚点、盒约束、每个胞腔的压缩尺度）"""

    def __init__(self, anchors, box_lo, box_hi, scales):
        self.anchors = anchors
        self.box_lo = box_lo
        self.box_hi = box_hi
        self.scales = scales
        for array in (anchors, box_lo, box_hi, scales):
            array.setflags(write=False)

    @property
    def num_cells(self):
        return self.anchors.shape[0]

    @property
    def dim(self):
        return self.anchors.shape[1]

    def __repr__(self):
        return f"Tessellation(K={self.num_cells}, D={self.dim})"

    def check_index(self, k):
        if not 0 <= int(k) < self.num_cells:
            raise IndexOutOfRange(f"胞腔下标 {k} 超出范围 [0, {self.num_cells})")
        return int(k)

    def constraint_arrays(self, k):
        """返回 (normals, offsets, ids)，共 (K-1) + 2D 个约束"""
        k = self.check_index(k)
        others = [i for i in range(self.num_cells) if i != k]
        xk = self.anchors[k]
        eye = np.eye(self.dim)
        normals = np.concatenate([
            2.0 * (self.anchors[others] - xk),
            -eye,
            eye,
        ])
        offsets = np.concatenate([
            np.sum(self.anchors[others] ** 2, axis=1) - np.sum(xk ** 2),
            -self.box_lo,
            self.box_hi,
        ])
        ids = ([ConstraintId(VORONOI, i) for i in others]
               + [ConstraintId(BOX_LOWER, d) for d in range(self.dim)]
               + [ConstraintId(BOX_UPPER, d) for d in range(self.dim)])
        return normals, offsets, ids

    def cell_constraints(self, k):
        normals, offsets, ids = self.constraint_arrays(k)
        return [HalfSpace(normal=a, offset=float(b), kind=cid.kind, index=cid.index)
                for a, b, cid in zip(normals, offsets, ids)]

    def locate(self, x):
        x = np.asarray(x, dtype=np.float64)
        return int(self.locate_batch(x[None, :])[0])

    def locate_batch(self, points):
        """逐行定位所在胞腔"""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise ShapeMismatch(f"点的形状应为 (N, {self.dim}), 实际 {points.shape}")
        return nearest_anchor(points, self.anchors)

    def contains(self, k, x):
        normals, offsets, _ = self.constraint_arrays(k)
        return bool(np.all(normals @ np.asarray(x, dtype=np.float64) < offsets))

    def contains_batch(self, ks, points):
        """逐行判断 points[n] 是否严格位于胞腔 ks[n] 内"""
        points = np.asarray(points, dtype=np.float64)
        ks = np.asarray(ks, dtype=np.int64)
        if np.any(ks < 0) or np.any(ks >= self.num_cells):
            raise IndexOutOfRange("胞腔下标超出范围")
        xk = self.anchors[ks]
        # 2 (x_i - x_k)^T x < |x_i|^2 - |x_k|^2
        lhs = 2.0 * (np.einsum("kd,nd->nk", self.anchors, points) - np.sum(xk * points, axis=1)[:, None])
        rhs = np.sum(self.anchors ** 2, axis=1)[None, :] - np.sum(xk ** 2, axis=1)[:, None]
        inside = lhs < rhs
        inside[np.arange(len(ks)), ks] = True
        in_box = np.all((points > self.box_lo) & (points < self.box_hi), axis=1)
        return np.all(inside, axis=1) & in_box

    def in_box(self, points):
        points = np.asarray(points, dtype=np.float64)
        return np.all((points > self.box_lo) & (points < self.box_hi), axis=1)


def new_tessellation(anchors, box_lo, box_hi, scales):
    """校验输入并构造 Tessellation

    参数:
        anchors: K×D 锚点
        box_lo, box_hi: D 维盒约束
        scales: K 个正的压缩尺度 γ_k

    返回:
        Tessellation
    """
    anchors = np.array(anchors, dtype=np.float64)
    box_lo = np.array(box_lo, dtype=np.float64).reshape(-1)
    box_hi = np.array(box_hi, dtype=np.float64).reshape(-1)
    scales = np.array(scales, dtype=np.float64).reshape(-1)

    if anchors.ndim != 2 or anchors.shape[0] < 1 or anchors.shape[1] < 1:
        raise ShapeMismatch(f"anchors 应为 K×D 矩阵 (K, D >= 1), 实际形状 {anchors.shape}")
    num_cells, dim = anchors.shape
    if box_lo.shape != (dim,) or box_hi.shape != (dim,):
        raise ShapeMismatch(f"盒约束应为 {dim} 维向量, 实际 {box_lo.shape} / {box_hi.shape}")
    if scales.shape != (num_cells,):
        raise ShapeMismatch(f"scales 应有 {num_cells} 个元素, 实际 {scales.shape}")
    for name, array in (("anchors", anchors), ("box_lo", box_lo), ("box_hi", box_hi), ("scales", scales)):
        if not np.all(np.isfinite(array)):
            raise NonFiniteInput(f"{name} 含有非有限值")

    if num_cells > 1:
        closest = float(np.min(pdist(anchors)))
        if closest <= MIN_ANCHOR_DISTANCE:
            raise DuplicateAnchors(f"锚点间最小距离 {closest:.3e} <= {MIN_ANCHOR_DISTANCE}")
    outside = ~np.all((anchors > box_lo) & (anchors < box_hi), axis=1)
    if np.any(outside):
        raise AnchorOutsideBox(f"锚点 {np.flatnonzero(outside).tolist()} 不在盒约束内部")
    if np.any(scales <= 0):
        raise NonPositiveScale(f"压缩尺度必须为正, 最小值 {np.min(scales)}")

    return Tessellation(anchors, box_lo, box_hi, scales)


# ============= 可学习的几何参数 =============

class GeometryVars(NamedTuple):
    """Tape 上的镶嵌几何: anchors (K×D), box_lo (D), box_hi (D), scales (K)"""

    anchors: ad.Var
    box_lo: ad.Var
    box_hi: ad.Var
    scales: ad.Var


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def register_geometry(params, prefix, anchors, box_lo, box_hi, scales=None, train_box=True):
    """把镶嵌写入 ParameterSet

    盒约束以中心 + softplus 半宽参数化，γ = exp(log_scale)。
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    box_lo = np.asarray(box_lo, dtype=np.float64)
    box_hi = np.asarray(box_hi, dtype=np.float64)
    if scales is None:
        scales = np.ones(anchors.shape[0])
    # 借用构造函数做校验
    new_tessellation(anchors, box_lo, box_hi, scales)
    params.add(f"{prefix}.anchors", anchors)
    params.add(f"{prefix}.box_center", 0.5 * (box_lo + box_hi), trainable=train_box)
    params.add(f"{prefix}.box_raw", inverse_softplus(0.5 * (box_hi - box_lo)), trainable=train_box)
    params.add(f"{prefix}.log_scale", np.log(np.asarray(scales, dtype=np.float64)))


def geometry_vars(tape, prefix):
    center = tape.param(f"{prefix}.box_center")
    half = ad.softplus(tape.param(f"{prefix}.box_raw"))
    return GeometryVars(
        anchors=tape.param(f"{prefix}.anchors"),
        box_lo=center - half,
        box_hi=center + half,
        scales=ad.exp(tape.param(f"{prefix}.log_scale")),
    )


def geometry_constants(tape, tess):
    return GeometryVars(
        anchors=tape.constant(tess.anchors),
        box_lo=tape.constant(tess.box_lo),
        box_hi=tape.constant(tess.box_hi),
        scales=tape.constant(tess.scales),
    )


def box_from_params(params, prefix):
    center = params[f"{prefix}.box_center"]
    half = np.logaddexp(0.0, params[f"{prefix}.box_raw"])
    return center - half, center + half


def tessellation_from_params(params, prefix):
    box_lo, box_hi = box_from_params(params, prefix)
    return new_tessellation(params[f"{prefix}.anchors"], box_lo, box_hi,
                            np.exp(params[f"{prefix}.log_scale"]))


def project_anchors(params, prefix, margin=PROJECTION_MARGIN):
    """把锚点裁剪到盒内（留 margin），返回被移动的锚点个数"""
    box_lo, box_hi = box_from_params(params, prefix)
    anchors = params[f"{prefix}.anchors"]
    margin = np.minimum(margin, 0.25 * (box_hi - box_lo))
    clipped = np.clip(anchors, box_lo + margin, box_hi - margin)
    moved = int(np.sum(np.any(clipped != anchors, axis=1)))
    if moved:
        params[f"{prefix}.anchors"] = clipped
        logger.debug(f"{prefix}: {moved} 个锚点被投影回盒内")
    return moved


def random_anchors(rng, num_cells, dim, std=0.5, bound=4.0, margin=PROJECTION_MARGIN):
    """i.i.d. N(0, std^2) 锚点，落在 [-bound, bound]^D 内，重复时重新采样"""
    anchors = np.clip(rng.normal(0.0, std, size=(num_cells, dim)), -bound + margin, bound - margin)
    for _ in range(100):
        if num_cells < 2 or np.min(pdist(anchors)) > MIN_ANCHOR_DISTANCE:
            return anchors
        dists = np.linalg.norm(anchors[:, None, :] - anchors[None, :, :], axis=2)
        dists[np.tril_indices(num_cells)] = np.inf
        clash = np.unique(np.nonzero(dists <= MIN_ANCHOR_DISTANCE)[1])
        anchors[clash] = np.clip(rng.normal(0.0, std, size=(len(clash), dim)), -bound + margin, bound - margin)
    raise DuplicateAnchors("多次重采样后锚点仍然重复")
