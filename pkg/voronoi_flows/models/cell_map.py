"""R^D 与 Voronoi 胞腔 V_k 之间的同胚 f_k

正向: 从锚点沿方向 δ 射出，求出胞腔边界上的出口距离 λ*，
再用 softsign 把相对距离 Δ/λ* 压缩到 [0, 1)。
雅可比是缩放单位阵加秩 2 修正，对数行列式只需要 D 维向量的内积。
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import (
    AlphaOutOfRange,
    NegativeInput,
    NoExit,
    NonFiniteInput,
    NonPositiveScale,
    NonUnitDirection,
    PointOutsideCell,
)
from . import autodiff as ad
from .tessellation import ConstraintId, GeometryVars, column_to_constraint, geometry_constants

logger = logging.getLogger("voronoi-flows.cell_map")

EPS_ANCHOR = 1e-12
EPS_DEN = 1e-12
UNIT_TOLERANCE = 1e-6


# ============= softsign 压缩 =============

def _check_scale(gamma):
    if np.any(np.asarray(gamma) <= 0):
        raise NonPositiveScale(f"gamma 必须为正: {gamma}")


def squash(h, gamma):
    """α(h) = γh / (1 + γh)"""
    if np.any(np.asarray(h) < 0):
        raise NegativeInput(f"squash 的输入必须非负: {h}")
    _check_scale(gamma)
    return gamma * h / (1.0 + gamma * h)


def squash_deriv(h, gamma):
    if np.any(np.asarray(h) < 0):
        raise NegativeInput(f"squash 的输入必须非负: {h}")
    _check_scale(gamma)
    return gamma / (1.0 + gamma * h) ** 2


def squash_inv(a, gamma):
    if np.any(np.asarray(a) < 0):
        raise NegativeInput(f"squash_inv 的输入必须非负: {a}")
    if np.any(np.asarray(a) >= 1):
        raise AlphaOutOfRange(f"squash_inv 的输入必须小于 1: {a}")
    _check_scale(gamma)
    return a / (gamma * (1.0 - a))


# ============= 射线出口 =============

def ray_exit(tess, k, direction):
    """沿单位方向 δ 从锚点 x_k 出发，返回 (λ*, 出口约束)"""
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise NonUnitDirection(f"方向向量的范数为 {norm:.9f}")
    normals, offsets, ids = tess.constraint_arrays(k)
    den = normals @ direction
    num = offsets - normals @ tess.anchors[k]
    valid = den > EPS_DEN
    lam = np.full(len(ids), np.inf)
    lam[valid] = num[valid] / den[valid]
    lam[lam <= 0] = np.inf
    best = int(np.argmin(lam))
    if not np.isfinite(lam[best]):
        raise NoExit(f"胞腔 {k} 沿方向 {direction} 没有出口约束")
    return float(lam[best]), ids[best]


def _active_normal(tess, k, active):
    if active.kind == "voronoi":
        return 2.0 * (tess.anchors[active.index] - tess.anchors[k])
    normal = np.zeros(tess.dim)
    normal[active.index] = -1.0 if active.kind == "box_lower" else 1.0
    return normal


def lambda_star_gradient(tess, k, direction):
    """∂λ*/∂δ = -λ* a / (a^T δ)，出口约束固定"""
    lam, active = ray_exit(tess, k, direction)
    normal = _active_normal(tess, k, active)
    return -lam * normal / float(normal @ direction)


# ============= 批量映射（Tape 上） =============

class BatchMapResult(NamedTuple):
    point: ad.Var
    logdet: ad.Var
    lambda_star: ad.Var
    active: np.ndarray
    direction: ad.Var
    delta: ad.Var
    alpha: ad.Var


def _rank_two_logdet(dim, c, s1, s2, v1, direction):
    """log|det(cI + s1 δ v1^T + s2 δ δ^T)|，只用 D 维内积"""
    vd = ad.dot(v1, direction)
    dd = ad.dot(direction, direction)
    w11 = s1 * vd / c
    w12 = s2 * vd / c
    w21 = s1 * dd / c
    w22 = s2 * dd / c
    one_w11 = 1.0 + w11
    return (ad.log(ad.abs(one_w11))
            + ad.log(ad.abs(1.0 + w22 - w12 * w21 / one_w11))
            + float(dim) * ad.log(c))


def _ray_geometry(geom, ks, xk, diff):
    """方向、半径、λ* 与 ∂λ*/∂δ

    diff 是已经做过锚点钳制的 x - x_k。
    """
    num_points, dim = diff.shape
    num_cells = geom.anchors.shape[0]
    ks = np.asarray(ks, dtype=np.int64)

    delta = ad.sqrt(ad.sum(ad.square(diff), axis=1))
    direction = diff / ad.reshape(delta, (num_points, 1))

    # Voronoi 约束: 分子化简为 |x_i - x_k|^2（只依赖锚点对，K×K），
    # 分母 2 (x_i - x_k)^T δ = 2 (x_i^T δ - x_k^T δ)
    pair = ad.reshape(geom.anchors, (1, num_cells, dim)) - ad.reshape(geom.anchors, (num_cells, 1, dim))
    num_voronoi = ad.take(ad.sum(ad.square(pair), axis=2), ks)
    projected = ad.matmul(direction, ad.transpose(geom.anchors))
    den_voronoi = 2.0 * (projected - ad.reshape(ad.dot(xk, direction), (num_points, 1)))
    # 盒约束: 每个坐标的出口为 (x_k - lo) / (-δ_d) 或 (hi - x_k) / δ_d
    num_lower = xk - ad.reshape(geom.box_lo, (1, dim))
    num_upper = ad.reshape(geom.box_hi, (1, dim)) - xk

    num = ad.concat([num_voronoi, num_lower, num_upper], axis=1)
    den = ad.concat([den_voronoi, -direction, direction], axis=1)

    columns = np.arange(num_cells + 2 * dim)
    valid = (den.value > EPS_DEN) & (columns[None, :] != ks[:, None])
    if not np.all(np.any(valid, axis=1)):
        raise NoExit("存在没有有效出口约束的射线")
    lam = num / ad.where(valid, den, 1.0)
    lambda_star, active = ad.select_min_positive(lam, valid)

    normal = _winning_normal(geom, ks, xk, active)
    v1 = -ad.reshape(lambda_star, (num_points, 1)) * normal / ad.reshape(ad.dot(normal, direction), (num_points, 1))
    return delta, direction, lambda_star, active, v1


def _winning_normal(geom, ks, xk, active):
    """只取出口约束的法向: Voronoi 为 x_i - x_k，盒约束为 ∓e_d"""
    num_cells = geom.anchors.shape[0]
    num_points, dim = xk.shape
    voronoi = active < num_cells
    normal = ad.take(geom.anchors, np.where(voronoi, active, ks)) - xk
    if np.all(voronoi):
        return normal
    box = np.zeros((num_points, dim))
    rows = np.flatnonzero(~voronoi)
    face = active[rows] - num_cells
    box[rows, face % dim] = np.where(face < dim, -1.0, 1.0)
    return ad.where(voronoi[:, None], normal, box)


def _clamped_offset(x, xk, eps_anchor):
    diff = x - xk
    near = np.sum(diff.value ** 2, axis=1) < eps_anchor ** 2
    if np.any(near):
        substitute = np.zeros(diff.shape[1])
        substitute[0] = eps_anchor
        diff = ad.where(near[:, None], substitute, diff)
    return diff, near


def _check_finite(x, name):
    if not np.all(np.isfinite(x.value)):
        raise NonFiniteInput(f"{name} 含有非有限值")


def map_forward(tape, geom, ks, x, eps_anchor=EPS_ANCHOR):
    """批量正向映射 z = f_k(x)

    参数:
        tape: Tape
        geom: GeometryVars
        ks: 长度 N 的胞腔下标
        x: N×D 的 Var 或数组

    返回:
        BatchMapResult，logdet 为 log|det ∂f/∂x|
    """
    ks = np.asarray(ks, dtype=np.int64)
    x = tape.lift(x)
    _check_finite(x, "x")
    xk = ad.take(geom.anchors, ks)
    diff, near = _clamped_offset(x, xk, eps_anchor)
    delta, direction, lambda_star, active, v1 = _ray_geometry(geom, ks, xk, diff)

    gamma = ad.take(geom.scales, ks)
    ratio = delta / lambda_star
    denom = 1.0 + gamma * ratio
    alpha = gamma * ratio / denom
    alpha_prime = gamma / ad.square(denom)

    radius = alpha * lambda_star
    point = xk + ad.reshape(radius, (-1, 1)) * direction
    if np.any(near):
        point = ad.where(near[:, None], xk, point)

    logdet = _forward_logdet(x.shape[1], delta, lambda_star, alpha, alpha_prime, v1, direction)
    return BatchMapResult(point, logdet, lambda_star, active, direction, delta, alpha)


def _forward_logdet(dim, delta, lambda_star, alpha, alpha_prime, v1, direction):
    vd = ad.dot(v1, direction)
    c = alpha * lambda_star / delta
    s1 = alpha / delta - alpha_prime / lambda_star
    s2 = alpha_prime - c - (alpha / delta) * vd + (alpha_prime / lambda_star) * vd
    return _rank_two_logdet(dim, c, s1, s2, v1, direction)


def map_inverse(tape, geom, ks, z, eps_anchor=EPS_ANCHOR):
    """批量逆映射 x = f_k^{-1}(z)，logdet 为 log|det ∂f^{-1}/∂z|

    调用方需保证 z[n] 位于胞腔 ks[n] 内；否则可能抛出 AlphaOutOfRange。
    """
    ks = np.asarray(ks, dtype=np.int64)
    z = tape.lift(z)
    _check_finite(z, "z")
    xk = ad.take(geom.anchors, ks)
    diff, near = _clamped_offset(z, xk, eps_anchor)
    radius, direction, lambda_star, active, v1 = _ray_geometry(geom, ks, xk, diff)

    alpha = radius / lambda_star
    if np.any(alpha.value >= 1.0):
        bad = int(np.sum(alpha.value >= 1.0))
        raise AlphaOutOfRange(f"{bad} 个点的相对半径 >= 1，不在胞腔内部")

    gamma = ad.take(geom.scales, ks)
    one_minus = 1.0 - alpha
    ratio = alpha / (gamma * one_minus)
    delta = ratio * lambda_star
    point = xk + ad.reshape(delta, (-1, 1)) * direction
    if np.any(near):
        point = ad.where(near[:, None], xk, point)

    # dα/dΔ̃ = 1 / (dα^{-1}/dα) = γ (1 - α)^2
    alpha_prime = gamma * ad.square(one_minus)
    logdet = -_forward_logdet(z.shape[1], delta, lambda_star, alpha, alpha_prime, v1, direction)
    return BatchMapResult(point, logdet, lambda_star, active, direction, delta, alpha)


# ============= 单点接口 =============

@dataclass
class MapResult:
    point: np.ndarray
    logdet: float
    lambda_star: float
    active_constraint: ConstraintId
    direction: np.ndarray
    delta: float
    delta_star: float
    alpha_val: float


def _single(tess, k, x, mapper):
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    tape = ad.Tape(record=False)
    result = mapper(tape, geometry_constants(tape, tess), np.array([tess.check_index(k)]), x)
    lam = float(result.lambda_star.value[0])
    return MapResult(
        point=result.point.value[0].copy(),
        logdet=float(result.logdet.value[0]),
        lambda_star=lam,
        active_constraint=column_to_constraint(result.active[0], tess.num_cells, tess.dim),
        direction=result.direction.value[0].copy(),
        delta=float(result.delta.value[0]),
        delta_star=lam,
        alpha_val=float(result.alpha.value[0]),
    )


def forward(tess, k, x):
    """z = f_k(x)，见 map_forward"""
    return _single(tess, k, x, map_forward)


def inverse(tess, k, z):
    if not tess.contains(k, z):
        raise PointOutsideCell(f"点 {np.asarray(z).tolist()} 不在胞腔 {k} 内")
    return _single(tess, k, z, map_inverse)


def dense_jacobian_reference(tess, k, x):
    """显式构造 cI + u1 v1^T + u2 v2^T（仅用于测试）"""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("x 含有非有限值")
    k = tess.check_index(k)
    diff = x - tess.anchors[k]
    if np.linalg.norm(diff) < EPS_ANCHOR:
        diff = np.zeros(tess.dim)
        diff[0] = EPS_ANCHOR
    delta = np.linalg.norm(diff)
    direction = diff / delta
    lam, active = ray_exit(tess, k, direction)
    normal = _active_normal(tess, k, active)
    v1 = -lam * normal / float(normal @ direction)

    gamma = tess.scales[k]
    ratio = delta / lam
    alpha = squash(ratio, gamma)
    alpha_prime = squash_deriv(ratio, gamma)
    vd = float(v1 @ direction)
    c = alpha * lam / delta
    s1 = alpha / delta - alpha_prime / lam
    s2 = alpha_prime - c - (alpha / delta) * vd + (alpha_prime / lam) * vd
    return (c * np.eye(tess.dim)
            + s1 * np.outer(direction, v1)
            + s2 * np.outer(direction, direction))


def relative_radius(geom, ks, z, eps_anchor=EPS_ANCHOR):
    """α̃ = |z - x_k| / λ*（纯数值，不记录梯度）；α̃ < 1 等价于 z 在胞腔内部"""
    tape = ad.Tape(record=False)
    values = GeometryVars(*(tape.constant(g.value) for g in geom))
    ks = np.asarray(ks, dtype=np.int64)
    xk = ad.take(values.anchors, ks)
    diff, _ = _clamped_offset(tape.constant(z), xk, eps_anchor)
    radius, _, lambda_star, _, _ = _ray_geometry(values, ks, xk, diff)
    return radius.value / lambda_star.value
