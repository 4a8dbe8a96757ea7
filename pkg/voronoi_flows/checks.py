"""不变量自检套件（`voronoi-flows check`）

每一项在随机实例上把快速实现与独立的慢速参照比较:
二分法求出口距离、显式雅可比矩阵、中心差分、网格求积、逐分量混合。
"""

import logging
import time
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .config import config_from_dict
from .models import autodiff as ad
from .models.cell_map import (
    dense_jacobian_reference,
    forward,
    map_forward,
    map_inverse,
    ray_exit,
    relative_radius,
    squash,
    squash_deriv,
)
from .models.dequant import DequantModel, JointDensity, elbo_loss
from .models.mixture import MixtureModel, mixture_logprob, mixture_logprob_bruteforce
from .models.tessellation import (
    geometry_constants,
    geometry_vars,
    new_tessellation,
    register_geometry,
)

logger = logging.getLogger("voronoi-flows.checks")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def random_tessellation(rng, num_cells, dim, half_width=2.0, scale_range=(0.5, 2.0)):
    anchors = rng.uniform(-0.8 * half_width, 0.8 * half_width, size=(num_cells, dim))
    bound = np.full(dim, half_width)
    scales = rng.uniform(*scale_range, size=num_cells)
    return new_tessellation(anchors, -bound, bound, scales)


def random_unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def bisect_exit(tess, k, direction, iterations=200):
    """沿射线二分 contains 谓词，得到出口距离的参照值"""
    normals, offsets, _ = tess.constraint_arrays(k)
    origin = tess.anchors[k]

    def inside(lam):
        return bool(np.all(normals @ (origin + lam * direction) < offsets))

    lo = 0.0
    hi = 2.0 * float(np.linalg.norm(tess.box_hi - tess.box_lo)) + 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * (1.0 + hi):
            break
    return 0.5 * (lo + hi)


def small_config(**sections):
    raw = {
        "network": {"hidden_layers": 1, "hidden_units": 8, "cond_embed_dim": 3},
        "tessellation": {"init_bound": 2.0},
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            raw.setdefault(name, {}).update(values)
        else:
            raw[name] = values
    return config_from_dict(raw)


def perturb(params, rng, prefix, std=0.1):
    """让零初始化的耦合块变成非恒等映射"""
    for name in params.names():
        if name.startswith(prefix):
            params[name] = params[name] + rng.normal(0.0, std, size=params[name].shape)


class InvariantSuite:
    """按顺序执行各项检查并汇总为通过 / 失败表格

    参数:
        seed: 随机实例的种子
        scale: 试验次数的缩放系数（单元测试用小于 1 的值）
    """

    def __init__(self, seed=0, scale=1.0):
        self.seed = seed
        self.scale = float(scale)
        self.results = []
        self.checks = [
            ("出口距离 λ* 与二分法一致", self.check_lambda_star),
            ("正逆映射互为逆且 logdet 相反", self.check_bijection),
            ("logdet 与显式雅可比一致", self.check_logdet_dense),
            ("logdet 与差分雅可比一致", self.check_logdet_finite_difference),
            ("几何参数梯度与差分一致", self.check_geometry_gradients),
            ("ELBO 梯度与差分一致", self.check_elbo_gradients),
            ("q(x|y) 在胞腔内积分为 1", self.check_dequant_normalization),
            ("Voronoi 混合在盒内积分为 1", self.check_mixture_normalization),
            ("混合密度与逐分量求和一致", self.check_mixture_bruteforce),
            ("混合密度耗时与 K 无关", self.check_mixture_timing),
        ]

    def trials(self, n):
        return max(1, int(round(n * self.scale)))

    def rng(self, offset):
        return np.random.default_rng(self.seed * 1000 + offset)

    # ---------- 几何 ----------

    def check_lambda_star(self):
        rng = self.rng(1)
        worst = 0.0
        for _ in range(self.trials(10000)):
            dim = int(rng.integers(1, 9))
            num_cells = int(rng.integers(2, 33))
            tess = random_tessellation(rng, num_cells, dim)
            k = int(rng.integers(num_cells))
            direction = random_unit(rng, dim)
            lam, _ = ray_exit(tess, k, direction)
            reference = bisect_exit(tess, k, direction)
            worst = max(worst, abs(lam - reference) / (1.0 + lam))
        return worst <= 1e-8, f"最大相对误差 {worst:.2e}"

    def check_bijection(self):
        rng = self.rng(2)
        per_instance = 1000
        worst_x, worst_z, worst_ld = 0.0, 0.0, 0.0
        for _ in range(max(1, self.trials(10000) // per_instance)):
            dim = int(rng.integers(1, 9))
            num_cells = int(rng.integers(2, 17))
            tess = random_tessellation(rng, num_cells, dim)
            tape = ad.Tape(record=False)
            geom = geometry_constants(tape, tess)

            ks = rng.integers(num_cells, size=per_instance)
            x = tess.anchors[ks] + rng.normal(0.0, 1.0, size=(per_instance, dim))
            fwd = map_forward(tape, geom, ks, x)
            back = map_inverse(tape, geom, ks, fwd.point)
            scale = np.maximum(1.0, np.linalg.norm(x, axis=1))
            worst_x = max(worst_x, float(np.max(np.linalg.norm(back.point.value - x, axis=1) / scale)))
            worst_ld = max(worst_ld, float(np.max(np.abs(fwd.logdet.value + back.logdet.value))))

            z = rng.uniform(tess.box_lo, tess.box_hi, size=(per_instance, dim))
            kz = tess.locate_batch(z)
            keep = relative_radius(geom, kz, z) < 1.0 - 1e-6
            inv = map_inverse(tape, geom, kz[keep], z[keep])
            again = map_forward(tape, geom, kz[keep], inv.point)
            worst_z = max(worst_z, float(np.max(np.linalg.norm(again.point.value - z[keep], axis=1))))
        passed = worst_x <= 1e-9 and worst_z <= 1e-9 and worst_ld <= 1e-9
        return passed, f"x 往返 {worst_x:.2e}, z 往返 {worst_z:.2e}, logdet 和 {worst_ld:.2e}"

    # ---------- 对数行列式 ----------

    def _logdet_instances(self, rng, dims, per_dim):
        for dim in dims:
            tess = random_tessellation(rng, 8, dim)
            for _ in range(per_dim):
                k = int(rng.integers(8))
                x = tess.anchors[k] + rng.normal(0.0, 0.7, size=dim)
                yield tess, k, x

    def check_logdet_dense(self):
        rng = self.rng(3)
        worst = 0.0
        for tess, k, x in self._logdet_instances(rng, (1, 2, 3, 4, 8, 16, 32, 64), self.trials(25)):
            fast = forward(tess, k, x).logdet
            _, reference = np.linalg.slogdet(dense_jacobian_reference(tess, k, x))
            worst = max(worst, abs(fast - reference) / max(1.0, abs(reference)))
        return worst <= 1e-10, f"最大相对误差 {worst:.2e}"

    def check_logdet_finite_difference(self, step=1e-6):
        rng = self.rng(4)
        worst = 0.0
        for tess, k, x in self._logdet_instances(rng, (1, 2, 3, 4, 8, 16), self.trials(10)):
            jac = np.empty((tess.dim, tess.dim))
            for j in range(tess.dim):
                e = np.zeros(tess.dim)
                e[j] = step
                jac[:, j] = (forward(tess, k, x + e).point - forward(tess, k, x - e).point) / (2.0 * step)
            _, reference = np.linalg.slogdet(jac)
            fast = forward(tess, k, x).logdet
            worst = max(worst, abs(fast - reference) / max(1.0, abs(reference)))
        return worst <= 1e-4, f"最大相对误差 {worst:.2e}"

    # ---------- 梯度 ----------

    def check_geometry_gradients(self):
        rng = self.rng(5)
        worst = 0.0
        for dim in (1, 2, 3, 5):
            tess = random_tessellation(rng, 6, dim)
            params = ad.ParameterSet()
            register_geometry(params, "geom", tess.anchors, tess.box_lo, tess.box_hi, tess.scales)
            ks = rng.integers(6, size=self.trials(20))
            x = tess.anchors[ks] + rng.normal(0.0, 0.7, size=(len(ks), dim))

            def logdet_sum(tape):
                return ad.sum(map_forward(tape, geometry_vars(tape, "geom"), ks, x).logdet)

            worst = max(worst, ad.grad_check(logdet_sum, params, step=1e-5, rng=rng, atol=1e-3))
        return worst <= 1e-4, f"最大相对误差 {worst:.2e}"

    def check_elbo_gradients(self):
        rng = self.rng(6)
        config = small_config(dequant={"embed_dim": 2, "num_blocks": 2}, density={"num_blocks": 2})
        params = ad.ParameterSet()
        model = DequantModel.build(params, [3, 2], config, rng)
        density = JointDensity.build(params, model.total_dim, config, rng)
        perturb(params, rng, "dequant.flow")
        perturb(params, rng, "density")
        y = np.stack([rng.integers(3, size=8), rng.integers(2, size=8)], axis=1)
        noise = model.draw_noise(len(y), rng)

        def loss(tape):
            return elbo_loss(tape, model, density, y, num_samples=1, noise=noise)

        worst = ad.grad_check(loss, params, step=1e-5, max_coords=self.trials(6), rng=rng)
        return worst <= 1e-3, f"最大相对误差 {worst:.2e}"

    # ---------- 归一化 ----------

    @staticmethod
    def _grid(lo, hi, size):
        xs = lo[0] + (np.arange(size) + 0.5) * (hi[0] - lo[0]) / size
        ys = lo[1] + (np.arange(size) + 0.5) * (hi[1] - lo[1]) / size
        gx, gy = np.meshgrid(xs, ys)
        area = (hi[0] - lo[0]) * (hi[1] - lo[1]) / size ** 2
        return np.stack([gx.ravel(), gy.ravel()], axis=1), area

    def check_dequant_normalization(self, size=400, radius=12.0):
        """以锚点为极点做极坐标求积

        半径方向在压缩之前的偏移量 Δ 上取中点，边界附近被压缩的区域因此不会欠采样。
        """
        rng = self.rng(7)
        config = small_config(dequant={"embed_dim": 2, "num_blocks": 2})
        params = ad.ParameterSet()
        model = DequantModel.build(params, [3], config, rng)
        perturb(params, rng, "dequant.flow")
        tess = model.tessellation(0)
        angles = (np.arange(size) + 0.5) * 2.0 * np.pi / size
        offsets = (np.arange(size) + 0.5) * radius / size
        directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        masses = []
        for y in range(3):
            gamma = float(tess.scales[y])
            exits = np.array([ray_exit(tess, y, d)[0] for d in directions])
            relative = offsets[None, :] / exits[:, None]
            t = squash(relative, gamma)
            points = tess.anchors[y] + (t * exits[:, None])[..., None] * directions[:, None, :]
            # r dr = tλ · λ α'(Δ/λ) dΔ/λ
            weight = t * exits[:, None] * squash_deriv(relative, gamma)
            logq = model.log_q_tape(ad.Tape(params, record=False), points.reshape(-1, 2),
                                    np.full((size * size, 1), y))
            integrand = np.exp(logq.value).reshape(size, size) * weight
            masses.append(float(np.sum(integrand) * (2.0 * np.pi / size) * (radius / size)))
        worst = max(abs(m - 1.0) for m in masses)
        return worst <= 1e-2, "各取值的积分 " + ", ".join(f"{m:.4f}" for m in masses)

    def _mixture(self, rng, num_components, **network):
        config = small_config(network=network or {"hidden_layers": 1, "hidden_units": 8},
                              mixture={"num_components": num_components, "comp_flow_blocks": 2,
                                       "comp_base_std": 0.4, "box_margin": 0.5})
        train_x = rng.normal(0.0, 1.5, size=(500, 2))
        params = ad.ParameterSet()
        mix = MixtureModel.build(params, train_x, config, rng)
        perturb(params, rng, "mixture.comp")
        params[mix.logits_name] = rng.normal(0.0, 0.5, size=num_components)
        return mix

    def check_mixture_normalization(self, size=400):
        rng = self.rng(8)
        mix = self._mixture(rng, 5)
        tess = mix.tessellation()
        points, area = self._grid(tess.box_lo, tess.box_hi, size)
        total = float(np.sum(np.exp(mixture_logprob(mix, points))) * area)
        return abs(total - 1.0) <= 1e-2, f"积分 {total:.4f}"

    def check_mixture_bruteforce(self):
        rng = self.rng(9)
        mix = self._mixture(rng, 5)
        tess = mix.tessellation()
        points = rng.uniform(tess.box_lo, tess.box_hi, size=(self.trials(10000), 2))
        tape = ad.Tape(mix.params, record=False)
        alpha = relative_radius(geometry_vars(tape, mix.tess_prefix), tess.locate_batch(points), points)
        points = points[alpha < 1.0 - 1e-6]
        fast = mixture_logprob(mix, points)
        slow = mixture_logprob_bruteforce(mix, points)
        worst = float(np.max(np.abs(fast - slow) / np.maximum(1.0, np.abs(slow))))
        return worst <= 1e-12, f"{len(points)} 个点, 最大相对误差 {worst:.2e}"

    def check_mixture_timing(self, num_points=4096, repeats=5):
        rng = self.rng(10)
        timings = {}
        for k in (4, 64):
            mix = self._mixture(rng, k, hidden_layers=2, hidden_units=128)
            tess = mix.tessellation()
            points = rng.uniform(tess.box_lo, tess.box_hi, size=(num_points, 2))
            mixture_logprob(mix, points)
            best = np.inf
            for _ in range(repeats):
                start = time.perf_counter()
                mixture_logprob(mix, points)
                best = min(best, time.perf_counter() - start)
            timings[k] = best
        ratio = timings[64] / timings[4]
        return ratio <= 1.5, f"K=4: {timings[4]:.3f}s, K=64: {timings[64]:.3f}s, 比值 {ratio:.2f}"

    # ---------- 运行 ----------

    def run(self, only=None):
        self.results = []
        for name, check in self.checks:
            if only is not None and name not in only:
                continue
            start = time.perf_counter()
            try:
                passed, detail = check()
            except Exception as e:  # noqa: BLE001
                logger.exception(f"检查 {name} 抛出异常")
                passed, detail = False, f"{type(e).__name__}: {e}"
            result = CheckResult(name, bool(passed), detail, time.perf_counter() - start)
            self.results.append(result)
            logger.info(f"{'通过' if result.passed else '失败'}: {name} ({result.seconds:.1f}s) {detail}")
        return self.results

    @property
    def all_passed(self):
        return all(r.passed for r in self.results)

    def report(self):
        lines = ["=" * 80, "📊 不变量自检报告", "=" * 80,
                 f"时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
                 f"种子: {self.seed}"]
        for r in self.results:
            status = "✅" if r.passed else "❌"
            lines.append(f"{status} {r.name} ({r.seconds:.1f}s)")
            lines.append(f"    {r.detail}")
        passed = sum(r.passed for r in self.results)
        lines.append(f"\n🎯 {passed}/{len(self.results)} 项通过")
        lines.append("🎉 所有检查通过" if self.all_passed else "❌ 存在失败的检查")
        return "\n".join(lines)
