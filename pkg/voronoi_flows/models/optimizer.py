"""Adam 优化器与小批量训练循环（早停 + 保留最佳参数）"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from ..errors import DivergedLoss
from .autodiff import Tape

logger = logging.getLogger("voronoi-flows.train")


class Adam:
    """自适应矩估计；只更新 ParameterSet 中可训练的参数"""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        for name in params.trainable_names():
            g = grads.get(name)
            if g is None:
                continue
            m = self.beta1 * self._m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self._v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    wall_seconds: float


@dataclass
class TrainingReport:
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = float("inf")
    stopped_early: bool = False

    @property
    def last_val_nll(self):
        return self.history[-1].val_nll if self.history else float("nan")

    def to_frame(self):
        return pd.DataFrame([asdict(r) for r in self.history],
                            columns=["epoch", "train_nll", "val_nll", "wall_seconds"])

    def to_dict(self):
        return {
            "history": [asdict(r) for r in self.history],
            "best_epoch": self.best_epoch,
            "best_val_nll": self.best_val_nll,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            history=[EpochRecord(**r) for r in data.get("history", [])],
            best_epoch=data.get("best_epoch", -1),
            best_val_nll=data.get("best_val_nll", float("inf")),
            stopped_early=data.get("stopped_early", False),
        )


def minibatches(num_examples, batch_size, rng):
    order = rng.permutation(num_examples)
    for start in range(0, num_examples, batch_size):
        yield order[start:start + batch_size]


def cosine_lr(base_lr, final_ratio, epoch, epochs):
    """第 epoch 轮 (从 1 开始) 的学习率, 从 base_lr 余弦退火到 base_lr * final_ratio"""
    if epochs <= 1 or final_ratio >= 1.0:
        return base_lr
    progress = (epoch - 1) / (epochs - 1)
    return base_lr * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + np.cos(np.pi * progress)))


def clip_gradients(grads, max_norm):
    """按全局 L2 范数缩放梯度; 返回裁剪前的范数"""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def _diverged(params, best_params, report, name, message):
    params.assign(best_params)
    logger.error(f"[{name}] {message}, 已恢复到第 {report.best_epoch} 轮的参数")
    return DivergedLoss(message, report=report)


def fit(params, batch_loss, num_examples, val_loss, optimizer_config, rng,
        project=None, name="train", report: Optional[TrainingReport] = None):
    """小批量梯度下降训练

    参数:
        params: ParameterSet，训练结束后恢复为验证集上最好的参数
        batch_loss: (tape, 样本下标, rng) -> 标量 Var（批内平均 NLL）
        num_examples: 训练样本数
        val_loss: () -> float，验证集平均 NLL
        optimizer_config: OptimizerSection
        rng: numpy Generator
        project: 每步更新后对参数做投影的回调

    返回:
        TrainingReport

    损失或梯度非有限、或前向/反向中抛出数值类错误时，参数恢复为最佳值并抛出 DivergedLoss。
    """
    report = report if report is not None else TrainingReport()
    base_lr = optimizer_config.learning_rate
    adam = Adam(lr=base_lr, beta1=optimizer_config.beta1,
                beta2=optimizer_config.beta2, eps=optimizer_config.eps)
    best_params = params.copy()
    bad_epochs = 0
    logger.info(f"[{name}] 开始训练: {num_examples} 个样本, lr={adam.lr:g}, "
                f"batch={optimizer_config.batch_size}, epochs={optimizer_config.epochs}")

    for epoch in range(1, optimizer_config.epochs + 1):
        start = time.perf_counter()
        adam.lr = cosine_lr(base_lr, optimizer_config.lr_final_ratio, epoch, optimizer_config.epochs)
        total, seen = 0.0, 0
        for batch in minibatches(num_examples, optimizer_config.batch_size, rng):
            tape = Tape(params)
            try:
                loss = batch_loss(tape, batch, rng)
                value = float(loss.value)
                grads = tape.backward(loss) if np.isfinite(value) else None
            except DivergedLoss:
                raise
            except ArithmeticError as exc:
                raise _diverged(params, best_params, report, name,
                                f"训练在第 {epoch} 轮出现数值错误 ({type(exc).__name__}: {exc})") from exc
            if grads is None or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise _diverged(params, best_params, report, name, f"训练在第 {epoch} 轮发散 (loss={value})")
            clip_gradients(grads, optimizer_config.clip_norm)
            adam.step(params, grads)
            if project is not None:
                project(params)
            total += value * len(batch)
            seen += len(batch)

        try:
            val = float(val_loss())
        except DivergedLoss:
            raise
        except ArithmeticError as exc:
            raise _diverged(params, best_params, report, name,
                            f"验证集评估在第 {epoch} 轮出现数值错误 ({type(exc).__name__}: {exc})") from exc
        record = EpochRecord(epoch=epoch, train_nll=total / seen, val_nll=val,
                             wall_seconds=time.perf_counter() - start)
        report.history.append(record)
        logger.info(f"[{name}] epoch {epoch}: train NLL={record.train_nll:.4f}, "
                    f"val NLL={val:.4f}, lr={adam.lr:.2e}, {record.wall_seconds:.1f}s")

        if not np.isfinite(val):
            raise _diverged(params, best_params, report, name, f"验证集 NLL 非有限 (epoch {epoch})")
        if val < report.best_val_nll:
            report.best_val_nll = val
            report.best_epoch = epoch
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= optimizer_config.patience:
                report.stopped_early = True
                logger.info(f"[{name}] 验证集 {bad_epochs} 轮未改善, 在第 {epoch} 轮早停 "
                            f"(最佳: 第 {report.best_epoch} 轮, {report.best_val_nll:.4f})")
                break

    params.assign(best_params)
    return report
