"""Voronoi flows 异常类型

所有领域错误都继承 VoronoiFlowError；输入校验类错误同时继承 ValueError，
数值类错误同时继承 ArithmeticError，方便调用方按常规方式捕获。
"""


class VoronoiFlowError(Exception):
    """Voronoi flows 所有异常的基类"""


# ============= 几何 / 镶嵌 =============
class ShapeMismatch(VoronoiFlowError, ValueError):
    pass


class DuplicateAnchors(VoronoiFlowError, ValueError):
    pass


class AnchorOutsideBox(VoronoiFlowError, ValueError):
    pass


class NonPositiveScale(VoronoiFlowError, ValueError):
    pass


class IndexOutOfRange(VoronoiFlowError, IndexError):
    pass


# ============= 胞腔映射 =============
class NegativeInput(VoronoiFlowError, ValueError):
    pass


class NonUnitDirection(VoronoiFlowError, ValueError):
    pass


class NonFiniteInput(VoronoiFlowError, ValueError):
    pass


class NoExit(VoronoiFlowError, ArithmeticError):
    """射线找不到出口约束，说明镶嵌数值已损坏"""


class PointOutsideCell(VoronoiFlowError, ValueError):
    pass


class AlphaOutOfRange(VoronoiFlowError, ArithmeticError):
    pass


class BoundaryPoint(VoronoiFlowError, ArithmeticError):
    pass


# ============= 自动微分 =============
class LogOfNonPositive(VoronoiFlowError, ArithmeticError):
    pass


class DivisionByZero(VoronoiFlowError, ArithmeticError):
    pass


class NonScalarRoot(VoronoiFlowError, ValueError):
    pass


class NonFiniteActivation(VoronoiFlowError, ArithmeticError):
    pass


# ============= 训练 =============
class DivergedLoss(VoronoiFlowError, ArithmeticError):
    """目标函数出现非有限值；report 保存中止前的训练记录"""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ============= 数据 =============
class EmptyFile(VoronoiFlowError, ValueError):
    pass


class RaggedRows(VoronoiFlowError, ValueError):
    pass


class BadRatios(VoronoiFlowError, ValueError):
    pass


class VocabMismatch(VoronoiFlowError, ValueError):
    pass


# ============= CLI / 配置 / 检查点 =============
class ConfigInvalid(VoronoiFlowError, ValueError):
    pass


class CheckpointVersionError(VoronoiFlowError, ValueError):
    pass


class NotTwoDimensional(VoronoiFlowError, ValueError):
    pass


class OutputLocked(VoronoiFlowError, RuntimeError):
    pass
