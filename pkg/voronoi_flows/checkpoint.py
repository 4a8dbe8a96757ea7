"""检查点读写

单个带版本号的 JSON 文本: 配置快照、全部参数（嵌套数值列表）、
词表和训练历史。浮点数按 repr 写出，读回再写出时逐字节一致。
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import CheckpointVersionError, ShapeMismatch
from .models.autodiff import ParameterSet

logger = logging.getLogger("voronoi-flows.checkpoint")

SCHEMA_VERSION = 1


class ParameterRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    shape: List[int]
    data: Any
    trainable: bool = True

    def to_array(self):
        value = np.asarray(self.data, dtype=np.float64)
        if list(value.shape) != self.shape:
            raise ShapeMismatch(f"参数 {self.name} 的数据形状 {list(value.shape)} 与记录的 {self.shape} 不符")
        return value


class Checkpoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    task: str
    config: Dict[str, Any]
    parameters: List[ParameterRecord]
    vocab: Optional[List[List[str]]] = None
    columns: Optional[List[str]] = None
    cardinalities: Optional[List[int]] = None
    history: Dict[str, Any] = Field(default_factory=dict)
    extra: Dict[str, Any] = Field(default_factory=dict)


def parameters_to_records(params):
    return [
        ParameterRecord(name=name, shape=list(value.shape), data=value.tolist(),
                        trainable=params.is_trainable(name))
        for name, value in params.items()
    ]


def records_to_parameters(records):
    params = ParameterSet()
    for record in records:
        params.add(record.name, record.to_array(), trainable=record.trainable)
    return params


def dumps(checkpoint):
    # python 模式保留 inf（json 模式会写成 null）
    return json.dumps(checkpoint.model_dump(), sort_keys=True, indent=1) + "\n"


def save(checkpoint, path):
    """写出检查点，先写临时文件再改名"""
    text = dumps(checkpoint)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)
    logger.info(f"检查点已保存: {path} ({len(checkpoint.parameters)} 个参数张量)")
    return path


def loads(text):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointVersionError(f"检查点不是合法的 JSON: {e}") from e
    version = raw.get("schema_version") if isinstance(raw, dict) else None
    if not isinstance(version, int):
        raise CheckpointVersionError("检查点缺少 schema_version")
    if version > SCHEMA_VERSION:
        raise CheckpointVersionError(f"检查点版本 {version} 高于当前支持的 {SCHEMA_VERSION}")
    try:
        return Checkpoint.model_validate(raw)
    except ValidationError as e:
        raise CheckpointVersionError(f"检查点结构无效: {e.error_count()} 处错误") from e


def load(path):
    with open(path, "r", encoding="utf-8") as f:
        checkpoint = loads(f.read())
    logger.info(f"已读取检查点 {path} (task={checkpoint.task}, 版本 {checkpoint.schema_version})")
    return checkpoint
