"""异常类型"""

from typing import Any, Optional


class DpFedSamError(Exception):
    """所有 dp_fedsam 异常的基类"""


class ConfigError(DpFedSamError, ValueError):
    """配置无效 (CLI 退出码 2)"""


class NumericalError(DpFedSamError, ArithmeticError):
    """数值溢出或出现非有限值"""


class ModelError(NumericalError):
    """前向/反向传播中出现非有限值"""

    def __init__(self, message: str, layer: int):
        super().__init__(f"{message} (layer={layer})")
        self.layer = layer


class PrivacyAccountingError(DpFedSamError, ValueError):
    """隐私核算失败"""

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BoundDomainError(DpFedSamError, ValueError):
    """理论界的输入超出有效范围"""


class DataFormatError(DpFedSamError, ValueError):
    """数据文件格式错误"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"第 {line} 行: {message}"
        super().__init__(message)
        self.line = line


class PartitionError(DpFedSamError, ValueError):
    """数据划分失败"""


class EngineAbort(DpFedSamError, RuntimeError):
    """训练过程中止 (CLI 退出码 1)"""

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
