"""
errors.py — исключения проекта.

Библиотечные функции бросают исключения; ловят их только слои оркестрации
(ячейки свипа, CLI), которые логируют и решают, что делать дальше.
"""


class LipddError(Exception):
    """Корень всех ошибок проекта"""


class ConfigError(LipddError, ValueError):
    """Ошибка конфигурации. key — ключ в виде section.name (или путь к файлу)"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ShapeMismatchError(LipddError, ValueError):
    pass


class NonFiniteError(LipddError, ValueError):
    pass


class OracleSizeError(LipddError, ValueError):
    pass


class AdjointCheckError(LipddError, ValueError):
    """apply и apply_adjoint не сопряжены на паре pair_index"""

    def __init__(self, pair_index: int, lhs: float, rhs: float):
        self.pair_index = pair_index
        self.lhs = lhs
        self.rhs = rhs
        super().__init__(
            f"проверка сопряжённости провалена на паре #{pair_index}: "
            f"<Av,u>={lhs!r}, <v,A^T u>={rhs!r}"
        )


class UnknownLossError(LipddError, ValueError):
    pass


class LabelRangeError(LipddError, ValueError):
    pass


class TrainingDivergedError(LipddError):
    """Нечисловой loss во время обучения"""

    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        self.value = value
        super().__init__(f"обучение разошлось на эпохе {epoch}: loss={value!r}")


class DatasetFormatError(LipddError, ValueError):
    """Нарушение формата файла данных. row — номер строки/записи (1-based) или None"""

    def __init__(self, path, row: int | None, message: str):
        self.path = path
        self.row = row
        where = f"{path}" if row is None else f"{path}, строка {row}"
        super().__init__(f"{where}: {message}")


class EnsembleError(LipddError, ValueError):
    pass


class PlotKindError(LipddError, ValueError):
    pass


class RunLockedError(LipddError):
    pass


class ArchitectureError(LipddError, ValueError):
    pass


class CheckpointError(LipddError, ValueError):
    pass


class BoundOrderingError(LipddError):
    """Нарушен порядок c_avg_norm ≤ c_lower ≤ c_probe ≤ c_upper"""


class EmptyTableError(LipddError, ValueError):
    pass
