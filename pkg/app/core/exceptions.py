"""
Hierarquia de erros do StMt.
Cada erro carrega o código de saída que o CLI devolve (0 ok, 2 config, 3 artefato, 4 execução).
"""


class StmtError(Exception):
    exit_code = 4


class ConfigError(StmtError):
    exit_code = 2


class OutputExistsError(StmtError):
    exit_code = 2

    def __init__(self, path):
        super().__init__(f"Diretório de saída já existe: {path}. Use --force para sobrescrever.")
        self.path = path


class MissingArtifactError(StmtError):
    """Artefato de uma etapa anterior não encontrado. A mensagem diz qual subcomando produz."""
    exit_code = 3

    def __init__(self, artifact, producer: str):
        super().__init__(f"Artefato ausente: {artifact}. Rode antes o subcomando '{producer}'.")
        self.artifact = artifact
        self.producer = producer


class InvalidArgumentError(StmtError, ValueError):
    pass


class ShapeMismatchError(InvalidArgumentError):
    pass


class InvalidStatsError(InvalidArgumentError):
    pass


class EmptyForegroundError(StmtError, ValueError):
    pass


class PhantomConfigError(ConfigError):
    pass


class ManifestError(StmtError):
    def __init__(self, message: str, field: str = None):
        super().__init__(f"{message} (campo: {field})" if field else message)
        self.field = field


class CheckpointError(StmtError):
    pass


class EmptyPoolError(StmtError, ValueError):
    def __init__(self, pool: str):
        super().__init__(f"Pool de treino vazio: {pool}")
        self.pool = pool


class TrainingDivergedError(StmtError):
    pass


class CurveError(StmtError, ValueError):
    pass
