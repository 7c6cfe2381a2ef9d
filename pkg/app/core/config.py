"""
Configuração do StMt.

Camadas (a última ganha): defaults do modelo (perfil do artigo) < arquivo/perfil
< variáveis STMT__secao__chave < --set secao.chave=valor na linha de comando.
O formato de arquivo é chave=valor com chaves pontuadas; valores em JSON quando possível.
"""
import hashlib
import json
import os
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError, root_validator, validator

from app.core.exceptions import ConfigError
from app.schemas.dataset import PhantomConfig
from app.services.net_service import NetSpec

PROFILES_DIR = Path(__file__).resolve().parents[2] / "profiles"
ENV_PREFIX = "STMT__"

ABLATION_ARMS = ("baseline", "FSO", "ST-partial", "ST-partial+unlabeled", "FST", "MT", "StMt")


class TrainConfig(BaseModel):
    epochs: int = Field(500, ge=1)
    iters_per_epoch: int = Field(250, ge=1)
    batch_size: int = Field(2, ge=1)
    input_shape: Tuple[int, int, int] = (192, 192, 192)
    lr0: float = Field(0.01, ge=0)
    momentum: float = Field(0.99, ge=0, lt=1)
    nesterov: bool = True
    weight_decay: float = Field(3e-5, ge=0)
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(0.5, ge=0)
    lambda_tumor: float = Field(1.0, ge=0)
    ema_decay: float = Field(0.99, ge=0, le=1)
    aug_strength: float = Field(1.0, ge=0)
    student_noise_sigma: float = Field(0.0, ge=0)  # perturbação só no aluno (desligada por padrão)
    seed: Optional[int] = None  # None: derivada da seed global
    workers: int = Field(1, ge=1)

    class Config:
        extra = "forbid"

    @validator("input_shape")
    def _shape_positive(cls, v):
        if min(v) < 1:
            raise ValueError("input_shape precisa de dimensões >= 1")
        return v


class TrainSection(BaseModel):
    teacher: TrainConfig = TrainConfig(batch_size=2)
    stage1: TrainConfig = TrainConfig(batch_size=2, input_shape=(128, 128, 128))
    organ: TrainConfig = TrainConfig(batch_size=3)
    tumor: TrainConfig = TrainConfig(batch_size=2)

    class Config:
        extra = "forbid"

    @validator("organ")
    def _organ_batch(cls, v):
        if v.batch_size % 3:
            raise ValueError("organ.batch_size precisa ser múltiplo de 3 (rotulado, CPL e PL em proporções iguais)")
        return v


class NetsSection(BaseModel):
    base_channels: int = Field(16, ge=1)
    num_scales: int = Field(5, ge=1)
    blocks_per_scale: int = Field(1, ge=1)
    max_channels: int = Field(320, ge=1)

    class Config:
        extra = "forbid"

    def spec(self, num_classes: int) -> NetSpec:
        return NetSpec(in_channels=1, num_classes=num_classes, **self.dict())


class PipelineSection(BaseModel):
    stage1_shape: Tuple[int, int, int] = (128, 128, 128)
    stage2_shape: Tuple[int, int, int] = (192, 192, 192)
    margin_fraction: float = Field(0.1, ge=0)
    connectivity: int = 26
    postprocess: bool = True
    concurrent_stage2: bool = False
    body_threshold: float = -500.0
    tumor_weights: str = "teacher"

    class Config:
        extra = "forbid"

    @validator("connectivity")
    def _connectivity(cls, v):
        if v not in (6, 18, 26):
            raise ValueError("connectivity precisa ser 6, 18 ou 26")
        return v

    @validator("tumor_weights")
    def _tumor_weights(cls, v):
        if v not in ("teacher", "student"):
            raise ValueError("tumor_weights precisa ser 'teacher' ou 'student'")
        return v


class EvalSection(BaseModel):
    nsd_tolerance_mm: float = Field(1.0, gt=0)
    time_tolerance_s: float = Field(15.0, gt=0)
    memory_tolerance_mb: float = Field(4096.0, gt=0)
    sample_interval_s: float = Field(0.1, gt=0)
    memory_source: str = "auto"

    class Config:
        extra = "forbid"

    @validator("memory_source")
    def _source(cls, v):
        if v not in ("auto", "rss", "cuda"):
            raise ValueError("memory_source precisa ser auto, rss ou cuda")
        return v


class AblationSection(BaseModel):
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    arms: Tuple[str, ...] = ABLATION_ARMS

    class Config:
        extra = "forbid"

    @validator("arms")
    def _known_arms(cls, v):
        unknown = set(v) - set(ABLATION_ARMS)
        if unknown:
            raise ValueError(f"Braços desconhecidos: {sorted(unknown)}")
        return v


class RunConfig(BaseModel):
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    phantom: PhantomConfig = PhantomConfig()
    nets: NetsSection = NetsSection()
    train: TrainSection = TrainSection()
    pipeline: PipelineSection = PipelineSection()
    eval: EvalSection = EvalSection()
    ablation: AblationSection = AblationSection()

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _shapes_agree(cls, values):
        pipeline, train = values["pipeline"], values["train"]
        if train.stage1.input_shape != pipeline.stage1_shape:
            raise ValueError("train.stage1.input_shape precisa ser igual a pipeline.stage1_shape")
        for task in ("teacher", "organ", "tumor"):
            if getattr(train, task).input_shape != pipeline.stage2_shape:
                raise ValueError(f"train.{task}.input_shape precisa ser igual a pipeline.stage2_shape")
        return values

    def task_seed(self, task: str) -> int:
        explicit = getattr(self.train, task).seed
        offsets = {"teacher": 11, "stage1": 23, "organ": 37, "tumor": 53}
        return explicit if explicit is not None else self.seed * 1000 + offsets[task]


class Provenance(BaseModel):
    config_path: Optional[str] = None
    profile: Optional[str] = None
    env_overrides: List[str] = []
    cli_overrides: List[str] = []


# --- Leitura em camadas ---

def _decode(value: str):
    value = value.strip()
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _assign(tree: dict, dotted: str, value, origin: str):
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"Chave vazia em {origin}")
    node = tree
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Chave {dotted} ({origin}) atravessa um valor escalar")
        node = child
    node[keys[-1]] = value


def parse_cfg_text(text: str, origin: str = "<texto>") -> dict:
    """Lê linhas `secao.chave = valor`; '#' inicia comentário de linha."""
    tree: dict = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"Linha {number} de {origin} sem '=': {stripped}")
        key, value = stripped.split("=", 1)
        _assign(tree, key, _decode(value), f"{origin}:{number}")
    return tree


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_profile(profile: str) -> Path:
    path = PROFILES_DIR / f"{profile}.cfg"
    if not path.exists():
        raise ConfigError(f"Perfil desconhecido: {profile} (procurado em {PROFILES_DIR})")
    return path


def load_run_config(
    config_path: Optional[str] = None,
    profile: Optional[str] = None,
    overrides: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> Tuple[RunConfig, Provenance]:
    environ = os.environ if environ is None else environ
    # parte dos defaults completos: sobrescrever uma chave não zera as vizinhas
    tree: dict = json.loads(RunConfig().json())
    provenance = Provenance(profile=profile, config_path=config_path)

    # 1. Perfil e arquivo
    for path in ([resolve_profile(profile)] if profile else []) + ([Path(config_path)] if config_path else []):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Não foi possível ler a configuração {path}: {e}")
        tree = _merge(tree, parse_cfg_text(text, str(path)))

    # 2. Ambiente
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
            env_tree: dict = {}
            _assign(env_tree, dotted, _decode(environ[name]), name)
            tree = _merge(tree, env_tree)
            provenance.env_overrides.append(f"{dotted}={environ[name]}")

    # 3. Linha de comando
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override sem '=': {item}")
        key, value = item.split("=", 1)
        cli_tree: dict = {}
        _assign(cli_tree, key, _decode(value), "--set")
        tree = _merge(tree, cli_tree)
        provenance.cli_overrides.append(item)

    return build_run_config(tree), provenance


def build_run_config(tree: dict) -> RunConfig:
    try:
        return RunConfig.parse_obj(tree)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"Configuração inválida em '{where}': {first['msg']}")


# --- Eco da configuração resolvida ---

def _flatten(tree: dict, prefix: str = "") -> Dict[str, object]:
    flat = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def dump_run_config(cfg: RunConfig) -> str:
    flat = _flatten(json.loads(cfg.json()))
    return "".join(f"{key} = {json.dumps(flat[key])}\n" for key in sorted(flat))


def echo_with_provenance(cfg: RunConfig, provenance: Provenance) -> str:
    header = "".join(f"# {line}\n" for line in json.dumps(provenance.dict(), sort_keys=True).splitlines())
    return header + dump_run_config(cfg)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_run_config(cfg).encode("utf-8")).hexdigest()


def default_run_root() -> str:
    # Lida a cada chamada (mesmo esquema de variáveis do docker-compose)
    return os.getenv("STMT_RUN_ROOT", "runs")
