"""
Res-UNet 3D pequena, handle de modelo, vetor de parâmetros, EMA e checkpoints.

Arquitetura: `num_scales` reduções stride-2 (e o mesmo número de transposed convs),
blocos residuais com InstanceNorm + LeakyReLU(0.01), cabeça 1x1x1.
"""
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field

from app.core.exceptions import CheckpointError, InvalidArgumentError
from app.services.volume_service import LabelMap, Volume

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STMTCKPT"
CHECKPOINT_VERSION = 1
NEG_SLOPE = 1e-2


class NetSpec(BaseModel):
    in_channels: int = Field(1, ge=1)
    num_classes: int = Field(2, ge=2)
    base_channels: int = Field(16, ge=1)
    num_scales: int = Field(5, ge=1)
    blocks_per_scale: int = Field(1, ge=1)
    max_channels: int = Field(320, ge=1)

    class Config:
        extra = "forbid"
        allow_mutation = False

    def channels(self) -> List[int]:
        return [min(self.base_channels * 2 ** level, self.max_channels) for level in range(self.num_scales + 1)]

    @property
    def divisor(self) -> int:
        return 2 ** self.num_scales


# --- Blocos ---

class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_ch, affine=True)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_ch, affine=True)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride),
                nn.InstanceNorm3d(out_ch, affine=True),
            )

    def forward(self, x):
        out = F.leaky_relu(self.norm1(self.conv1(x)), NEG_SLOPE)
        out = self.norm2(self.conv2(out))
        identity = x if self.skip is None else self.skip(x)
        return F.leaky_relu(out + identity, NEG_SLOPE)


def _stage(in_ch: int, out_ch: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [ResidualBlock(in_ch, out_ch, stride)]
    layers += [ResidualBlock(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class ResUNet(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        ch = spec.channels()

        self.encoder = nn.ModuleList([_stage(spec.in_channels, ch[0], spec.blocks_per_scale, 1)])
        for level in range(1, spec.num_scales + 1):
            self.encoder.append(_stage(ch[level - 1], ch[level], spec.blocks_per_scale, 2))

        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(spec.num_scales)):
            self.upsample.append(nn.ConvTranspose3d(ch[level + 1], ch[level], 2, stride=2))
            self.decoder.append(_stage(2 * ch[level], ch[level], spec.blocks_per_scale, 1))

        self.head = nn.Conv3d(ch[0], spec.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # padding simétrico até múltiplo de 2^num_scales; recortado na saída
        shape = x.shape[2:]
        pads = []
        for size in reversed(shape):
            extra = (-size) % self.spec.divisor
            pads += [extra // 2, extra - extra // 2]
        if any(pads):
            x = F.pad(x, pads)

        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        for up, stage in zip(self.upsample, self.decoder):
            x = stage(torch.cat([up(x), skips.pop()], dim=1))
        logits = self.head(x)

        if any(pads):
            # F.pad lista os eixos do último para o primeiro
            w0, h0, d0 = pads[0], pads[2], pads[4]
            d, h, w = shape
            logits = logits[:, :, d0:d0 + d, h0:h0 + h, w0:w0 + w]
        return logits


def _init_he(module: nn.Module):
    if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(module.weight, a=NEG_SLOPE)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


# --- Handle e vetor de parâmetros ---

@dataclass(frozen=True)
class ParamVector:
    """Visão plana e ordenada do state_dict (parâmetros e buffers)."""
    names: Tuple[str, ...]
    tensors: Tuple[torch.Tensor, ...]

    def __len__(self):
        return len(self.tensors)

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors)


@dataclass
class ModelHandle:
    spec: NetSpec
    network: nn.Module
    seed: int = 0
    lineage: List[str] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return "train" if self.network.training else "eval"

    @property
    def parameters(self) -> ParamVector:
        return param_vector(self)

    def train(self):
        self.network.train()
        return self

    def eval(self):
        self.network.eval()
        return self


def build_model(spec: NetSpec, seed: int = 0) -> ModelHandle:
    """Inicialização He determinística dada a seed (não mexe no RNG global)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = ResUNet(spec)
        network.apply(_init_he)
    return ModelHandle(spec=spec, network=network, seed=seed, lineage=[f"build:seed={seed}"])


def count_parameters(m: ModelHandle) -> int:
    return sum(p.numel() for p in m.network.parameters())


def param_vector(m: ModelHandle) -> ParamVector:
    state = m.network.state_dict()
    return ParamVector(tuple(state.keys()), tuple(t.detach().clone() for t in state.values()))


def load_param_vector(m: ModelHandle, pv: ParamVector):
    state = m.network.state_dict()
    if tuple(state.keys()) != pv.names:
        raise InvalidArgumentError("ParamVector não está alinhado com o modelo")
    with torch.no_grad():
        for target, value in zip(state.values(), pv.tensors):
            target.copy_(value)


def ema_update(teacher: ParamVector, student: ParamVector, decay: float) -> ParamVector:
    """out_i = decay * teacher_i + (1 - decay) * student_i."""
    if not 0.0 <= decay <= 1.0:
        raise InvalidArgumentError(f"decay fora de [0, 1]: {decay}")
    if teacher.names != student.names or any(t.shape != s.shape for t, s in zip(teacher.tensors, student.tensors)):
        raise InvalidArgumentError("Vetores de parâmetros desalinhados para o EMA")

    out = []
    for t, s in zip(teacher.tensors, student.tensors):
        if not torch.is_floating_point(t):
            out.append(s.clone())
            continue
        out.append(decay * t + (1.0 - decay) * s)
    return ParamVector(teacher.names, tuple(out))


def ema_update_model(teacher: ModelHandle, student: ModelHandle, decay: float) -> ParamVector:
    """Aplica o EMA no modelo teacher. Retorna o novo vetor do teacher."""
    updated = ema_update(param_vector(teacher), param_vector(student), decay)
    load_param_vector(teacher, updated)
    return updated


def copy_model(m: ModelHandle, tag: str = "copy") -> ModelHandle:
    clone = build_model(m.spec, m.seed)
    load_param_vector(clone, param_vector(m))
    clone.lineage = m.lineage + [tag]
    return clone


# --- Inferência ---

def forward(m: ModelHandle, v: Volume) -> np.ndarray:
    """Logits (num_classes, D, H, W) para o volume inteiro, sem gradiente."""
    if not np.all(np.isfinite(v.data)):
        raise InvalidArgumentError("Entrada com valores não finitos")
    x = torch.from_numpy(np.ascontiguousarray(v.data, dtype=np.float32))[None, None]
    dtype = next(iter(m.network.parameters()), torch.empty(0)).dtype
    with torch.no_grad():
        logits = m.network(x.to(dtype))
    return logits[0].float().numpy()


def predict_label(m: ModelHandle, v: Volume) -> LabelMap:
    logits = forward(m, v)
    return LabelMap(logits.argmax(axis=0).astype(np.uint8), v.spacing, m.spec.num_classes)


# --- Checkpoints ---
#
# STMTCKPT | u32 versão | u32 tamanho do cabeçalho | cabeçalho JSON | payload float32 little-endian
# O cabeçalho lista nome, shape e dtype de cada tensor na ordem do state_dict.

def save_checkpoint(m: ModelHandle, path: str):
    pv = param_vector(m)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": m.spec.dict(),
        "seed": m.seed,
        "lineage": list(m.lineage),
        "tensors": [
            {"name": n, "shape": list(t.shape), "dtype": "f32"} for n, t in zip(pv.names, pv.tensors)
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = io.BytesIO()
    for t in pv.tensors:
        payload.write(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes(order="C"))

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload.getvalue())


def load_checkpoint(path: str, expected_spec: Optional[NetSpec] = None) -> ModelHandle:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"Não foi possível ler o checkpoint {path}: {e}")

    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < prefix or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Arquivo não é um checkpoint StMt: {path}")
    version, header_len = struct.unpack("<II", raw[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Versão de checkpoint {version} não suportada (esperado {CHECKPOINT_VERSION})")
    if len(raw) < prefix + header_len:
        raise CheckpointError("Checkpoint truncado no cabeçalho")

    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
        spec = NetSpec(**header["spec"])
        entries = header["tensors"]
    except Exception as e:
        raise CheckpointError(f"Cabeçalho de checkpoint corrompido: {e}")

    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"Checkpoint com spec {spec.dict()} incompatível com {expected_spec.dict()}")

    m = build_model(spec, int(header.get("seed", 0)))
    state = m.network.state_dict()
    if [e["name"] for e in entries] != list(state.keys()):
        raise CheckpointError("Lista de tensores do checkpoint não bate com a arquitetura")

    payload = raw[prefix + header_len:]
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 4
    if len(payload) != expected:
        raise CheckpointError(f"Checkpoint truncado: payload com {len(payload)} bytes, esperado {expected}")

    offset = 0
    tensors = []
    for entry, current in zip(entries, state.values()):
        count = int(np.prod(entry["shape"]))
        array = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        if tuple(array.shape) != tuple(current.shape):
            raise CheckpointError(f"Shape divergente em {entry['name']}")
        tensors.append(torch.from_numpy(array.astype(np.float32)))
        offset += count * 4

    load_param_vector(m, ParamVector(tuple(state.keys()), tuple(tensors)))
    m.lineage = list(header.get("lineage", []))
    return m.eval()
