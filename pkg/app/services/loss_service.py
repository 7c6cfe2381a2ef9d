"""
Funções de perda: dice + cross-entropy e as combinações dos ramos de órgão e tumor.
"""
from typing import Dict, Sequence, Tuple

import torch
import torch.nn.functional as F

from app.core.exceptions import InvalidArgumentError, ShapeMismatchError
from app.services.sample_service import SampleKind

SMOOTH = 1e-5


def _as_batch(logits: torch.Tensor, target: torch.Tensor):
    target = torch.as_tensor(target)
    if logits.dim() == 4:
        logits = logits.unsqueeze(0)
    if target.dim() == 3:
        target = target.unsqueeze(0)
    if logits.dim() != 5 or target.dim() != 4:
        raise ShapeMismatchError(f"Esperado logits (N,C,D,H,W) e alvo (N,D,H,W); recebeu {tuple(logits.shape)} e {tuple(target.shape)}")
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeMismatchError(f"Logits {tuple(logits.shape)} e alvo {tuple(target.shape)} não batem")
    return logits, target.long()


def dice_ce_components(logits: torch.Tensor, target, num_classes: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Retorna (dice loss, cross-entropy). Dice: 1 - média das classes de foreground por amostra.

    SMOOTH entra no numerador e no denominador (como no nnU-Net), não só no denominador:
    (2*I + SMOOTH) / (P + G + SMOOTH). Classe ausente no alvo e na previsão vale dice 1, não 0.
    """
    if num_classes < 2:
        raise InvalidArgumentError(f"num_classes precisa ser >= 2, recebeu {num_classes}")
    logits, target = _as_batch(logits, target)
    if logits.shape[1] != num_classes:
        raise ShapeMismatchError(f"Logits com {logits.shape[1]} canais para {num_classes} classes")

    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, num_classes).movedim(-1, 1).to(probs.dtype)
    dims = tuple(range(2, probs.dim()))
    intersection = (probs * onehot).sum(dims)
    denominator = probs.sum(dims) + onehot.sum(dims)
    dice = (2.0 * intersection + SMOOTH) / (denominator + SMOOTH)
    dice_loss = 1.0 - dice[:, 1:].mean()

    ce = F.cross_entropy(logits, target)
    return dice_loss, ce


def dice_ce_loss(logits: torch.Tensor, target, num_classes: int) -> torch.Tensor:
    dice_loss, ce = dice_ce_components(logits, target, num_classes)
    return dice_loss + ce


def organ_loss(batch: Sequence[Tuple[torch.Tensor, torch.Tensor, SampleKind]], cfg) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    L_o = L_ol + lambda1 * L_cpl + lambda2 * L_pl.
    Amostras do mesmo tipo são empilhadas num único termo. Um tipo só pode faltar se o peso dele for zero.
    """
    weights = {SampleKind.LABELED: 1.0, SampleKind.CPL: cfg.lambda1, SampleKind.PL: cfg.lambda2}
    names = {SampleKind.LABELED: "L_ol", SampleKind.CPL: "L_cpl", SampleKind.PL: "L_pl"}

    grouped = {}
    for logits, target, kind in batch:
        if kind not in weights:
            raise InvalidArgumentError(f"Tipo de amostra inválido para órgãos: {kind}")
        grouped.setdefault(kind, []).append((logits, target))

    terms = {}
    for kind, weight in weights.items():
        if kind not in grouped:
            if weight != 0:
                raise InvalidArgumentError(f"Lote sem amostra do tipo {kind.value}")
            terms[kind] = 0.0
            continue
        logits = torch.cat([_as_batch(l, t)[0] for l, t in grouped[kind]])
        target = torch.cat([_as_batch(l, t)[1] for l, t in grouped[kind]])
        terms[kind] = dice_ce_loss(logits, target, logits.shape[1])

    total = organ_total(terms[SampleKind.LABELED], terms[SampleKind.CPL], terms[SampleKind.PL], cfg)
    components = {names[k]: float(t.detach()) for k, t in terms.items() if torch.is_tensor(t)}
    return total, components


def organ_total(l_ol, l_cpl, l_pl, cfg):
    return l_ol + cfg.lambda1 * l_cpl + cfg.lambda2 * l_pl


def tumor_loss(student_logits: torch.Tensor, annotated_target, corrected_pseudo, cfg) -> Tuple[torch.Tensor, Dict[str, float]]:
    """L_t = L_tl + lambda * L_cpl, ambos dice+CE binários."""
    l_tl = dice_ce_loss(student_logits, annotated_target, 2)
    l_cpl = dice_ce_loss(student_logits, corrected_pseudo, 2)
    total = l_tl + cfg.lambda_tumor * l_cpl
    return total, {"L_tl": float(l_tl.detach()), "L_cpl": float(l_cpl.detach())}
