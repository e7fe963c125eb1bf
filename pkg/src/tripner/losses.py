"""Cross-entropy over gold suffixes and the weighted total objective."""

from __future__ import annotations

import torch

from .codec import TargetSequence
from .errors import TrainerError
from .model import BatchEncoderOutput, EncoderOutput, PointerModel


def ce_term_from_logprobs(
    step_logprobs: torch.Tensor,
    target: TargetSequence,
    eos_index: int | None = None,
) -> torch.Tensor:
    """Mean negative log-probability of the gold suffix indices.

    ``step_logprobs`` must hold one row per step of the full concatenated
    target (pseudo prefix first), with one extra trailing row when the
    end-of-sequence step is trained (``eos_index`` given).
    """
    ground = target.ground_indices
    needed = len(target) + (1 if eos_index is not None else 0)
    if step_logprobs.shape[0] < needed:
        raise TrainerError(
            f"need log-probs for {needed} steps, got {step_logprobs.shape[0]}"
        )
    labels = list(ground)
    steps = list(range(target.pseudo_len, len(target)))
    if eos_index is not None:
        labels.append(eos_index)
        steps.append(len(target))
    if not labels:
        return torch.zeros((), dtype=step_logprobs.dtype)
    width = step_logprobs.shape[-1]
    for label in labels:
        if not 0 <= label < width:
            raise TrainerError(f"target index {label} outside vocabulary of size {width}")
    rows = step_logprobs[steps]
    picked = rows.gather(-1, torch.tensor(labels)[:, None]).squeeze(-1)
    return -picked.sum() / len(labels)


def ce_loss(
    target: TargetSequence,
    student: PointerModel,
    enc: EncoderOutput,
    include_eos_step: bool = False,
) -> torch.Tensor:
    """Cross entropy of one sentence's gold suffix under teacher forcing.

    The student is forced on the full concatenated target (pseudo prefix then
    gold suffix); only the suffix steps contribute. With ``include_eos_step``
    the final stop decision is trained too (the form the trainer uses, so
    sentences with empty targets still learn to emit EOS immediately).
    """
    eos_index = student.eos_output_index if include_eos_step else None
    if len(target) == 0 and eos_index is None:
        return torch.zeros(())
    realized = student._realize_ids(target.indices, enc.token_ids)
    steps = len(target) + (1 if include_eos_step else 0)
    input_ids = torch.tensor([realized[:steps]], dtype=torch.long)
    batch = BatchEncoderOutput(
        states=enc.states[None], mask=enc.mask[None], token_ids=enc.token_ids[None]
    )
    logits = student.forced_logits(batch, input_ids)[0]
    return ce_term_from_logprobs(torch.log_softmax(logits, dim=-1), target, eos_index)


def total_loss(
    kd: torch.Tensor | float, ce: torch.Tensor | float, alpha: float, beta: float
) -> torch.Tensor:
    """Weighted sum of the distillation and cross-entropy terms."""
    kd = kd if torch.is_tensor(kd) else torch.tensor(float(kd))
    ce = ce if torch.is_tensor(ce) else torch.tensor(float(ce))
    return alpha * kd + beta * ce
