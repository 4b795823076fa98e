"""Training losses: word-set semantic consistency and edge-map fidelity.

The semantic term compares LLM captions as lowercase word sets with a
Jaccard distance. The structural term compares edge-magnitude maps
obtained from a single Sobel pass over the grayscale image (ITU-R 601
weights), with an MSE on the magnitudes. The two are combined as
``dual = lambda * semantic + gamma * fidelity``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidWeights, ShapeMismatch

GRAYSCALE_WEIGHTS = (0.299, 0.587, 0.114)
SOBEL_KX = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
EDGE_EPS = 1e-12  # inside the sqrt, keeps the magnitude differentiable at 0

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)  # maximal alphanumeric runs


def tokenize_words(text: str) -> set[str]:
    """Lowercase and split on every non-alphanumeric character."""
    return set(_TOKEN_RE.findall(text.lower()))


def jaccard_loss(text_e: str, text_r: str) -> float:
    """1 - |We & Wr| / |We | Wr| over the two word sets; 0 if both empty."""
    we, wr = tokenize_words(text_e), tokenize_words(text_r)
    union = we | wr
    if not union:
        return 0.0
    return 1.0 - len(we & wr) / len(union)


@dataclass(frozen=True)
class EdgeMap:
    values: np.ndarray  # (H, W), nonnegative
    source: str = "O"   # "O" for generated side, "T" for RGB side


@dataclass(frozen=True)
class LossWeights:
    lambda_semantic: float = 1.0
    gamma_fidelity: float = 1.0

    def __post_init__(self):
        if self.lambda_semantic < 0 or self.gamma_fidelity < 0:
            raise InvalidWeights("loss weights must be nonnegative")
        if self.lambda_semantic == 0 and self.gamma_fidelity == 0:
            raise InvalidWeights("loss weights must not both be zero")


@dataclass(frozen=True)
class DualLossBreakdown:
    semantic: float
    fidelity: float
    dual: float


def dual_loss(semantic: float, fidelity: float, weights: LossWeights) -> DualLossBreakdown:
    if weights.lambda_semantic == 0 and weights.gamma_fidelity == 0:
        raise InvalidWeights("loss weights must not both be zero")
    dual = weights.lambda_semantic * semantic + weights.gamma_fidelity * fidelity
    return DualLossBreakdown(semantic=semantic, fidelity=fidelity, dual=dual)


def _sobel_kernels(dtype, device):
    kx = torch.tensor(SOBEL_KX, dtype=dtype, device=device)
    ky = kx.t().contiguous()
    # conv2d cross-correlates, so flip to get true convolution.
    return (
        torch.flip(kx, dims=(0, 1)).view(1, 1, 3, 3),
        torch.flip(ky, dims=(0, 1)).view(1, 1, 3, 3),
    )


def sobel_magnitude(images: torch.Tensor) -> torch.Tensor:
    """Edge-magnitude maps for a (B, 3, H, W) batch; returns (B, H, W).

    Grayscale conversion, 3x3 Sobel convolutions, then
    sqrt(Gx^2 + Gy^2 + eps). Same-size output via replicate padding, so a
    constant image has a vanishing edge map everywhere including the
    border. Differentiable.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeMismatch(f"expected (B, 3, H, W), got {tuple(images.shape)}")
    w = torch.tensor(GRAYSCALE_WEIGHTS, dtype=images.dtype, device=images.device)
    gray = (images * w.view(1, 3, 1, 1)).sum(dim=1, keepdim=True)
    gray = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    kx, ky = _sobel_kernels(images.dtype, images.device)
    gx = F.conv2d(gray, kx)
    gy = F.conv2d(gray, ky)
    return torch.sqrt(gx * gx + gy * gy + EDGE_EPS).squeeze(1)


def _to_bchw(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image
    else:
        pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
        t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64))
    if t.ndim == 3 and t.shape[2] == 3:  # (H, W, 3) -> (1, 3, H, W)
        t = t.permute(2, 0, 1).unsqueeze(0)
    elif t.ndim == 3 and t.shape[0] == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ShapeMismatch(f"cannot interpret shape {tuple(t.shape)} as an image batch")
    return t


def sobel_edge_map(image, source: str = "O") -> EdgeMap:
    """Edge-magnitude map of one (H, W, 3) image."""
    with torch.no_grad():
        mag = sobel_magnitude(_to_bchw(image))
    return EdgeMap(values=mag[0].numpy(), source=source)


def fidelity_loss_t(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Differentiable MSE between the edge maps of two (B, 3, H, W) batches."""
    if output.shape != target.shape:
        raise ShapeMismatch(f"{tuple(output.shape)} vs {tuple(target.shape)}")
    diff = sobel_magnitude(output) - sobel_magnitude(target)
    return (diff * diff).mean()


def fidelity_loss(output_image, target_image) -> float:
    """MSE between the Sobel edge maps of two (H, W, 3) images."""
    out = _to_bchw(output_image)
    tgt = _to_bchw(target_image).to(out.dtype)
    with torch.no_grad():
        return float(fidelity_loss_t(out, tgt))
