"""Toy linear dual encoder standing in for the image and text towers.

Both towers are a single linear projection followed by row normalization, so
the output rows are the [CLS] embeddings consumed by the contrastive loss.
Optional linear heads reconstruct masked image patches from the text
embedding and predict masked text tokens from the image embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import (
    EmbeddingBatch,
    LossResult,
    LossWeights,
    MaskedImageTarget,
    MaskedTextTarget,
    Temperature,
    cmim_loss,
    cmlm_loss,
)
from .numerics import Matrix, ShapeError, as_matrix, gaussian, l2_normalize_rows, l2_normalize_rows_backward, matmul

TOKEN_RANGE = 2.0


@dataclass
class PairBatch:
    """Raw features for one micro-batch, plus optional masks for the auxiliary heads.

    ``img_mask`` is ``B x n_patches`` and ``txt_mask`` is ``B x d_in``; ``True``
    marks a masked position.
    """

    x_img: Matrix
    x_txt: Matrix
    img_mask: np.ndarray | None = None
    txt_mask: np.ndarray | None = None

    def __post_init__(self):
        self.x_img = as_matrix(self.x_img, "x_img")
        self.x_txt = as_matrix(self.x_txt, "x_txt")
        if self.x_img.shape != self.x_txt.shape:
            raise ShapeError(f"image features {self.x_img.shape} and text features {self.x_txt.shape} differ")

    @property
    def size(self) -> int:
        return self.x_img.shape[0]


@dataclass
class AuxHeads:
    w_mim: Matrix  # d x d_in, text embedding -> image pixels
    w_mlm: Matrix  # d x (d_in * vocab), image embedding -> token logits
    patch_size: int
    vocab: int


@dataclass
class DualEncoder:
    w_img: Matrix
    w_txt: Matrix
    temp: Temperature = field(default_factory=Temperature)
    heads: AuxHeads | None = None

    def __post_init__(self):
        self.w_img = as_matrix(self.w_img, "w_img")
        self.w_txt = as_matrix(self.w_txt, "w_txt")
        if self.w_img.shape != self.w_txt.shape:
            raise ShapeError(f"tower shapes {self.w_img.shape} and {self.w_txt.shape} differ")

    @property
    def d_in(self) -> int:
        return self.w_img.shape[0]

    @property
    def d(self) -> int:
        return self.w_img.shape[1]

    def params(self) -> dict[str, Matrix]:
        out = {"w_img": self.w_img, "w_txt": self.w_txt, "log_tau": np.array([[self.temp.log_tau]])}
        if self.heads is not None:
            out["w_mim"] = self.heads.w_mim
            out["w_mlm"] = self.heads.w_mlm
        return out

    def with_params(self, params: dict[str, Matrix]) -> "DualEncoder":
        heads = None
        if self.heads is not None:
            heads = AuxHeads(params["w_mim"], params["w_mlm"], self.heads.patch_size, self.heads.vocab)
        temp = Temperature(float(params["log_tau"][0, 0])).clamped()
        return DualEncoder(params["w_img"], params["w_txt"], temp, heads)

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())


def init_encoder(rng: np.random.Generator, d_in: int, d: int, tau: float = 0.07,
                 aux: bool = False, patch_size: int = 4, vocab: int = 8) -> DualEncoder:
    """Gaussian init with ``1/sqrt(d_in)`` scale; the heads start at zero-mean small noise."""
    std = 1.0 / math.sqrt(d_in)
    w_img = gaussian(rng, d_in, d, std)
    w_txt = gaussian(rng, d_in, d, std)
    heads = None
    if aux:
        if d_in % patch_size:
            raise ShapeError(f"d_in={d_in} is not a multiple of patch_size={patch_size}")
        heads = AuxHeads(gaussian(rng, d, d_in, 0.01), gaussian(rng, d, d_in * vocab, 0.01), patch_size, vocab)
    return DualEncoder(w_img, w_txt, Temperature.from_tau(tau), heads)


def _check_width(enc: DualEncoder, x: Matrix, name: str) -> None:
    if x.shape[1] != enc.d_in:
        raise ShapeError(f"{name} has width {x.shape[1]}, encoder expects {enc.d_in}")


def encode(enc: DualEncoder, raw: PairBatch) -> EmbeddingBatch:
    _check_width(enc, raw.x_img, "x_img")
    _check_width(enc, raw.x_txt, "x_txt")
    v = l2_normalize_rows(matmul(raw.x_img, enc.w_img))
    t = l2_normalize_rows(matmul(raw.x_txt, enc.w_txt))
    return EmbeddingBatch(v, t)


def encode_backward(enc: DualEncoder, raw: PairBatch, g_v: Matrix, g_t: Matrix) -> dict[str, Matrix]:
    """Tower weight gradients given gradients w.r.t. the normalized embeddings."""
    g_proj_img = l2_normalize_rows_backward(matmul(raw.x_img, enc.w_img), g_v)
    g_proj_txt = l2_normalize_rows_backward(matmul(raw.x_txt, enc.w_txt), g_t)
    return {"w_img": matmul(raw.x_img.T, g_proj_img), "w_txt": matmul(raw.x_txt.T, g_proj_txt)}


def token_labels(x_txt: Matrix, vocab: int) -> np.ndarray:
    """Quantize each text feature into one of ``vocab`` equal-width bins over [-2, 2]."""
    edges = np.linspace(-TOKEN_RANGE, TOKEN_RANGE, vocab + 1)[1:-1]
    return np.digitize(x_txt, edges)


def aux_losses(enc: DualEncoder, raw: PairBatch, emb: EmbeddingBatch,
               weights: LossWeights) -> tuple[LossResult, LossResult, dict[str, Matrix]]:
    """Masked image and masked text losses for one worker's local micro-batch.

    Returns the two component results and the weighted gradients w.r.t.
    ``w_mim``, ``w_mlm``, ``v_cls`` and ``t_cls``.
    """
    heads = enc.heads
    if heads is None or raw.img_mask is None or raw.txt_mask is None:
        raise ValueError("auxiliary losses need heads on the encoder and masks on the batch")
    b, d_in = raw.x_img.shape
    p, q = heads.patch_size, heads.vocab
    n_patch = d_in // p
    img_mask = np.asarray(raw.img_mask, dtype=bool).reshape(b, n_patch)
    txt_mask = np.asarray(raw.txt_mask, dtype=bool).reshape(b, d_in)

    recon = matmul(emb.t_cls, heads.w_mim)
    mim = cmim_loss(MaskedImageTarget(raw.x_img.reshape(b, n_patch, p)[img_mask],
                                      recon.reshape(b, n_patch, p)[img_mask]))
    g_recon = np.zeros((b, n_patch, p))
    g_recon[img_mask] = mim.grads["x_hat"]
    g_recon = g_recon.reshape(b, d_in)

    logits = matmul(emb.v_cls, heads.w_mlm)
    labels = token_labels(raw.x_txt, q)[txt_mask]
    mlm = cmlm_loss(MaskedTextTarget(logits.reshape(b, d_in, q)[txt_mask], labels))
    g_logits = np.zeros((b, d_in, q))
    g_logits[txt_mask] = mlm.grads["logits"]
    g_logits = g_logits.reshape(b, d_in * q)

    a, c = weights.alpha, weights.beta
    grads = {
        "w_mim": a * matmul(emb.t_cls.T, g_recon),
        "w_mlm": c * matmul(emb.v_cls.T, g_logits),
        "t_cls": a * matmul(g_recon, heads.w_mim.T),
        "v_cls": c * matmul(g_logits, heads.w_mlm.T),
    }
    return mim, mlm, grads
