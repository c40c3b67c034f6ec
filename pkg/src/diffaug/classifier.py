"""Patch-driven multi-label image classifier.

An image is resized, cut into a fixed grid of patches, and embedded; a single
weight matrix scores every patch over all classes through a row softmax, and
global max pooling lifts patch scores to image-level scores. Training
minimizes mean per-class binary cross-entropy with hand-derived gradients and
an Adam optimizer, so runs are bit-reproducible under a fixed seed.

`PatchClassifier` follows the scikit-learn estimator conventions
(``fit`` / ``predict`` / ``predict_proba`` / ``get_params``) and accepts a
multilabel indicator matrix as its target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.special import erf
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import CheckpointError, TrainingDivergedError

CLAMP_EPS = 1e-7
_LN_EPS = 1e-5
_INIT_STD = 0.02

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PatchGridConfig:
    """Resize target and patch size; the patch size must tile the image exactly."""

    image_size: tuple[int, int]
    patch_size: int

    def __post_init__(self):
        h, w = self.image_size
        d = self.patch_size
        if h < 1 or w < 1 or d < 1:
            raise ValueError("image and patch sizes must be positive")
        if h % d != 0 or w % d != 0:
            raise ValueError(f"patch size {d} must divide image size {h}x{w} exactly")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


# --- pure scoring operations --------------------------------------------------


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def score_patches(embeddings: np.ndarray, head_weight: np.ndarray) -> np.ndarray:
    """Per-patch class scores: row softmax of embeddings @ head_weight.

    Rows of the result lie on the probability simplex. Softmax is stabilized
    by subtracting each row's maximum logit.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    head_weight = np.asarray(head_weight, dtype=np.float64)
    if embeddings.ndim != 2 or head_weight.ndim != 2:
        raise ValueError("embeddings must be s x e and head weight e x C")
    if embeddings.shape[1] != head_weight.shape[0]:
        raise ValueError(
            f"inner dimensions disagree: embeddings {embeddings.shape} vs head {head_weight.shape}"
        )
    if not (np.isfinite(embeddings).all() and np.isfinite(head_weight).all()):
        raise ValueError("non-finite values in scoring inputs")
    return _softmax_rows(embeddings @ head_weight)


def global_max_pool(patch_scores: np.ndarray) -> np.ndarray:
    """Image-level scores: per-class maximum over all patches."""
    patch_scores = np.asarray(patch_scores, dtype=np.float64)
    if patch_scores.ndim != 2:
        raise ValueError("patch scores must be s x C")
    return patch_scores.max(axis=0)


def multilabel_bce(targets: np.ndarray, scores: np.ndarray, eps: float = CLAMP_EPS) -> float:
    """Mean per-class binary cross-entropy between a binary target vector and scores."""
    targets = np.asarray(targets, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if targets.shape != scores.shape or targets.ndim != 1:
        raise ValueError(f"target/score length mismatch: {targets.shape} vs {scores.shape}")
    clipped = np.clip(scores, eps, 1.0 - eps)
    per_class = -(targets * np.log(clipped) + (1.0 - targets) * np.log(1.0 - clipped))
    return float(per_class.mean())


def head_loss_gradient(
    embeddings: np.ndarray, targets: np.ndarray, head_weight: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss and its analytic gradient w.r.t. the head weight, for one image.

    Gradient of the max pool flows to the lowest-indexed maximizing patch of
    each class.
    """
    F = np.asarray(embeddings, dtype=np.float64)[None]
    Y = np.asarray(targets, dtype=np.float64)[None]
    W = np.asarray(head_weight, dtype=np.float64)
    Z, yhat, idx = _forward_scores(F, W)
    loss, dyhat = _bce_loss_grad(Y, yhat)
    dW, _ = _backward_scores(Z, idx, dyhat, F, W)
    return loss, dW


# --- batched forward/backward (training internals) ----------------------------


def _forward_scores(F: np.ndarray, W: np.ndarray):
    logits = F @ W  # (B, s, C)
    Z = _softmax_rows(logits)
    yhat = Z.max(axis=1)
    idx = Z.argmax(axis=1)  # first occurrence: lowest-indexed maximizing patch
    return Z, yhat, idx


def _bce_loss_grad(Y: np.ndarray, yhat: np.ndarray):
    B, C = yhat.shape
    clipped = np.clip(yhat, CLAMP_EPS, 1.0 - CLAMP_EPS)
    per_class = -(Y * np.log(clipped) + (1.0 - Y) * np.log(1.0 - clipped))
    loss = float(per_class.mean(axis=1).mean())
    inside = (yhat > CLAMP_EPS) & (yhat < 1.0 - CLAMP_EPS)
    dyhat = (-(Y / clipped) + (1.0 - Y) / (1.0 - clipped)) * inside / (B * C)
    return loss, dyhat


def _backward_scores(Z, idx, dyhat, F, W):
    dZ = np.zeros_like(Z)
    np.put_along_axis(dZ, idx[:, None, :], dyhat[:, None, :], axis=1)
    dlogits = Z * (dZ - (dZ * Z).sum(axis=-1, keepdims=True))
    dW = np.einsum("bse,bsc->ec", F, dlogits)
    dF = dlogits @ W.T
    return dW, dF


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def _layernorm_fwd(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    std = np.sqrt(var + _LN_EPS)
    xhat = (x - mu) / std
    return gamma * xhat + beta, (xhat, std, gamma)


def _layernorm_bwd(dy, cache):
    xhat, std, gamma = cache
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    g = dy * gamma
    dx = (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / std
    return dx, dgamma, dbeta


# --- encoders -------------------------------------------------------------------


class LinearPatchEncoder:
    """Trainable affine map applied to each flattened patch."""

    kind = "linear"

    def __init__(self, grid: PatchGridConfig, embed_dim: int):
        self.grid = grid
        self.embed_dim = embed_dim
        self.params: dict[str, np.ndarray] = {}

    def init_params(self, rng: np.random.Generator):
        self.params = {
            "embed_w": rng.normal(0.0, _INIT_STD, size=(self.grid.patch_dim, self.embed_dim)),
            "embed_b": np.zeros(self.embed_dim),
        }

    def forward(self, patches: np.ndarray, record_ids=None):
        F = patches @ self.params["embed_w"] + self.params["embed_b"]
        return F, patches

    def backward(self, dF: np.ndarray, cache) -> dict[str, np.ndarray]:
        patches = cache
        in_dim = patches.shape[-1]
        dw = patches.reshape(-1, in_dim).T @ dF.reshape(-1, self.embed_dim)
        return {"embed_w": dw, "embed_b": dF.sum(axis=(0, 1))}

    def config(self) -> dict:
        return {}


class AttentionEncoder:
    """Small trainable self-attention encoder over patch tokens.

    Patch tokens get an affine embedding plus a learned positional table, then
    pass through pre-norm blocks of multi-head self-attention and a GELU MLP,
    both with residual connections.
    """

    kind = "attention"

    def __init__(
        self,
        grid: PatchGridConfig,
        embed_dim: int,
        n_blocks: int = 2,
        n_heads: int = 4,
        hidden_multiple: int = 2,
    ):
        if embed_dim % n_heads != 0:
            raise ValueError(f"embed_dim {embed_dim} must be divisible by n_heads {n_heads}")
        self.grid = grid
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.hidden_multiple = hidden_multiple
        self.params: dict[str, np.ndarray] = {}

    def init_params(self, rng: np.random.Generator):
        e = self.embed_dim
        m = self.hidden_multiple * e
        p: dict[str, np.ndarray] = {
            "embed_w": rng.normal(0.0, _INIT_STD, size=(self.grid.patch_dim, e)),
            "embed_b": np.zeros(e),
            "pos": rng.normal(0.0, _INIT_STD, size=(self.grid.n_patches, e)),
        }
        for i in range(self.n_blocks):
            p[f"b{i}_ln1_g"] = np.ones(e)
            p[f"b{i}_ln1_b"] = np.zeros(e)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"b{i}_{name}"] = rng.normal(0.0, _INIT_STD, size=(e, e))
            for name in ("bq", "bk", "bv", "bo"):
                p[f"b{i}_{name}"] = np.zeros(e)
            p[f"b{i}_ln2_g"] = np.ones(e)
            p[f"b{i}_ln2_b"] = np.zeros(e)
            p[f"b{i}_w1"] = rng.normal(0.0, _INIT_STD, size=(e, m))
            p[f"b{i}_b1"] = np.zeros(m)
            p[f"b{i}_w2"] = rng.normal(0.0, _INIT_STD, size=(m, e))
            p[f"b{i}_b2"] = np.zeros(e)
        self.params = p

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        B, s, e = x.shape
        hd = e // self.n_heads
        return x.reshape(B, s, self.n_heads, hd).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        B, nh, s, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, s, nh * hd)

    def forward(self, patches: np.ndarray, record_ids=None):
        p = self.params
        x = patches @ p["embed_w"] + p["embed_b"] + p["pos"]
        caches = [patches]
        hd = self.embed_dim // self.n_heads
        scale = 1.0 / np.sqrt(hd)
        for i in range(self.n_blocks):
            x0 = x
            n1, ln1_cache = _layernorm_fwd(x0, p[f"b{i}_ln1_g"], p[f"b{i}_ln1_b"])
            q = n1 @ p[f"b{i}_wq"] + p[f"b{i}_bq"]
            k = n1 @ p[f"b{i}_wk"] + p[f"b{i}_bk"]
            v = n1 @ p[f"b{i}_wv"] + p[f"b{i}_bv"]
            qh, kh, vh = self._split_heads(q), self._split_heads(k), self._split_heads(v)
            scores = (qh @ kh.swapaxes(-1, -2)) * scale
            attn = _softmax_rows(scores)
            oh = attn @ vh
            o = self._merge_heads(oh)
            x1 = x0 + o @ p[f"b{i}_wo"] + p[f"b{i}_bo"]

            n2, ln2_cache = _layernorm_fwd(x1, p[f"b{i}_ln2_g"], p[f"b{i}_ln2_b"])
            hpre = n2 @ p[f"b{i}_w1"] + p[f"b{i}_b1"]
            hact = _gelu(hpre)
            x = x1 + hact @ p[f"b{i}_w2"] + p[f"b{i}_b2"]
            caches.append((x0, n1, ln1_cache, qh, kh, vh, attn, oh, o, x1, n2, ln2_cache, hpre, hact))
        return x, caches

    def backward(self, dF: np.ndarray, caches) -> dict[str, np.ndarray]:
        p = self.params
        patches = caches[0]
        e = self.embed_dim
        hd = e // self.n_heads
        scale = 1.0 / np.sqrt(hd)
        grads: dict[str, np.ndarray] = {}
        dx = dF
        for i in reversed(range(self.n_blocks)):
            (x0, n1, ln1_cache, qh, kh, vh, attn, oh, o, x1, n2, ln2_cache, hpre, hact) = caches[i + 1]
            m = hact.shape[-1]

            # MLP sublayer
            grads[f"b{i}_b2"] = dx.sum(axis=(0, 1))
            grads[f"b{i}_w2"] = hact.reshape(-1, m).T @ dx.reshape(-1, e)
            dhact = dx @ p[f"b{i}_w2"].T
            dhpre = dhact * _gelu_grad(hpre)
            grads[f"b{i}_b1"] = dhpre.sum(axis=(0, 1))
            grads[f"b{i}_w1"] = n2.reshape(-1, e).T @ dhpre.reshape(-1, m)
            dn2 = dhpre @ p[f"b{i}_w1"].T
            dx1_ln, grads[f"b{i}_ln2_g"], grads[f"b{i}_ln2_b"] = _layernorm_bwd(dn2, ln2_cache)
            dx1 = dx + dx1_ln

            # attention sublayer
            grads[f"b{i}_bo"] = dx1.sum(axis=(0, 1))
            grads[f"b{i}_wo"] = o.reshape(-1, e).T @ dx1.reshape(-1, e)
            do = dx1 @ p[f"b{i}_wo"].T
            doh = self._split_heads(do)
            dattn = doh @ vh.swapaxes(-1, -2)
            dvh = attn.swapaxes(-1, -2) @ doh
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dqh = (dscores @ kh) * scale
            dkh = (dscores.swapaxes(-1, -2) @ qh) * scale
            dq, dk, dv = self._merge_heads(dqh), self._merge_heads(dkh), self._merge_heads(dvh)
            for name, dmat in (("q", dq), ("k", dk), ("v", dv)):
                grads[f"b{i}_b{name}"] = dmat.sum(axis=(0, 1))
                grads[f"b{i}_w{name}"] = n1.reshape(-1, e).T @ dmat.reshape(-1, e)
            dn1 = dq @ p[f"b{i}_wq"].T + dk @ p[f"b{i}_wk"].T + dv @ p[f"b{i}_wv"].T
            dx0_ln, grads[f"b{i}_ln1_g"], grads[f"b{i}_ln1_b"] = _layernorm_bwd(dn1, ln1_cache)
            dx = dx1 + dx0_ln

        grads["pos"] = dx.sum(axis=0)
        grads["embed_b"] = dx.sum(axis=(0, 1))
        in_dim = patches.shape[-1]
        grads["embed_w"] = patches.reshape(-1, in_dim).T @ dx.reshape(-1, e)
        return grads

    def config(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "hidden_multiple": self.hidden_multiple,
        }


class PrecomputedEncoder:
    """Loads per-image patch embeddings from an .npz file keyed by record id."""

    kind = "precomputed"

    def __init__(self, grid: PatchGridConfig, embed_dim: int, path: Path):
        self.grid = grid
        self.path = Path(path)
        self.params: dict[str, np.ndarray] = {}
        try:
            with np.load(self.path) as data:
                self._table = {key: np.asarray(data[key], dtype=np.float64) for key in data.files}
        except Exception as e:
            raise CheckpointError(f"cannot read embeddings file {self.path}: {e}") from e
        if not self._table:
            raise ValueError(f"embeddings file {self.path} is empty")
        dims = {v.shape for v in self._table.values()}
        if len(dims) != 1:
            raise ValueError(f"embeddings file mixes shapes: {sorted(dims)}")
        shape = dims.pop()
        if len(shape) != 2 or shape[0] != grid.n_patches:
            raise ValueError(
                f"embeddings have shape {shape}, expected ({grid.n_patches}, e) for the grid"
            )
        self.embed_dim = shape[1]

    def init_params(self, rng: np.random.Generator):
        pass

    def forward(self, patches, record_ids=None):
        if record_ids is None:
            raise ValueError("precomputed encoder needs record ids to look up embeddings")
        missing = [r for r in record_ids if r not in self._table]
        if missing:
            raise KeyError(f"no precomputed embeddings for records: {missing[:5]}")
        return np.stack([self._table[r] for r in record_ids]), None

    def backward(self, dF, cache) -> dict[str, np.ndarray]:
        return {}

    def config(self) -> dict:
        return {"path": str(self.path)}


# --- optimizer ------------------------------------------------------------------


class Adam:
    """Standard adaptive moment estimation on a named parameter dictionary."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            m = self._m[key]
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            self.params[key] -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# --- preprocessing ----------------------------------------------------------------


def resize_pixels(pixels: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (h, w); identity when already that size."""
    h, w = image_size
    if pixels.shape[:2] == (h, w):
        return pixels
    im = Image.fromarray(pixels, mode="RGB").resize((w, h), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8)


def patchify(pixels: np.ndarray, grid: PatchGridConfig) -> np.ndarray:
    """Flattened patch matrix (s x 3d^2) in row-major patch order.

    Values are centered to [-1, 1]: mid-gray content then has small norm, so
    strongly colored patches dominate the initial score argmax and receive
    gradient from the start.
    """
    resized = resize_pixels(pixels, grid.image_size).astype(np.float64)
    scaled = resized / 127.5 - 1.0
    h, w = grid.image_size
    d = grid.patch_size
    gh, gw = grid.grid_shape
    return (
        scaled.reshape(gh, d, gw, d, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, d * d * 3)
    )


# --- the estimator -----------------------------------------------------------------


class PatchClassifier(BaseEstimator, ClassifierMixin):
    """Multi-label image classifier over a fixed patch grid.

    Parameters
    ----------
    image_size : int or (int, int)
        Resize target before patch extraction.
    patch_size : int
        Side length of the square patches; must tile the image exactly.
    embed_dim : int
        Patch embedding width (ignored for the precomputed encoder, which
        dictates its own width).
    encoder : {"linear", "attention", "precomputed"}
        Patch embedding backend.
    encoder_path : str, optional
        Embeddings .npz for the precomputed encoder.
    encoder_trainable : bool
        Whether encoder parameters receive gradient updates.
    epochs, batch_size, learning_rate : training loop settings.
    random_state : int
        Seed for initialization and batch shuffling; fixes training bit-exactly.
    """

    def __init__(
        self,
        image_size=384,
        patch_size=16,
        embed_dim=64,
        encoder="linear",
        encoder_path=None,
        attention_blocks=2,
        attention_heads=4,
        hidden_multiple=2,
        epochs=80,
        batch_size=16,
        learning_rate=1e-3,
        encoder_trainable=True,
        random_state=0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder = encoder
        self.encoder_path = encoder_path
        self.attention_blocks = attention_blocks
        self.attention_heads = attention_heads
        self.hidden_multiple = hidden_multiple
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.encoder_trainable = encoder_trainable
        self.random_state = random_state

    # -- construction helpers --

    def _grid(self) -> PatchGridConfig:
        size = self.image_size
        hw = (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))
        return PatchGridConfig(image_size=hw, patch_size=int(self.patch_size))

    def _make_encoder(self, grid: PatchGridConfig):
        if self.encoder == "linear":
            return LinearPatchEncoder(grid, self.embed_dim)
        if self.encoder == "attention":
            return AttentionEncoder(
                grid,
                self.embed_dim,
                n_blocks=self.attention_blocks,
                n_heads=self.attention_heads,
                hidden_multiple=self.hidden_multiple,
            )
        if self.encoder == "precomputed":
            if not self.encoder_path:
                raise ValueError("encoder='precomputed' requires encoder_path")
            return PrecomputedEncoder(grid, self.embed_dim, self.encoder_path)
        raise ValueError(f"unknown encoder kind '{self.encoder}'")

    def _prepare_inputs(self, X, record_ids, grid: PatchGridConfig, n_expected=None):
        """Patch matrices (n, s, patch_dim), or None when embeddings are precomputed."""
        if self.encoder == "precomputed":
            if record_ids is None:
                raise ValueError("encoder='precomputed' requires record_ids")
            if n_expected is not None and len(record_ids) != n_expected:
                raise ValueError("record_ids length does not match the target matrix")
            return None
        if X is None:
            raise ValueError("X is required unless the encoder is precomputed")
        images = list(X)
        if n_expected is not None and len(images) != n_expected:
            raise ValueError(f"got {len(images)} images but {n_expected} label rows")
        stacked = np.empty((len(images), grid.n_patches, grid.patch_dim))
        for i, img in enumerate(images):
            arr = np.asarray(img)
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise ValueError(f"image {i} must be h x w x 3, got shape {arr.shape}")
            stacked[i] = patchify(arr.astype(np.uint8), grid)
        return stacked

    # -- sklearn API --

    def fit(self, X, y, categories: Optional[Sequence[str]] = None, record_ids=None):
        """Train on images ``X`` and a binary indicator matrix ``y``.

        ``categories`` names the indicator columns; defaults to class_0..N.
        ``record_ids`` keys the precomputed-embedding lookup.
        """
        Y = np.asarray(y, dtype=np.float64)
        if Y.ndim != 2:
            raise ValueError("y must be an n x n_classes indicator matrix")
        if Y.shape[0] == 0:
            raise ValueError("cannot fit on an empty dataset")
        if not np.isin(Y, (0.0, 1.0)).all():
            raise ValueError("y must be binary")
        n, n_classes = Y.shape
        if categories is not None and len(categories) != n_classes:
            raise ValueError(f"{len(categories)} category names for {n_classes} label columns")

        grid = self._grid()
        patches = self._prepare_inputs(X, record_ids, grid, n_expected=n)

        rng = np.random.default_rng(self.random_state)
        encoder = self._make_encoder(grid)
        encoder.init_params(rng)
        head = rng.normal(0.0, _INIT_STD, size=(encoder.embed_dim, n_classes))

        trainable: dict[str, np.ndarray] = {}
        if self.encoder_trainable:
            trainable.update(encoder.params)
        trainable["__head__"] = head
        optimizer = Adam(trainable, lr=self.learning_rate)

        batch = max(1, min(self.batch_size, n))
        loss_trace: list[float] = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch):
                sel = order[start : start + batch]
                Pb = patches[sel] if patches is not None else None
                ids = [record_ids[i] for i in sel] if record_ids is not None else None
                F, cache = encoder.forward(Pb, ids)
                Z, yhat, idx = _forward_scores(F, head)
                loss, dyhat = _bce_loss_grad(Y[sel], yhat)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became non-finite at epoch {epoch}, batch {start // batch}"
                    )
                dW, dF = _backward_scores(Z, idx, dyhat, F, head)
                grads = {"__head__": dW}
                if self.encoder_trainable:
                    grads.update(encoder.backward(dF, cache))
                optimizer.step(grads)
                epoch_loss += loss * len(sel)
            loss_trace.append(epoch_loss / n)

        self.grid_ = grid
        self.encoder_ = encoder
        self.head_weight_ = head
        self.categories_ = tuple(categories) if categories is not None else tuple(
            f"class_{i}" for i in range(n_classes)
        )
        self.classes_ = np.asarray(self.categories_)
        self.n_classes_ = n_classes
        self.loss_trace_ = loss_trace
        return self

    def predict_proba(self, X, record_ids=None) -> np.ndarray:
        """Image-level scores (n x n_classes): max-pooled patch softmax scores."""
        check_is_fitted(self, "head_weight_")
        patches = self._prepare_inputs(X, record_ids, self.grid_)
        if patches is None:
            F, _ = self.encoder_.forward(None, record_ids)
        else:
            F, _ = self.encoder_.forward(patches, record_ids)
        _, yhat, _ = _forward_scores(F, self.head_weight_)
        return yhat

    def predict(self, X, record_ids=None) -> np.ndarray:
        """Binary indicator matrix at the 0.5 decision threshold."""
        return (self.predict_proba(X, record_ids) > 0.5).astype(int)

    def score_image(self, pixels: np.ndarray, record_id: Optional[str] = None) -> np.ndarray:
        """Score vector for a single image."""
        ids = [record_id] if record_id is not None else None
        return self.predict_proba([pixels] if pixels is not None else None, record_ids=ids)[0]

    # -- persistence --

    def save(self, path: Path):
        """Self-describing checkpoint: grid, encoder kind and parameters, head, categories."""
        check_is_fitted(self, "head_weight_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "model": "patch-classifier",
            "hyperparams": {
                k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()
            },
            "categories": list(self.categories_),
            "encoder_kind": self.encoder_.kind,
            "encoder_config": self.encoder_.config(),
        }
        arrays = {f"enc__{k}": v for k, v in self.encoder_.params.items()}
        arrays["head_weight"] = self.head_weight_
        arrays["loss_trace"] = np.asarray(self.loss_trace_)
        np.savez(path, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path: Path) -> "PatchClassifier":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(str(data["meta"]))
                arrays = {k: np.asarray(data[k]) for k in data.files if k != "meta"}
        except Exception as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        if meta.get("model") != "patch-classifier":
            raise CheckpointError(f"{path} is not a patch-classifier checkpoint")
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {meta.get('format_version')}"
            )
        est = cls(**meta["hyperparams"])
        grid = est._grid()
        encoder = est._make_encoder(grid)
        encoder.params = {
            k[len("enc__") :]: v for k, v in arrays.items() if k.startswith("enc__")
        }
        est.grid_ = grid
        est.encoder_ = encoder
        est.head_weight_ = arrays["head_weight"]
        est.categories_ = tuple(meta["categories"])
        est.classes_ = np.asarray(est.categories_)
        est.n_classes_ = len(est.categories_)
        est.loss_trace_ = list(arrays.get("loss_trace", np.empty(0)))
        return est
