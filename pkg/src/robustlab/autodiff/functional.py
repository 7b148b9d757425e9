"""Fused differentiable operations: dense and convolutional layers, batch
normalisation, softmax cross-entropy and bilinear affine warping."""

from __future__ import annotations

import functools

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, _unbroadcast


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back if bias is not None else lambda g: back(g)[:2])


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@functools.lru_cache(maxsize=64)
def _im2col_plan(c: int, h: int, w: int, k: int, stride: int, padding: int):
    """Gather indices and the matching scatter matrix for one conv geometry.

    Column order per example is (out_row, out_col, channel, ki, kj). Padding
    positions point at an extra zero slot appended after the C*H*W pixels.
    """
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    oy, ox, ch, ki, kj = np.meshgrid(
        np.arange(ho), np.arange(wo), np.arange(c), np.arange(k), np.arange(k), indexing="ij"
    )
    row = oy * stride + ki - padding
    col = ox * stride + kj - padding
    valid = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    gather = np.where(valid, ch * h * w + row * w + col, c * h * w).ravel()
    n_cols = gather.size
    keep = valid.ravel()
    scatter = sp.csr_matrix(
        (np.ones(int(keep.sum())), (gather[keep], np.arange(n_cols)[keep])), shape=(c * h * w, n_cols)
    )
    return ho, wo, gather, scatter


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over a (B, C, H, W) batch via im2col."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-d batch, got shape {x.shape}")
    n_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise ValueError("conv2d supports square kernels only")
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c_in}")
    b, _, h, w = x.shape
    if conv_output_size(h, kh, stride, padding) < 1 or conv_output_size(w, kw, stride, padding) < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    ho, wo, gather, scatter = _im2col_plan(c_in, h, w, kh, stride, padding)

    flat = np.empty((b, c_in * h * w + 1), dtype=x.dtype)
    flat[:, :-1] = x.data.reshape(b, -1)
    flat[:, -1] = 0.0
    cols = np.take(flat, gather, axis=1).reshape(b * ho * wo, c_in * kh * kw)
    wmat = weight.data.reshape(n_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, n_out).transpose(0, 3, 1, 2))

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, n_out)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(b, -1)
            gx = np.asarray(scatter @ gcols.T).T.reshape(x.shape)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over all axes except the channel axis 1.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average); in eval mode they are read only.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    if training:
        count = xd.size // xd.shape[1]
        if count < 2:
            raise ValueError("batch_norm in training mode needs more than one value per channel")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = xd.size // xd.shape[1]
                gx = (
                    inv_std.reshape(bshape)
                    / m
                    * (
                        m * gxhat
                        - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                    )
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), back)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Tensor.from_op(out, (logits,), back)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy with max-subtraction.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-example vector).
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    total = expz.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    per_example = np.log(total[:, 0]) - shifted[rows, labels]
    soft = expz / total
    if reduction == "none":
        out = per_example
    elif reduction == "sum":
        out = np.asarray(per_example.sum())
    elif reduction == "mean":
        out = np.asarray(per_example.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        if reduction == "none":
            scale = g[:, None]
        elif reduction == "sum":
            scale = g
        else:
            scale = g / b
        grad = soft.copy()
        grad[rows, labels] -= 1.0
        return (grad * scale,)

    return Tensor.from_op(out, (logits,), back)


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` evaluated without overflow."""
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    sig_neg = 1.0 / (1.0 + np.exp(np.clip(xd, -500, 500)))  # sigmoid(-x)
    return Tensor.from_op(out, (x,), lambda g: (g * sig_neg,))


def affine_warp(image: Tensor, matrix: Tensor) -> Tensor:
    """Warp images with 2x3 affine matrices by bilinear sampling.

    The matrix maps normalised output coordinates in [-1, 1]^2 (pixel-edge
    convention, x = column, y = row) to normalised source coordinates.
    Samples outside the source image read as zero. Accepts a single image
    (C, H, W) with a (2, 3) matrix, or batches (B, C, H, W) with (B, 2, 3);
    a single matrix is broadcast over a batch and vice versa.
    """
    single = image.ndim == 3
    img = image.data[None] if single else image.data
    theta = matrix.data
    if theta.shape[-2:] != (2, 3):
        raise ValueError(f"affine matrix must be 2x3, got {theta.shape}")
    if img.ndim != 4:
        raise ValueError(f"affine_warp expects (C,H,W) or (B,C,H,W), got {image.shape}")
    theta_b = theta[None] if theta.ndim == 2 else theta
    bsz = max(img.shape[0], theta_b.shape[0])
    if img.shape[0] not in (1, bsz) or theta_b.shape[0] not in (1, bsz):
        raise ValueError(f"batch mismatch between images {img.shape} and matrices {theta.shape}")
    img_b = np.broadcast_to(img, (bsz,) + img.shape[1:])
    theta_b = np.broadcast_to(theta_b, (bsz, 2, 3))
    _, c, h, w = img_b.shape

    # centred pixel coordinates; exact in floating point for the identity map
    ux = (np.arange(w) + 0.5 - w / 2.0)[None, None, :]
    uy = (np.arange(h) + 0.5 - h / 2.0)[None, :, None]
    a = theta_b[:, :, :, None, None]  # entries broadcast to (B, H, W)
    px = a[:, 0, 0] * ux + a[:, 0, 1] * (uy * (w / h)) + a[:, 0, 2] * (w / 2.0)
    py = a[:, 1, 0] * (ux * (h / w)) + a[:, 1, 1] * uy + a[:, 1, 2] * (h / 2.0)
    px = px + (w / 2.0 - 0.5)
    py = py + (h / 2.0 - 0.5)

    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    corners = []
    for yy, xx, wgt in (
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        flat = np.where(valid, yy * w + xx, 0)
        corners.append((flat, valid, wgt))

    src = img_b.reshape(bsz, c, h * w)

    def gather(flat, valid):
        vals = np.take_along_axis(src, flat.reshape(bsz, 1, h * w).repeat(c, axis=1), axis=2)
        return vals.reshape(bsz, c, h, w) * valid[:, None]

    values = [gather(flat, valid) for flat, valid, _ in corners]
    out = sum(v * wgt[:, None] for v, (_, _, wgt) in zip(values, corners))
    if single and theta.ndim == 2:
        out = out[0]

    def back(g):
        gb = g[None] if g.ndim == 3 else g
        gimg = gtheta = None
        if image.requires_grad:
            acc = np.zeros((bsz, c, h * w), dtype=img_b.dtype)
            offsets = (np.arange(bsz * c) * (h * w)).reshape(bsz, c, 1)
            for flat, valid, wgt in corners:
                contrib = (gb * (wgt * valid)[:, None]).reshape(bsz, c, h * w)
                idx = (flat.reshape(bsz, 1, h * w) + offsets).ravel()
                acc += np.bincount(idx, weights=contrib.ravel(), minlength=bsz * c * h * w).reshape(
                    bsz, c, h * w
                )
            acc = acc.reshape(bsz, c, h, w)
            if img.shape[0] == 1 and bsz > 1:
                acc = acc.sum(axis=0, keepdims=True)
            gimg = acc[0] if single else acc
        if matrix.requires_grad:
            v00, v01, v10, v11 = values
            dpx = (1.0 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
            dpy = (1.0 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
            gx = (gb * dpx).sum(axis=1)  # (B, H, W)
            gy = (gb * dpy).sum(axis=1)
            gtheta = np.empty((bsz, 2, 3), dtype=img_b.dtype)
            gtheta[:, 0, 0] = (gx * ux[0]).sum(axis=(1, 2))
            gtheta[:, 0, 1] = (gx * uy[0] * (w / h)).sum(axis=(1, 2))
            gtheta[:, 0, 2] = gx.sum(axis=(1, 2)) * (w / 2.0)
            gtheta[:, 1, 0] = (gy * ux[0] * (h / w)).sum(axis=(1, 2))
            gtheta[:, 1, 1] = (gy * uy[0]).sum(axis=(1, 2))
            gtheta[:, 1, 2] = gy.sum(axis=(1, 2)) * (h / 2.0)
            if theta.ndim == 2:
                gtheta = gtheta.sum(axis=0)
            else:
                gtheta = _unbroadcast(gtheta, theta.shape)
        return gimg, gtheta

    return Tensor.from_op(out, (image, matrix), back)
