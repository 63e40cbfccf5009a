"""Alpha estimation from image + trimap via a local color-line Laplacian.

The quadratic alpha'*L*alpha penalty is built from 3x3 windows: each
window contributes affinities derived from its color mean and regularized
covariance. The matte minimizes that penalty subject to soft constraints
pinning trimap-known pixels, solved by preconditioned conjugate gradient.
A command-template hook lets third-party matting binaries act as drop-in
solvers.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import sparse
from scipy.sparse.linalg import cg

DEFAULT_EPS = 1e-5
DEFAULT_LAMBDA = 100.0
CG_RTOL = 1e-6
# Above this side length the solve runs on a half-resolution grid.
FULL_RES_LIMIT = 512


class MattingError(Exception):
    pass


class ExternalSolverError(MattingError):
    pass


def matting_laplacian(img, eps=DEFAULT_EPS, window=3, chunk=50_000):
    """Sparse (H*W) x (H*W) matting Laplacian from 3x3 color-line windows.

    Row sums are zero and the matrix is symmetric positive semi-definite.
    """
    if window != 3:
        raise ValueError("only 3x3 windows are supported")
    h, w = img.shape[:2]
    if h < window or w < window:
        raise MattingError(f"image {w}x{h} smaller than the {window}x{window} window")
    win_size = window * window

    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    win_inds = _windows_of(idx, window).reshape(-1, win_size)
    win_pix = _windows_of(img, window).reshape(-1, win_size, 3)
    n_win = win_inds.shape[0]

    rows = np.empty(n_win * win_size * win_size, dtype=np.int32)
    cols = np.empty_like(rows)
    data = np.empty(n_win * win_size * win_size, dtype=np.float64)
    eye = np.eye(win_size)

    pos = 0
    for start in range(0, n_win, chunk):
        pix = win_pix[start : start + chunk]
        inds = win_inds[start : start + chunk]
        mu = pix.mean(axis=1, keepdims=True)
        centered = pix - mu
        cov = np.einsum("nwi,nwj->nij", centered, centered) / win_size
        reg = cov + (eps / win_size) * np.eye(3)
        inv = np.linalg.inv(reg)
        vals = (1.0 + np.einsum("nwi,nij,nvj->nwv", centered, inv, centered)) / win_size
        contrib = eye[None, :, :] - vals
        m = len(inds)
        block = m * win_size * win_size
        rows[pos : pos + block] = np.repeat(inds, win_size, axis=1).reshape(-1)
        cols[pos : pos + block] = np.tile(inds, (1, win_size)).reshape(-1)
        data[pos : pos + block] = contrib.reshape(-1)
        pos += block

    lap = sparse.coo_matrix((data, (rows, cols)), shape=(h * w, h * w)).tocsr()
    return lap


def _windows_of(arr, window):
    from numpy.lib.stride_tricks import sliding_window_view

    view = sliding_window_view(arr, (window, window), axis=(0, 1))
    # -> (H-2, W-2, [extra dims], window, window); move window dims after the
    # spatial ones, keeping any channel axis last.
    if arr.ndim == 3:
        return np.transpose(view, (0, 1, 3, 4, 2))
    return view


def solve_alpha(lap, trimap, lam=DEFAULT_LAMBDA, rtol=CG_RTOL, callback=None):
    """Minimize a'*L*a + lam * sum_known (a_p - t_p)^2 by preconditioned CG,
    then clamp to [0,1]. Raises when the trimap has no known pixels or CG
    fails to reach the target residual."""
    h, w = trimap.shape
    known = (trimap == 0) | (trimap == 255)
    if not known.any():
        raise MattingError("trimap has no known pixels")
    t = (trimap == 255).astype(np.float64).ravel()
    kflat = known.ravel().astype(np.float64)

    a = (lap + sparse.diags(lam * kflat)).tocsr()
    b = lam * kflat * t
    precond = sparse.diags(1.0 / a.diagonal())
    x0 = np.where(kflat > 0, t, 0.5)
    x, info = cg(a, b, x0=x0, rtol=rtol, atol=0.0, M=precond, maxiter=20_000, callback=callback)
    if info != 0:
        residual = np.linalg.norm(a @ x - b) / max(np.linalg.norm(b), 1e-30)
        raise MattingError(f"conjugate gradient did not converge (info={info}, residual={residual:.3g})")
    return np.clip(x, 0.0, 1.0).reshape(h, w)


def estimate_alpha(img, trimap, eps=DEFAULT_EPS, lam=DEFAULT_LAMBDA, allow_downsample=True):
    """Full pipeline around the Laplacian solve. Images with a side above
    FULL_RES_LIMIT are solved at half resolution and bilinearly upsampled,
    with known trimap pixels re-imposed."""
    h, w = trimap.shape
    if allow_downsample and max(h, w) > FULL_RES_LIMIT:
        img2 = 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2]) if (
            h % 2 == 0 and w % 2 == 0
        ) else img[::2, ::2]
        tri2 = _downsample_trimap(trimap)
        lap = matting_laplacian(img2, eps=eps)
        alpha2 = solve_alpha(lap, tri2, lam=lam)
        alpha = _bilinear_upsample(alpha2, h, w)
        alpha[trimap == 255] = 1.0
        alpha[trimap == 0] = 0.0
        return np.clip(alpha, 0.0, 1.0)
    lap = matting_laplacian(img, eps=eps)
    return solve_alpha(lap, trimap, lam=lam)


def _downsample_trimap(trimap):
    h, w = trimap.shape
    t = trimap[: h - h % 2, : w - w % 2]
    blocks = t.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)
    out = np.full((h // 2, w // 2), 128, dtype=np.uint8)
    out[np.all(blocks == 255, axis=-1)] = 255
    out[np.all(blocks == 0, axis=-1)] = 0
    return out


def _bilinear_upsample(arr, h, w):
    from scipy.ndimage import map_coordinates

    ys = (np.arange(h) + 0.5) * arr.shape[0] / h - 0.5
    xs = (np.arange(w) + 0.5) * arr.shape[1] / w - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(arr, np.stack([gy.ravel(), gx.ravel()]), order=1, mode="nearest").reshape(h, w)


def composite_image(fg, bg, alpha):
    """Per-pixel blend: alpha * fg + (1 - alpha) * bg."""
    if fg.shape != bg.shape or fg.shape[:2] != alpha.shape:
        raise ValueError("composite inputs have mismatched dimensions")
    return alpha[..., None] * fg + (1.0 - alpha[..., None]) * bg


def external_solver(cmd_template, img, trimap, timeout=120.0):
    """Run a third-party matting command in a temp workspace.

    The template must contain {image}, {trimap} and {alpha} placeholders;
    the command is expected to write an 8-bit grayscale alpha PNG.
    """
    for ph in ("{image}", "{trimap}", "{alpha}"):
        if ph not in cmd_template:
            raise ExternalSolverError(f"command template missing placeholder {ph}")
    with tempfile.TemporaryDirectory(prefix="scribmat-solver-") as tmp:
        tmp = Path(tmp)
        image_path = tmp / "input.png"
        trimap_path = tmp / "trimap.png"
        alpha_path = tmp / "alpha.png"
        PILImage.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(image_path)
        PILImage.fromarray(trimap.astype(np.uint8), mode="L").save(trimap_path)
        cmd = cmd_template.format(image=image_path, trimap=trimap_path, alpha=alpha_path)
        try:
            proc = subprocess.run(
                shlex.split(cmd), capture_output=True, timeout=timeout, text=True
            )
        except subprocess.TimeoutExpired:
            raise ExternalSolverError(f"external solver timed out after {timeout}s")
        if proc.returncode != 0:
            raise ExternalSolverError(
                f"external solver exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        if not alpha_path.exists():
            raise ExternalSolverError("external solver produced no alpha file")
        try:
            with PILImage.open(alpha_path) as im:
                alpha = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except Exception as exc:
            raise ExternalSolverError(f"garbled alpha output: {exc}")
        if alpha.shape != trimap.shape:
            raise ExternalSolverError(
                f"dimension mismatch: alpha {alpha.shape} vs trimap {trimap.shape}"
            )
        return alpha
