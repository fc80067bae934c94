"""k-nearest-neighbour graphs over hypothesis points.

Both modes return ``(n, k)`` neighbour indices ordered by increasing distance,
ties broken by lower point index, self excluded. Distances are always
computed as ``sum((a - b)**2)`` in the same order so the two modes agree bit-for-bit.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

_CHUNK_ELEMS = 1 << 22


def _sq_norm(a: Tensor, b: Tensor) -> Tensor:
    """``sum((a - b)**2)`` over the last axis, accumulated x, y, z in order (broadcasting)."""
    out = a[..., 0] - b[..., 0]
    out.mul_(out)
    for c in (1, 2):
        d = a[..., c] - b[..., c]
        out.add_(d.mul_(d))
    return out


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    return _sq_norm(a.unsqueeze(-2), b)


def _order_rows(dist: Tensor, cand: Tensor, k: int) -> Tensor:
    """Pick ``k`` smallest of each row of ``dist`` with index tie-break.

    ``cand`` holds the point index of every column, increasing along the row
    wherever a tie is possible.
    """
    n, c = dist.shape
    vals, pos = torch.topk(dist, k, dim=1, largest=False, sorted=True)
    kth = vals[:, -1:]
    n_le = (dist <= kth).sum(1)
    ties = n_le > k
    # Rows without a boundary tie: order the k chosen by (distance, index).
    idx = torch.gather(cand, 1, pos)
    order = torch.argsort(idx, dim=1)
    idx = torch.gather(idx, 1, order)
    d_sorted = torch.gather(vals, 1, order)
    order = torch.argsort(d_sorted, dim=1, stable=True)
    out = torch.gather(idx, 1, order)
    if ties.any():
        rows = ties.nonzero().flatten()
        sub_d = dist[rows]
        sub_c = cand[rows]
        o = torch.argsort(sub_c, dim=1)
        sub_d = torch.gather(sub_d, 1, o)
        sub_c = torch.gather(sub_c, 1, o)
        o2 = torch.argsort(sub_d, dim=1, stable=True)[:, :k]
        out[rows] = torch.gather(sub_c, 1, o2)
    return out


def knn_exhaustive(points: Tensor, k: int) -> Tensor:
    """Exact Euclidean kNN over all ``points`` ``(n, 3)``."""
    pts = points.detach()
    n = pts.shape[0]
    if n < k + 1:
        raise ValueError(f"kNN with k={k} needs at least {k + 1} points, got {n}")
    cand = torch.arange(n).expand(min(n, max(1, _CHUNK_ELEMS // n)), n)
    rows_per = cand.shape[0]
    out = []
    for start in range(0, n, rows_per):
        q = pts[start : start + rows_per]
        d = _sq_dist(q, pts)
        r = torch.arange(start, start + len(q))
        d[torch.arange(len(q)), r] = float("inf")
        out.append(_order_rows(d, cand[: len(q)], k))
    return torch.cat(out)


def knn_brute_force(points, k: int) -> list[list[int]]:
    """Reference O(n^2) kNN by full sort of (distance, index) pairs."""
    pts = torch.as_tensor(points).detach().to(torch.float64) if not isinstance(points, Tensor) else points.detach()
    n = len(pts)
    result = []
    for i in range(n):
        d = ((pts - pts[i]) ** 2).sum(-1).tolist()
        keyed = sorted((d[j], j) for j in range(n) if j != i)
        result.append([j for _, j in keyed[:k]])
    return result


def knn_windowed(grid_points: Tensor, point_index: Tensor, k: int, window: int = 9) -> Tensor:
    """kNN restricted to a ``window x window`` pixel neighbourhood of hypotheses.

    ``grid_points``: ``(H, W, M, 3)`` hypothesis positions laid out on the
    pixel grid (``M = 2m + 1``). ``point_index``: ``(H, W)`` base-point index
    of each pixel or -1 where the pixel carries no points. Hypothesis ``j`` of
    base point ``b`` has global index ``b * M + j``. Points whose window holds
    fewer than ``k`` other points fall back to the exhaustive search.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    h, w, m, _ = grid_points.shape
    n_base = int((point_index >= 0).sum())
    n = n_base * m
    if n < k + 1:
        raise ValueError(f"kNN with k={k} needs at least {k + 1} points, got {n}")
    r = window // 2
    pts = grid_points.detach()
    dtype = pts.dtype
    gidx = torch.where(
        point_index.unsqueeze(-1) >= 0,
        point_index.unsqueeze(-1) * m + torch.arange(m),
        torch.full((h, w, m), -1, dtype=torch.long),
    )
    # (1, M*3, H, W) padded, unfolded to every window position.
    p = pts.permute(2, 3, 0, 1).reshape(1, m * 3, h, w)
    p = F.pad(p, (r, r, r, r))
    g = F.pad(gidx.permute(2, 0, 1).reshape(1, m, h, w).to(dtype), (r, r, r, r), value=-1.0)
    win = window * window
    cp = F.unfold(p, window).view(m, 3, win, h, w)
    cg = F.unfold(g, window).view(m, win, h, w)
    sel = point_index >= 0
    cp = cp.permute(3, 4, 2, 0, 1)[sel]  # (B, win, M, 3): row-major window, hypotheses inner
    cg = cg.permute(2, 3, 1, 0)[sel].round().long()  # (B, win, M)
    base_order = point_index[sel]
    perm = torch.argsort(base_order)
    cp, cg = cp[perm], cg[perm]
    nb = cp.shape[0]
    cp = cp.reshape(nb, win * m, 3)
    cg = cg.reshape(nb, win * m)
    query = pts[sel][perm]  # (B, M, 3)
    out = torch.empty(nb, m, k, dtype=torch.long)
    chunk = max(1, _CHUNK_ELEMS // (win * m * m * 3))
    for s in range(0, nb, chunk):
        q = query[s : s + chunk]
        c = cp[s : s + chunk]
        ci = cg[s : s + chunk]
        d = _sq_norm(q.unsqueeze(2), c.unsqueeze(1))  # (b, M, win*M)
        self_idx = (torch.arange(s, s + len(q)).view(-1, 1, 1) * m + torch.arange(m).view(1, -1, 1))
        bad = (ci.unsqueeze(1) < 0) | (ci.unsqueeze(1) == self_idx)
        d = d.masked_fill(bad, float("inf"))
        ci_rows = ci.unsqueeze(1).expand(-1, m, -1).reshape(-1, win * m)
        d_rows = d.reshape(-1, win * m)
        enough = (~bad).reshape(-1, win * m).sum(1) >= k
        res = torch.zeros(len(d_rows), k, dtype=torch.long)
        if enough.any():
            res[enough] = _order_rows(d_rows[enough], ci_rows[enough], k)
        if (~enough).any():
            all_pts = query.reshape(-1, 3)
            for row in (~enough).nonzero().flatten().tolist():
                gi = (s * m) + row
                dd = _sq_norm(all_pts, all_pts[gi])
                dd[gi] = float("inf")
                res[row] = _order_rows(dd.unsqueeze(0), torch.arange(n).unsqueeze(0), k)[0]
        out[s : s + chunk] = res.view(-1, m, k)
    return out.reshape(n, k)
