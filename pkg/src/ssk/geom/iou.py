"""Rotated-rectangle intersection, BEV/3D IoU and rotated NMS."""

import numpy as np

from ssk.geom.boxes import Box3D, bev_corners

AREA_EPS = 1e-12


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """
    Sutherland–Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``.

    Returns the intersection polygon (K×2, possibly empty).
    """
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a

        def side(p, a=a, edge=edge):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inputs, output = output, []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp: float, sq: float) -> tuple[float, float]:
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection area of the BEV rectangles of two 7-vector boxes."""
    reach = 0.5 * (np.hypot(a[3], a[4]) + np.hypot(b[3], b[4]))
    if np.hypot(a[0] - b[0], a[1] - b[1]) > reach:
        return 0.0
    area = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    return area if area > AREA_EPS else 0.0


def iou_bev_arrays(a: np.ndarray, b: np.ndarray) -> float:
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d_arrays(a: np.ndarray, b: np.ndarray) -> float:
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    top = min(a[2] + a[5] / 2, b[2] + b[5] / 2)
    bottom = max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    overlap = max(top - bottom, 0.0)
    if overlap <= 0.0:
        return 0.0
    inter_vol = inter * overlap
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter_vol
    return float(min(max(inter_vol / union, 0.0), 1.0))


def iou_bev(a: Box3D, b: Box3D) -> float:
    return iou_bev_arrays(a.as_array(), b.as_array())


def iou_3d(a: Box3D, b: Box3D) -> float:
    return iou_3d_arrays(a.as_array(), b.as_array())


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray, kind: str = "bev") -> np.ndarray:
    """
    Pairwise IoU between N×7 and M×7 box arrays.

    Pairs whose BEV circumcircles do not touch are skipped.
    """
    if kind not in ("bev", "3d"):
        raise ValueError(f"Unknown IoU kind: {kind}")
    fn = iou_bev_arrays if kind == "bev" else iou_3d_arrays
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if out.size == 0:
        return out
    radius_a = 0.5 * np.hypot(boxes_a[:, 3], boxes_a[:, 4])
    radius_b = 0.5 * np.hypot(boxes_b[:, 3], boxes_b[:, 4])
    for j, b in enumerate(boxes_b):
        dist = np.hypot(boxes_a[:, 0] - b[0], boxes_a[:, 1] - b[1])
        for i in np.nonzero(dist <= radius_a + radius_b[j])[0]:
            out[i, j] = fn(boxes_a[i], b)
    return out


def rotated_nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, top_n: int | None = None) -> np.ndarray:
    """
    Greedy BEV-IoU suppression in descending score order.

    Equal scores keep the lower index first. Returns kept indices,
    highest score first, at most ``top_n`` of them.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    for i in order:
        if top_n is not None and len(keep) >= top_n:
            break
        if all(iou_bev_arrays(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(int(i))
    return np.array(keep, dtype=np.int64)
