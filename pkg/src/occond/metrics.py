"""Geometry-level evaluation metrics on precomputed embeddings and joints.

Face and body similarity are two-level means: cosine terms are averaged
over the humans of each image first, then over images.  The face score
clamps each term at zero; the body score does not.  Pose accuracy uses
root-aligned MPJPE in millimeters and a single-threshold keypoint AP.

Matching between target and estimated humans, the pelvis root choice,
the uniform keypoint sigma, and the single-threshold AP convention are
artifact decisions recorded in the report parameters.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError

EVAL_SCHEMA = "occond-eval/1"
EMBEDDING_DIM = 512
DEFAULT_SIGMA = 0.05
DEFAULT_OKS_THRESHOLD = 0.5
ROOT_JOINT = 0


@dataclass(frozen=True)
class JointSet3D:
    """3D joints of one human, millimeters."""

    joints: np.ndarray  # (J, 3)
    human_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=np.float64))
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise ValueError(f"joints must be (J, 3), got {self.joints.shape}")
        if not np.all(np.isfinite(self.joints)):
            raise ValueError("joints must be finite")


@dataclass(frozen=True)
class Keypoints2D:
    """2D keypoints of one human: (u, v, visibility) plus an area proxy."""

    points: np.ndarray  # (J, 3)
    scale: float  # object area proxy, pixels^2

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"keypoints must be (J, 3) with visibility, got {self.points.shape}")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")


def _cosine(a: np.ndarray, b: np.ndarray, context: str) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{context}: vector lengths differ ({a.shape} vs {b.shape})")
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise ValueError(f"{context}: zero-norm vector")
    # sqrt of a correctly rounded square is exact, so identical vectors
    # score exactly 1; clamp the 1-ulp overshoot of near-parallel pairs
    value = float(np.dot(a, b)) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, value))


def _two_level_mean(images, term, clamp: bool) -> float:
    if not images:
        raise ValueError("need at least one image")
    per_image = []
    for i, pairs in enumerate(images):
        if not pairs:
            raise ValueError(f"images[{i}]: no pairs to average")
        values = []
        for j, (ref, gen) in enumerate(pairs):
            value = term(ref, gen, f"images[{i}].pairs[{j}]")
            values.append(max(0.0, value) if clamp else value)
        per_image.append(sum(values) / len(values))
    return sum(per_image) / len(per_image)


def s_face(images) -> float:
    """Identity similarity: per-pair max(0, cosine), humans then images mean.

    ``images`` is a per-image list of (reference, generated) embedding pairs.
    """
    return _two_level_mean(images, _cosine, clamp=True)


def s_body(images) -> float:
    """Shape similarity: plain cosine (no clamp), humans then images mean."""
    return _two_level_mean(images, _cosine, clamp=False)


def match_humans(targets, preds, space: str = "3d") -> list[tuple[int, int]]:
    """Greedy mutual-nearest pairing between target and predicted humans.

    3D pairs by root-joint distance, 2D by keypoint similarity; each round
    pairs the globally best remaining pair, with ties resolved toward the
    lower (target, prediction) index.
    """
    if space not in ("2d", "3d"):
        raise ValueError(f"space must be '2d' or '3d', got {space!r}")
    scored = []
    for i, t in enumerate(targets):
        for j, p in enumerate(preds):
            if space == "3d":
                score = float(np.linalg.norm(t.joints[ROOT_JOINT] - p.joints[ROOT_JOINT]))
            else:
                score = -oks(t, p)
            scored.append((score, i, j))
    scored.sort()
    pairs = []
    used_t: set[int] = set()
    used_p: set[int] = set()
    for _, i, j in scored:
        if i not in used_t and j not in used_p:
            pairs.append((i, j))
            used_t.add(i)
            used_p.add(j)
    return sorted(pairs)


def mpjpe_pair(target: JointSet3D, pred: JointSet3D, align: bool = True) -> float:
    """Mean per-joint error of one matched pair, millimeters."""
    t = target.joints
    p = pred.joints
    if t.shape != p.shape:
        raise ValueError(f"joint counts differ: {t.shape} vs {p.shape}")
    if align:
        t = t - t[ROOT_JOINT]
        p = p - p[ROOT_JOINT]
    return float(np.linalg.norm(t - p, axis=1).mean())


def mpjpe(targets, preds, align: bool = True) -> float:
    """Root-aligned MPJPE over per-image human lists, millimeters.

    ``targets`` and ``preds`` are per-image lists of JointSet3D.  Humans
    are paired with ``match_humans``; leftovers on either side are
    excluded from the mean and reported with a warning.
    """
    per_image = []
    unmatched = 0
    for t_list, p_list in zip(targets, preds):
        pairs = match_humans(t_list, p_list, space="3d")
        unmatched += len(t_list) + len(p_list) - 2 * len(pairs)
        if not pairs:
            continue
        errors = [mpjpe_pair(t_list[i], p_list[j], align=align) for i, j in pairs]
        per_image.append(sum(errors) / len(errors))
    if unmatched:
        warnings.warn(f"{unmatched} humans had no match and were excluded", stacklevel=2)
    if not per_image:
        raise ValueError("no matched humans to evaluate")
    return float(sum(per_image) / len(per_image))


def oks(target: Keypoints2D, pred: Keypoints2D, sigmas: np.ndarray | None = None) -> float:
    """Object keypoint similarity over the target's visible keypoints."""
    t = target.points
    p = pred.points
    if t.shape != p.shape:
        raise ValueError(f"keypoint counts differ: {t.shape} vs {p.shape}")
    if sigmas is None:
        sigmas = np.full(len(t), DEFAULT_SIGMA)
    visible = t[:, 2] > 0
    if not visible.any():
        return 0.0
    d2 = (t[visible, 0] - p[visible, 0]) ** 2 + (t[visible, 1] - p[visible, 1]) ** 2
    terms = np.exp(-d2 / (2.0 * target.scale * np.asarray(sigmas)[visible] ** 2))
    return float(terms.mean())


def ap_at_oks(targets, preds, threshold: float = DEFAULT_OKS_THRESHOLD,
              sigmas: np.ndarray | None = None) -> float:
    """Single-threshold keypoint AP over per-image human lists.

    Per image, predictions are greedily matched to targets in descending
    similarity; matches at or above the threshold are true positives and
    AP is TP / max(#targets, #preds).  Images with neither targets nor
    predictions score 1.0 (with a warning); one empty side scores 0.0.
    The aggregate is the mean of per-image AP values.
    """
    per_image = []
    for t_list, p_list in zip(targets, preds):
        if not t_list and not p_list:
            warnings.warn("image with no targets and no predictions scored as 1.0", stacklevel=2)
            per_image.append(1.0)
            continue
        if not t_list or not p_list:
            per_image.append(0.0)
            continue
        scored = []
        for i, t in enumerate(t_list):
            for j, p in enumerate(p_list):
                scored.append((-oks(t, p, sigmas), i, j))
        scored.sort()
        used_t: set[int] = set()
        used_p: set[int] = set()
        tp = 0
        for neg, i, j in scored:
            if i in used_t or j in used_p:
                continue
            used_t.add(i)
            used_p.add(j)
            if -neg >= threshold:
                tp += 1
        per_image.append(tp / max(len(t_list), len(p_list)))
    if not per_image:
        raise ValueError("need at least one image")
    return float(sum(per_image) / len(per_image))


# ---------------------------------------------------------------------------
# Annotation files and report assembly
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    s_face: float | None = None
    s_body: float | None = None
    mpjpe_mm: float | None = None
    ap_05: float | None = None
    per_image: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "s_face": self.s_face,
            "s_body": self.s_body,
            "mpjpe_mm": self.mpjpe_mm,
            "ap_05": self.ap_05,
            "per_image": self.per_image,
            "params": self.params,
        }


ALL_METRICS = ("face", "body", "mpjpe", "ap")

_SIDE_FIELDS = {
    "face": "embedding",
    "body": "betas",
    "mpjpe": "joints3d_mm",
    "ap": "keypoints2d",
}


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise SchemaError(f"{path}.{key}" if path else key, "missing required field")
    return doc[key]


def _parse_side(side: dict, path: str, metrics) -> dict:
    out = {}
    for metric in metrics:
        fieldname = _SIDE_FIELDS[metric]
        value = _require(side, fieldname, path)
        fpath = f"{path}.{fieldname}"
        if metric == "face":
            emb = np.asarray(value, dtype=np.float64)
            if emb.shape != (EMBEDDING_DIM,):
                raise SchemaError(fpath, f"expected {EMBEDDING_DIM} floats, got shape {emb.shape}")
            if not np.all(np.isfinite(emb)) or np.linalg.norm(emb) == 0.0:
                raise SchemaError(fpath, "embedding must be finite with nonzero norm")
            out["embedding"] = emb
        elif metric == "body":
            out["betas"] = np.asarray(value, dtype=np.float64)
        elif metric == "mpjpe":
            try:
                out["joints3d"] = JointSet3D(np.asarray(value, dtype=np.float64))
            except ValueError as e:
                raise SchemaError(fpath, str(e)) from None
        elif metric == "ap":
            try:
                out["keypoints"] = Keypoints2D(
                    points=np.asarray(_require(value, "points", fpath), dtype=np.float64),
                    scale=float(_require(value, "scale", fpath)),
                )
            except (TypeError, ValueError) as e:
                raise SchemaError(fpath, str(e)) from None
    return out


def load_annotations(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def evaluate_annotations(
    doc: dict,
    metrics=ALL_METRICS,
    oks_threshold: float = DEFAULT_OKS_THRESHOLD,
    sigma: float = DEFAULT_SIGMA,
    root_align: bool = True,
) -> MetricReport:
    """Run the requested metrics over an occond-eval/1 document."""
    if doc.get("schema") != EVAL_SCHEMA:
        raise SchemaError("schema", f"expected {EVAL_SCHEMA!r}, got {doc.get('schema')!r}")
    metrics = tuple(metrics)
    for m in metrics:
        if m not in ALL_METRICS:
            raise ValueError(f"unknown metric {m!r}")
    images = _require(doc, "images", "")
    if not images:
        raise SchemaError("images", "need at least one image")

    parsed = []
    for i, image in enumerate(images):
        humans = _require(image, "humans", f"images[{i}]")
        if not humans:
            raise SchemaError(f"images[{i}].humans", "need at least one human")
        entries = []
        for j, human in enumerate(humans):
            hpath = f"images[{i}].humans[{j}]"
            ref = _parse_side(_require(human, "ref", hpath), f"{hpath}.ref", metrics)
            gen = _parse_side(_require(human, "gen", hpath), f"{hpath}.gen", metrics)
            entries.append((ref, gen))
        parsed.append({"id": image.get("id", f"image-{i}"), "humans": entries})

    report = MetricReport(
        params={
            "metrics": list(metrics),
            "oks_threshold": oks_threshold,
            "sigma": sigma,
            "root_joint": ROOT_JOINT,
            "root_align": root_align,
        }
    )
    per_image_rows = [{"id": p["id"], "n_humans": len(p["humans"])} for p in parsed]

    if "face" in metrics:
        images_pairs = [
            [(r["embedding"], g["embedding"]) for r, g in p["humans"]] for p in parsed
        ]
        for row, pairs in zip(per_image_rows, images_pairs):
            row["s_face"] = s_face([pairs])
        report.s_face = s_face(images_pairs)
    if "body" in metrics:
        images_pairs = [[(r["betas"], g["betas"]) for r, g in p["humans"]] for p in parsed]
        for row, pairs in zip(per_image_rows, images_pairs):
            row["s_body"] = s_body([pairs])
        report.s_body = s_body(images_pairs)
    if "mpjpe" in metrics:
        targets = [[r["joints3d"] for r, _ in p["humans"]] for p in parsed]
        preds = [[g["joints3d"] for _, g in p["humans"]] for p in parsed]
        for row, t, p in zip(per_image_rows, targets, preds):
            row["mpjpe_mm"] = mpjpe([t], [p], align=root_align)
        report.mpjpe_mm = mpjpe(targets, preds, align=root_align)
    if "ap" in metrics:
        targets = [[r["keypoints"] for r, _ in p["humans"]] for p in parsed]
        preds = [[g["keypoints"] for _, g in p["humans"]] for p in parsed]

        def uniform(kp_list):
            return np.full(len(kp_list[0].points), sigma) if kp_list else None

        for row, t, p in zip(per_image_rows, targets, preds):
            row["ap"] = ap_at_oks([t], [p], threshold=oks_threshold, sigmas=uniform(t))
        report.ap_05 = float(
            sum(row["ap"] for row in per_image_rows) / len(per_image_rows)
        )
    report.per_image = per_image_rows
    return report
