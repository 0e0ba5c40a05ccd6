"""Teacher-student self-training loop with a toy differentiable detector.

The loop follows the usual mean-teacher recipe: the teacher predicts on the
original target frame, confident predictions become pseudo labels, the student
trains on a re-sampled variant against those labels plus the graph-consistency
losses, and the teacher tracks the student by exponential moving average.

The toy detector stands in for a deep detector at desk scale: connected-
component clustering proposes objects, and a small parameter vector (a global
center offset plus per-class sizes) makes predictions differentiable so every
gradient can be checked against finite differences.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree

from . import rng
from .errors import DegenerateDenominator, LengthMismatch
from .object_graph import (
    BoxPrediction,
    ConsistencyConfig,
    GraphConfig,
    MatchConfig,
    build_graph,
    consistency_loss,
    features_of,
    greedy_iou_match,
    matched_graph,
)
from .rbrs import RbrsConfig, apply_rbrs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabelConfig:
    """Teacher predictions above c_th become training targets."""

    c_th: float = 0.5


@dataclass(frozen=True)
class EmaConfig:
    """Teacher smoothing coefficient; 1 freezes the teacher, 0 copies the student."""

    alpha: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


def filter_pseudo_labels(preds, cfg: PseudoLabelConfig) -> list[BoxPrediction]:
    """Keep predictions with confidence strictly above the threshold, in order."""
    return [p for p in preds if p.confidence > cfg.c_th]


def ema_update(theta_t: np.ndarray, theta_s: np.ndarray, cfg: EmaConfig) -> np.ndarray:
    """theta_t' = alpha * theta_t + (1 - alpha) * theta_s, elementwise.

    Computed as teacher + (1 - alpha) * (student - teacher), which keeps every
    output entry between the two inputs; the endpoints alpha in {0, 1} return
    exact copies. The input floating dtype is preserved.

    Raises:
        LengthMismatch: different parameter vector lengths.
    """
    theta_t = np.asarray(theta_t)
    theta_s = np.asarray(theta_s)
    if theta_t.shape != theta_s.shape:
        raise LengthMismatch(f"{theta_t.shape} vs {theta_s.shape}")
    if cfg.alpha == 1.0:
        return theta_t.copy()
    if cfg.alpha == 0.0:
        return theta_s.copy()
    # 1 - alpha is exact in binary64 (Sterbenz), so the only per-step rounding
    # that matters is the final addition.
    return theta_t + (1.0 - cfg.alpha) * (theta_s - theta_t)


def total_loss(l_det: float, l_cons: float) -> float:
    """Training objective: detection loss plus consistency loss."""
    if not (np.isfinite(l_det) and np.isfinite(l_cons)):
        raise ValueError("loss terms must be finite")
    return l_det + l_cons


def closed_gap(ap_model: float, ap_source: float, ap_oracle: float) -> float:
    """Percentage of the source-to-oracle gap closed by the adapted model.

    Raises:
        DegenerateDenominator: oracle and source scores coincide.
    """
    if ap_oracle == ap_source:
        raise DegenerateDenominator("oracle equals source; gap undefined")
    return (ap_model - ap_source) / (ap_oracle - ap_source) * 100.0


class DetectorContract(Protocol):
    """Capabilities the self-training loop needs from a detector."""

    def predict(self, cloud: np.ndarray, theta: np.ndarray) -> list[BoxPrediction]: ...

    def det_loss_and_grad(
        self, cloud: np.ndarray, theta: np.ndarray, labels, preds=None
    ) -> tuple[float, np.ndarray]: ...

    def feature_grad_to_param(
        self, grad_features, grad_centers, grad_sizes, grad_yaws, preds
    ) -> np.ndarray: ...


class ToyDetector:
    """Cluster-and-regress detector over a tiny parameter vector.

    Points are grouped by connected components at ``cluster_distance``;
    oversized components are treated as background (walls, ground) and
    components below ``min_points`` as noise. Per kept cluster:

    * center = point centroid + theta_offset (3 trainable params),
    * size   = theta_size for the predicted class (3 trainable params/class),
    * yaw    = principal axis of the cluster's BEV covariance,
    * confidence = n / (n + anchor_points),
    * feature = [center / feature_range, size, sin yaw, cos yaw, confidence].

    The detection loss is the matched-pair MSE over centers and sizes, so it
    is quadratic in theta and every gradient is analytic.
    """

    FEATURE_DIM = 9

    def __init__(
        self,
        class_anchors=None,
        cluster_distance: float = 1.0,
        min_points: int = 3,
        anchor_points: float = 5.0,
        feature_range: float = 50.0,
        max_extent: float = 8.0,
        match_iou: float = 0.0,
    ):
        # class_anchors: per-class nominal BEV diameter; a cluster is
        # classified by its footprint diameter (max pairwise distance), which
        # is rotation-invariant and survives beam thinning (masking removes
        # rows, not azimuth coverage). None means one class.
        if class_anchors is None:
            self.class_anchors = None
            self.n_classes = 1
        else:
            self.class_anchors = np.asarray(class_anchors, dtype=np.float64).reshape(-1)
            self.n_classes = len(self.class_anchors)
        self.cluster_distance = cluster_distance
        self.min_points = min_points
        self.anchor_points = anchor_points
        self.feature_range = feature_range
        self.max_extent = max_extent
        self.match_iou = match_iou

    @property
    def param_count(self) -> int:
        return 3 + 3 * self.n_classes

    def init_params(self, init_size: float = 2.0) -> np.ndarray:
        theta = np.zeros(self.param_count)
        theta[3:] = init_size
        return theta

    def _offset(self, theta: np.ndarray) -> np.ndarray:
        return theta[:3]

    def _sizes(self, theta: np.ndarray) -> np.ndarray:
        return theta[3:].reshape(self.n_classes, 3)

    def _clusters(self, points: np.ndarray) -> list[np.ndarray]:
        """Connected components at the distance threshold, ordered by first point."""
        n = len(points)
        pairs = cKDTree(points).query_pairs(self.cluster_distance, output_type="ndarray")
        graph = coo_matrix(
            (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
        )
        _, labels = connected_components(graph, directed=False)
        order = np.argsort(labels, kind="stable")
        boundaries = np.flatnonzero(np.diff(labels[order])) + 1
        groups = np.split(order, boundaries)
        groups.sort(key=lambda g: g[0])
        return groups

    def predict(self, cloud: np.ndarray, theta: np.ndarray) -> list[BoxPrediction]:
        cloud = np.asarray(cloud, dtype=np.float64)
        if cloud.shape[0] == 0:
            return []
        points = cloud[:, :3]
        offset = self._offset(theta)
        sizes = self._sizes(theta)
        preds = []
        for members in self._clusters(points):
            n = len(members)
            if n < self.min_points:
                continue
            pts = points[members]
            diameter = self._bev_diameter(pts[:, :2])
            if diameter > self.max_extent:
                continue  # background structure, not an object
            centroid = pts.mean(axis=0)
            class_id = self._classify(diameter)
            yaw = self._principal_yaw(pts[:, :2])
            conf = n / (n + self.anchor_points)
            center = centroid + offset
            size = sizes[class_id]
            feature = np.concatenate(
                [center / self.feature_range, size, [np.sin(yaw), np.cos(yaw), conf]]
            )
            preds.append(
                BoxPrediction(
                    center=center,
                    size=size.copy(),
                    yaw=yaw,
                    class_id=class_id,
                    confidence=conf,
                    feature=feature,
                )
            )
        return preds

    @staticmethod
    def _bev_diameter(bev_points: np.ndarray) -> float:
        hull = bev_points
        if len(hull) > 60:
            try:
                hull = hull[ConvexHull(hull).vertices]
            except QhullError:
                # Degenerate (collinear) footprint: the spread along the
                # principal axis is the exact diameter.
                centered = bev_points - bev_points.mean(axis=0)
                _, _, vt = np.linalg.svd(centered, full_matrices=False)
                proj = centered @ vt[0]
                return float(proj.max() - proj.min())
        diff = hull[:, None, :] - hull[None, :, :]
        return float(np.sqrt((diff**2).sum(axis=2).max()))

    def _classify(self, diameter: float) -> int:
        if self.class_anchors is None:
            return 0
        return int(np.argmin(np.abs(self.class_anchors - diameter)))

    @staticmethod
    def _principal_yaw(bev_points: np.ndarray) -> float:
        centered = bev_points - bev_points.mean(axis=0)
        sxx = float((centered[:, 0] ** 2).mean())
        syy = float((centered[:, 1] ** 2).mean())
        sxy = float((centered[:, 0] * centered[:, 1]).mean())
        if sxx == syy and sxy == 0.0:
            return 0.0
        return 0.5 * float(np.arctan2(2.0 * sxy, sxx - syy))

    def det_loss_and_grad(
        self, cloud: np.ndarray, theta: np.ndarray, labels, preds=None
    ) -> tuple[float, np.ndarray]:
        """Matched-pair MSE of (center, size) against labels, with d/d theta.

        Matching is greedy by rotated BEV IoU; unmatched predictions and
        labels contribute nothing. Zero matches give zero loss and gradient.
        """
        if preds is None:
            preds = self.predict(cloud, theta)
        grad = np.zeros_like(np.asarray(theta, dtype=np.float64))
        pairs = greedy_iou_match(preds, labels, self.match_iou)
        if not pairs:
            return 0.0, grad
        n = len(pairs)
        loss = 0.0
        for pi, li in pairs:
            dc = preds[pi].center - labels[li].center
            db = preds[pi].size - labels[li].size
            loss += float(dc @ dc) + float(db @ db)
            grad[:3] += 2.0 * dc / n
            k = preds[pi].class_id
            grad[3 + 3 * k : 6 + 3 * k] += 2.0 * db / n
        return loss / n, grad

    def feature_grad_to_param(
        self, grad_features, grad_centers, grad_sizes, grad_yaws, preds
    ) -> np.ndarray:
        """Chain per-prediction feature/box gradients into the parameter vector.

        Centers depend on theta_offset with identity Jacobian, sizes on the
        class's theta_size block; yaw and confidence carry no theta
        dependence, so their gradient components are dropped.
        """
        grad = np.zeros(self.param_count)
        for i, pred in enumerate(preds):
            gf = np.asarray(grad_features[i])
            grad[:3] += gf[:3] / self.feature_range + np.asarray(grad_centers[i])
            k = pred.class_id
            grad[3 + 3 * k : 6 + 3 * k] += gf[3:6] + np.asarray(grad_sizes[i])
        return grad


@dataclass(frozen=True)
class DtsConfig:
    """Everything one self-training step needs besides data and parameters."""

    beams: int
    rbrs: RbrsConfig = field(default_factory=lambda: RbrsConfig(mode="downsample"))
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    cons: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    learning_rate: float = 1e-2


@dataclass(frozen=True)
class StepResult:
    theta_student: np.ndarray
    theta_teacher: np.ndarray
    det_loss: float
    node_loss: float
    edge_loss: float
    cons_loss: float
    loss: float
    matched_pairs: int
    pseudo_labels: int


def dts_step(
    cloud: np.ndarray,
    theta_student: np.ndarray,
    theta_teacher: np.ndarray,
    detector: DetectorContract,
    cfg: DtsConfig,
    seed: int,
) -> StepResult:
    """One self-training step on one target frame.

    The teacher predicts on the original cloud, the student on its re-sampled
    variant; confident teacher boxes supervise the student's detection loss;
    matched object graphs add the consistency loss; the student takes a plain
    gradient-descent step and the teacher follows by EMA.
    """
    teacher_preds = detector.predict(cloud, theta_teacher)
    student_cloud = apply_rbrs(cloud, cfg.beams, replace(cfg.rbrs, seed=seed))
    student_preds = detector.predict(student_cloud, theta_student)

    pseudo = filter_pseudo_labels(teacher_preds, cfg.pseudo)
    if pseudo:
        l_det, g_det = detector.det_loss_and_grad(
            student_cloud, theta_student, pseudo, preds=student_preds
        )
    else:
        logger.debug("no pseudo labels above c_th=%.3f; skipping detection loss",
                     cfg.pseudo.c_th)
        l_det, g_det = 0.0, np.zeros_like(theta_student)

    graph_t = build_graph(teacher_preds, cfg.graph)
    graph_s = build_graph(student_preds, cfg.graph)
    pairs = greedy_iou_match(graph_t.nodes, graph_s.nodes, cfg.match.iou_th)
    matched_t = [graph_t.nodes[ti] for ti, _ in pairs]
    matched_s = [graph_s.nodes[si] for _, si in pairs]
    f_t = features_of(matched_t) if matched_t else np.zeros((0, detector.FEATURE_DIM))
    f_s = features_of(matched_s) if matched_s else np.zeros((0, detector.FEATURE_DIM))
    cons = consistency_loss(
        matched_graph(matched_s, cfg.graph),
        matched_graph(matched_t, cfg.graph),
        f_s,
        f_t,
        cfg.cons,
        cfg.graph,
    )

    # Scatter matched-node gradients back onto the full student prediction list.
    n_preds = len(student_preds)
    gf = np.zeros((n_preds, f_s.shape[1] if n_preds else 0))
    gc = np.zeros((n_preds, 3))
    gb = np.zeros((n_preds, 3))
    gx = np.zeros(n_preds)
    student_node_idx = [
        i for i, p in enumerate(student_preds)
        if p.confidence > cfg.graph.node_conf_threshold
    ]
    for k, (_, si) in enumerate(pairs):
        full = student_node_idx[si]
        gf[full] = cons.grad_features[k]
        gc[full] = cons.grad_centers[k]
        gb[full] = cons.grad_sizes[k]
        gx[full] = cons.grad_yaws[k]
    g_cons = detector.feature_grad_to_param(gf, gc, gb, gx, student_preds)

    new_student = theta_student - cfg.learning_rate * (g_det + g_cons)
    new_teacher = ema_update(theta_teacher, new_student, cfg.ema)
    return StepResult(
        theta_student=new_student,
        theta_teacher=new_teacher,
        det_loss=l_det,
        node_loss=cons.node_loss,
        edge_loss=cons.edge_loss,
        cons_loss=cons.loss,
        loss=total_loss(l_det, cons.loss),
        matched_pairs=len(pairs),
        pseudo_labels=len(pseudo),
    )


def pretrain(
    dataset,
    detector: DetectorContract,
    rbrs_cfg: RbrsConfig,
    beams: int,
    epochs: int,
    learning_rate: float,
    seed: int,
    theta_init: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient descent on the detection loss over re-sampled source frames.

    ``dataset`` is a sequence of (cloud, labels) pairs. Per-frame augmentation
    seeds derive from (seed, epoch, frame index), so the schedule is
    reproducible and order-independent.
    """
    theta = detector.init_params() if theta_init is None else np.array(theta_init, dtype=np.float64)
    for epoch in range(epochs):
        for i, (cloud, labels) in enumerate(dataset):
            frame_seed = rng.derive_seed(seed, rng.FRAME, epoch, i)
            aug = apply_rbrs(cloud, beams, replace(rbrs_cfg, seed=frame_seed))
            _, grad = detector.det_loss_and_grad(aug, theta, labels)
            theta = theta - learning_rate * grad
    return theta


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    det_loss: float
    node_loss: float
    edge_loss: float
    cons_loss: float
    loss: float
    matched_pairs: int
    pseudo_labels: int
    target_mse: float | None


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch curves of the self-training run."""

    epochs: tuple

    CSV_FIELDS = (
        "epoch", "det_loss", "node_loss", "edge_loss", "cons_loss",
        "loss", "matched_pairs", "pseudo_labels", "target_mse",
    )

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            writer.writeheader()
            for e in self.epochs:
                writer.writerow(asdict(e))


def evaluate_mse(clouds, labels_per_frame, detector: DetectorContract, theta: np.ndarray) -> float:
    """Mean matched-pair MSE of (center, size) over frames, against ground truth."""
    losses = [
        detector.det_loss_and_grad(cloud, theta, labels)[0]
        for cloud, labels in zip(clouds, labels_per_frame)
    ]
    return float(np.mean(losses)) if losses else 0.0


def dts_train(
    target_clouds,
    theta_pretrained: np.ndarray,
    detector: DetectorContract,
    cfg: DtsConfig,
    epochs: int,
    seed: int = 0,
    eval_labels=None,
) -> tuple[np.ndarray, TrainReport]:
    """Run dts_step over every target frame per epoch.

    The teacher starts as a copy of the pre-trained student and is the model
    returned and evaluated: it averages out the student's augmented-view bias,
    which is the point of keeping it. ``eval_labels`` (target ground truth,
    never trained on) enables the per-epoch MSE column.
    """
    theta_s = np.array(theta_pretrained, dtype=np.float64)
    theta_t = theta_s.copy()
    stats = []
    for epoch in range(epochs):
        sums = np.zeros(5)
        matched = 0
        pseudo = 0
        for i, cloud in enumerate(target_clouds):
            step = dts_step(
                cloud, theta_s, theta_t, detector, cfg,
                seed=rng.derive_seed(seed, rng.FRAME, epoch, i),
            )
            theta_s, theta_t = step.theta_student, step.theta_teacher
            sums += (step.det_loss, step.node_loss, step.edge_loss,
                     step.cons_loss, step.loss)
            matched += step.matched_pairs
            pseudo += step.pseudo_labels
        n = max(len(target_clouds), 1)
        mse = None
        if eval_labels is not None:
            mse = evaluate_mse(target_clouds, eval_labels, detector, theta_t)
        stats.append(EpochStats(
            epoch=epoch,
            det_loss=float(sums[0] / n),
            node_loss=float(sums[1] / n),
            edge_loss=float(sums[2] / n),
            cons_loss=float(sums[3] / n),
            loss=float(sums[4] / n),
            matched_pairs=matched,
            pseudo_labels=pseudo,
            target_mse=mse,
        ))
    return theta_t, TrainReport(epochs=tuple(stats))
