"""Object graphs over box predictions and graph-consistency losses.

Confident detections become nodes of a fully-connected graph whose edge
weights decay with center distance, size difference, and heading difference.
Two such graphs (one per detector branch, built over the same matched node
ordering) are compared through a node-level cosine term and an edge-level
term combining edge-weight alignment with a graph-Laplacian smoothness
difference. All losses return analytic gradients.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroNormFeature
from .geometry import BevBox, rotated_bev_iou, wrap_angle


@dataclass(eq=False)
class BoxPrediction:
    """7-DOF box with class, confidence, and an optional feature vector."""

    center: np.ndarray  # (3,) cx, cy, cz in meters
    size: np.ndarray  # (3,) l, w, h in meters
    yaw: float
    class_id: int = 0
    confidence: float = 1.0
    feature: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=np.float64)

    def bev(self) -> BevBox:
        return BevBox(
            cx=float(self.center[0]),
            cy=float(self.center[1]),
            length=float(self.size[0]),
            width=float(self.size[1]),
            yaw=float(wrap_angle(self.yaw)),
        )


def centers_of(nodes) -> np.ndarray:
    return np.array([n.center for n in nodes]).reshape(len(nodes), 3)


def sizes_of(nodes) -> np.ndarray:
    return np.array([n.size for n in nodes]).reshape(len(nodes), 3)


def yaws_of(nodes) -> np.ndarray:
    return np.array([n.yaw for n in nodes], dtype=np.float64)


def features_of(nodes) -> np.ndarray:
    return np.array([n.feature for n in nodes], dtype=np.float64)


@dataclass(frozen=True)
class GraphConfig:
    """Edge-weight parameters: size weight, yaw weight, temperature, node gate.

    ``wrap_yaw`` wraps heading differences to (-pi, pi] before squaring;
    disabling it restores the raw squared difference for strict replication.
    """

    eps1: float = 5.0
    eps2: float = 20.0
    tau: float = 13.0
    node_conf_threshold: float = 0.5
    wrap_yaw: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class MatchConfig:
    iou_th: float = 0.1


@dataclass(frozen=True)
class ConsistencyConfig:
    """beta1/beta2 weight the node/edge losses; gamma balances the edge terms."""

    beta1: float = 0.05
    beta2: float = 0.3
    gamma: float = 0.5


@dataclass(eq=False)
class ObjectGraph:
    """Ordered node list plus the symmetric zero-diagonal weight matrix."""

    nodes: tuple
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


def edge_weight(a: BoxPrediction, b: BoxPrediction, cfg: GraphConfig) -> float:
    """exp(-(|dc|^2 + eps1*|db|^2 + eps2*dyaw^2) / tau^2); equals 1 iff boxes coincide."""
    dyaw = a.yaw - b.yaw
    if cfg.wrap_yaw:
        dyaw = float(wrap_angle(dyaw))
    q = (
        float(np.sum((a.center - b.center) ** 2))
        + cfg.eps1 * float(np.sum((a.size - b.size) ** 2))
        + cfg.eps2 * dyaw * dyaw
    )
    return float(np.exp(-q / (cfg.tau * cfg.tau)))


def weight_matrix(nodes, cfg: GraphConfig) -> np.ndarray:
    """Pairwise edge weights for an ordered node set (zero diagonal, exact W = W^T)."""
    n = len(nodes)
    if n == 0:
        return np.zeros((0, 0))
    c = centers_of(nodes)
    b = sizes_of(nodes)
    xi = yaws_of(nodes)
    dc = ((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    db = ((b[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    dxi = xi[:, None] - xi[None, :]
    if cfg.wrap_yaw:
        dxi = wrap_angle(dxi)
    q = dc + cfg.eps1 * db + cfg.eps2 * dxi * dxi
    w = np.exp(-q / (cfg.tau * cfg.tau))
    w = np.triu(w, 1)
    return w + w.T


def build_graph(preds, cfg: GraphConfig) -> ObjectGraph:
    """Keep predictions with confidence strictly above the gate, in input order."""
    nodes = tuple(p for p in preds if p.confidence > cfg.node_conf_threshold)
    return ObjectGraph(nodes=nodes, weights=weight_matrix(nodes, cfg))


def matched_graph(nodes, cfg: GraphConfig) -> ObjectGraph:
    """Graph over an already-matched node list (no confidence gating)."""
    nodes = tuple(nodes)
    return ObjectGraph(nodes=nodes, weights=weight_matrix(nodes, cfg))


def greedy_iou_match(boxes_a, boxes_b, iou_th: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching of two box lists by descending rotated BEV IoU.

    Pairs are accepted while IoU > iou_th and both endpoints are unused; ties
    break on (index in a, index in b). Unmatched boxes are discarded.
    """
    candidates = []
    for ai, a in enumerate(boxes_a):
        ab = a.bev()
        for bi, b in enumerate(boxes_b):
            iou = rotated_bev_iou(ab, b.bev())
            if iou > iou_th:
                candidates.append((-iou, ai, bi))
    candidates.sort()
    a_used = set()
    b_used = set()
    pairs = []
    for _, ai, bi in candidates:
        if ai in a_used or bi in b_used:
            continue
        a_used.add(ai)
        b_used.add(bi)
        pairs.append((ai, bi))
    return pairs


def match_nodes(
    teacher: ObjectGraph, student: ObjectGraph, cfg: MatchConfig
) -> list[tuple[int, int]]:
    """Matched (teacher index, student index) pairs between two graphs."""
    return greedy_iou_match(teacher.nodes, student.nodes, cfg.iou_th)


def node_consistency_loss(
    features_student: np.ndarray, features_teacher: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean of exp(-cosine(f_S, f_T)) over matched pairs, with d/dF_S.

    Zero pairs give loss 0 and an empty gradient.

    Raises:
        ZeroNormFeature: any feature row with zero norm.
        DimensionMismatch: feature arrays of different shapes.
    """
    fs = np.asarray(features_student, dtype=np.float64)
    ft = np.asarray(features_teacher, dtype=np.float64)
    if fs.shape != ft.shape or fs.ndim != 2:
        raise DimensionMismatch(f"feature shapes {fs.shape} vs {ft.shape}")
    n = fs.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(fs)
    ns = np.linalg.norm(fs, axis=1)
    nt = np.linalg.norm(ft, axis=1)
    if np.any(ns == 0.0) or np.any(nt == 0.0):
        raise ZeroNormFeature("zero-norm feature vector")
    cos = (fs * ft).sum(axis=1) / (ns * nt)
    terms = np.exp(-cos)
    loss = float(terms.mean())
    # d cos / d f_S = f_T/(|f_S||f_T|) - cos * f_S/|f_S|^2
    dcos = ft / (ns * nt)[:, None] - (cos / ns**2)[:, None] * fs
    grad = -(terms / n)[:, None] * dcos
    return loss, grad


def glr(weights: np.ndarray, features: np.ndarray) -> float:
    """Graph-Laplacian smoothness tr(F^T (D - W) F) of features over a graph.

    Raises:
        DimensionMismatch: W not square or F row count != N.
    """
    w = np.asarray(weights, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionMismatch(f"weight matrix shape {w.shape}")
    if f.ndim != 2 or f.shape[0] != w.shape[0]:
        raise DimensionMismatch(f"features {f.shape} vs {w.shape[0]} nodes")
    lap_f = _laplacian_apply(w, f)
    return float((lap_f * f).sum())


def _laplacian_apply(w: np.ndarray, f: np.ndarray) -> np.ndarray:
    """(D - W) @ F with d_ii = sum_j w_ij."""
    return w.sum(axis=1)[:, None] * f - w @ f


@dataclass(eq=False)
class EdgeLossResult:
    loss: float
    grad_features: np.ndarray  # (N, C) w.r.t. student features
    grad_centers: np.ndarray  # (N, 3) w.r.t. student box centers
    grad_sizes: np.ndarray  # (N, 3)
    grad_yaws: np.ndarray  # (N,)


def edge_consistency_loss(
    graph_student: ObjectGraph,
    graph_teacher: ObjectGraph,
    features_student: np.ndarray,
    features_teacher: np.ndarray,
    cfg: ConsistencyConfig,
    graph_cfg: GraphConfig,
) -> EdgeLossResult:
    """Edge-weight alignment plus smoothness difference between two graphs.

    loss = (gamma * |W_T - W_S|_F^2 + (1 - gamma) * (GLR_S - GLR_T)) / N^2

    Both graphs must cover the same matched node ordering. Teacher quantities
    are constants; gradients flow to the student features (through GLR_S) and
    to the student boxes (through W_S in both terms). N <= 1 gives zero loss
    and zero gradients.
    """
    n = len(graph_student)
    fs = np.asarray(features_student, dtype=np.float64)
    ft = np.asarray(features_teacher, dtype=np.float64)
    if len(graph_teacher) != n:
        raise DimensionMismatch(f"{n} student vs {len(graph_teacher)} teacher nodes")
    if fs.shape != ft.shape or fs.ndim != 2 or fs.shape[0] != n:
        raise DimensionMismatch(f"feature shapes {fs.shape} vs {ft.shape} for {n} nodes")
    c = fs.shape[1]
    if n <= 1:
        return EdgeLossResult(
            0.0, np.zeros((n, c)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n)
        )

    ws = graph_student.weights
    wt = graph_teacher.weights
    gamma = cfg.gamma
    inv_n2 = 1.0 / (n * n)

    align = float(((wt - ws) ** 2).sum())
    glr_s = glr(ws, fs)
    glr_t = glr(wt, ft)
    loss = inv_n2 * (gamma * align + (1.0 - gamma) * (glr_s - glr_t))

    grad_f = inv_n2 * (1.0 - gamma) * 2.0 * _laplacian_apply(ws, fs)

    # d loss / d w_pair for each unordered pair, written over ordered entries:
    # alignment contributes 4*gamma*(w_S - w_T), the smoothness term |f_i - f_j|^2.
    sq_f = ((fs[:, None, :] - fs[None, :, :]) ** 2).sum(axis=2)
    coef = inv_n2 * (4.0 * gamma * (ws - wt) + (1.0 - gamma) * sq_f)
    np.fill_diagonal(coef, 0.0)

    cs = centers_of(graph_student.nodes)
    bs = sizes_of(graph_student.nodes)
    xs = yaws_of(graph_student.nodes)
    tau2 = graph_cfg.tau * graph_cfg.tau
    h = coef * ws * (-2.0 / tau2)
    row = h.sum(axis=1)[:, None]
    grad_c = row * cs - h @ cs
    grad_b = graph_cfg.eps1 * (row * bs - h @ bs)
    dxi = xs[:, None] - xs[None, :]
    if graph_cfg.wrap_yaw:
        dxi = wrap_angle(dxi)
    grad_xi = graph_cfg.eps2 * (h * dxi).sum(axis=1)
    return EdgeLossResult(loss, grad_f, grad_c, grad_b, grad_xi)


@dataclass(eq=False)
class ConsistencyResult:
    loss: float
    node_loss: float
    edge_loss: float
    grad_features: np.ndarray
    grad_centers: np.ndarray
    grad_sizes: np.ndarray
    grad_yaws: np.ndarray


def consistency_loss(
    graph_student: ObjectGraph,
    graph_teacher: ObjectGraph,
    features_student: np.ndarray,
    features_teacher: np.ndarray,
    cfg: ConsistencyConfig,
    graph_cfg: GraphConfig,
) -> ConsistencyResult:
    """beta1 * node loss + beta2 * edge loss with linearly combined gradients."""
    l_node, g_node = node_consistency_loss(features_student, features_teacher)
    edge = edge_consistency_loss(
        graph_student, graph_teacher, features_student, features_teacher, cfg, graph_cfg
    )
    loss = cfg.beta1 * l_node + cfg.beta2 * edge.loss
    return ConsistencyResult(
        loss=loss,
        node_loss=l_node,
        edge_loss=edge.loss,
        grad_features=cfg.beta1 * g_node + cfg.beta2 * edge.grad_features,
        grad_centers=cfg.beta2 * edge.grad_centers,
        grad_sizes=cfg.beta2 * edge.grad_sizes,
        grad_yaws=cfg.beta2 * edge.grad_yaws,
    )
