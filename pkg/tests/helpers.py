"""Shared generators for tests (not collected)."""
import numpy as np

SEVEN_NODE = [("B1", "R1"), ("B2", "R1"), ("B3", "R2"), ("B4", "R2"), ("R1", "T"), ("R2", "T")]
TWO_LEAF = [("B1", "T"), ("B2", "T")]


def random_tree_edges(rng: np.random.Generator, max_leaves: int = 64, max_depth: int = 5):
    """Random (possibly unbalanced) tree with 2..max_leaves leaves and 2..max_depth levels."""
    depth_cap = int(rng.integers(2, max_depth + 1))
    target = int(rng.integers(2, max_leaves + 1))
    depth = {"N0": 0}
    leaves = ["N0"]
    edges = []
    counter = 1
    while True:
        open_ = [x for x in leaves if depth[x] < depth_cap - 1]
        if not open_ or len(leaves) >= target:
            break
        node = open_[int(rng.integers(len(open_)))]
        k = int(rng.integers(1, 5))
        k = max(1, min(k, target - len(leaves) + 1))
        leaves.remove(node)
        for _ in range(k):
            child = f"N{counter}"
            counter += 1
            depth[child] = depth[node] + 1
            edges.append((child, node))
            leaves.append(child)
    if not edges:
        edges = [("N1", "N0"), ("N2", "N0")]
    return edges


def reachability_S(node_ids, bottom_ids, edges) -> np.ndarray:
    """Summing matrix via (I - P)^-1 on the child->parent adjacency (independent oracle)."""
    idx = {nid: i for i, nid in enumerate(node_ids)}
    m = len(node_ids)
    P = np.zeros((m, m))
    for child, parent in edges:
        P[idx[parent], idx[child]] = 1.0
    R = np.linalg.inv(np.eye(m) - P)  # R[i, j] = number of paths from i down to j
    return np.rint(R[:, [idx[b] for b in bottom_ids]])


CONSTANTS = np.array([1.0, 2.0, 3.0, 4.0])


def constant_task(kind: str, max_epochs: int = 50):
    """Train on four constant leaves of the seven-node tree; returns (hierarchy, params, cfg, report, panel)."""
    from hiergnn.backbones import MGMConfig
    from hiergnn.data import panel_from_bottom
    from hiergnn.hierarchy import build_hierarchy
    from hiergnn.training import TrainConfig, train

    h = build_hierarchy(SEVEN_NODE)
    panel = panel_from_bottom(h, np.repeat(CONSTANTS[:, None], 200, axis=1))
    tcn = kind in ("mixhop_tcn", "spatial_ode")
    cfg = MGMConfig(kind=kind, hidden=8, horizon=3, input_window=19 if tcn else 12, layers=2 if tcn else 1)
    tcfg = TrainConfig(lr=1e-3, batch=8, max_epochs=max_epochs)
    params, report = train(tcfg, cfg, panel, h)
    return h, params, cfg, report, panel
