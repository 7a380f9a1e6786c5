"""Graph Laplacians and spectral clustering."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .embed import kmeans
from .graph import WeightedGraph

DENSE_LIMIT = 4096


class EigensolverError(RuntimeError):
    """The iterative eigensolver did not converge."""

    def __init__(self, message: str, converged: int, requested: int, maxiter: int):
        super().__init__(f"{message} (converged {converged}/{requested} eigenpairs, maxiter={maxiter})")
        self.converged = converged
        self.requested = requested
        self.maxiter = maxiter


def laplacian(graph: WeightedGraph) -> np.ndarray:
    """Dense unnormalised Laplacian ``D - A``."""
    if graph.num_nodes == 0:
        raise ValueError("empty graph")
    a = graph.dense()
    return np.diag(a.sum(1)) - a


def _sparse_laplacian(graph: WeightedGraph, normalized: bool) -> sp.csr_matrix:
    a = graph.adjacency.astype(np.float64)
    deg = np.asarray(a.sum(1)).ravel()
    if not normalized:
        return (sp.diags(deg) - a).tocsr()
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return (sp.identity(len(deg)) - sp.diags(inv) @ a @ sp.diags(inv)).tocsr()


def spectral_embedding(graph: WeightedGraph, k: int, normalized: bool = False) -> np.ndarray:
    """Rows = nodes, columns = eigenvectors of the ``k`` smallest eigenvalues.

    With ``normalized=True`` the symmetric normalised Laplacian is used and
    the eigenvectors are rescaled by ``D^-1/2`` (isolated nodes untouched).
    """
    n = graph.num_nodes
    if n <= DENSE_LIMIT:
        lap = _sparse_laplacian(graph, normalized).toarray()
        _, vecs = np.linalg.eigh(lap)
        emb = vecs[:, :k]
    else:
        lap = _sparse_laplacian(graph, normalized)
        maxiter = 10 * n
        v0 = np.ones(n) / np.sqrt(n)  # deterministic start vector
        try:
            vals, vecs = spla.eigsh(lap, k=k, which="SA", tol=1e-8, maxiter=maxiter, v0=v0)
        except spla.ArpackNoConvergence as exc:
            raise EigensolverError("Lanczos eigensolver did not converge", len(exc.eigenvalues), k, maxiter) from exc
        emb = vecs[:, np.argsort(vals)]
    if normalized:
        deg = np.asarray(graph.adjacency.sum(1)).ravel().astype(np.float64)
        scale = np.ones_like(deg)
        scale[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
        emb = emb * scale[:, None]
    return emb


def spectral_cluster(graph: WeightedGraph, n_clusters: int, seed: int = 0, normalized: bool = False) -> np.ndarray:
    """Cluster nodes by K-means on the spectral embedding.

    Returns 1-based labels, one per node.
    """
    if not 1 <= n_clusters <= graph.num_nodes:
        raise ValueError(f"n_clusters={n_clusters} must lie in [1, {graph.num_nodes}]")
    if n_clusters == 1:
        return np.ones(graph.num_nodes, dtype=np.int64)
    emb = spectral_embedding(graph, n_clusters, normalized)
    labels, _ = kmeans(emb, n_clusters, seed=seed)
    return labels
