"""Shared test utilities."""
import numpy as np

from downcast import graphs as gr


def permute_hierarchy(hierarchy, perm):
    """Relabel level-0 nodes by `perm` (old index -> new index).

    Coarse levels keep their supernode numbering, so only the level-0 graph,
    the first selection's assignment and the centroid labels change.
    """
    g0 = hierarchy.graphs[0]
    edges = [(int(perm[i]), int(perm[j]), w) for i, j, w in g0.edges()]
    new_g0 = gr.WeightedDigraph.from_edges(g0.n, edges, directed=g0.directed)
    new_graphs = (new_g0,) + hierarchy.graphs[1:]
    if hierarchy.selections:
        sel = hierarchy.selections[0]
        assignment = np.empty_like(sel.assignment)
        assignment[perm] = sel.assignment
        new_sel = gr.SelectionMatrix(
            assignment=assignment,
            cluster_sizes=sel.cluster_sizes,
            centroids=np.asarray(perm)[sel.centroids],
        )
        new_sels = (new_sel,) + hierarchy.selections[1:]
    else:
        new_sels = hierarchy.selections
    return gr.CoarseningHierarchy(graphs=new_graphs, selections=new_sels)
