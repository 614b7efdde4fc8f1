"""Inverse graph identification toolkit.

Node clustering driven by graph-level labels: a from-scratch tape autodiff
engine, the GMGCN model (GAT encoder, Gaussian mixture layer, attention
pooling, hierarchical GCN), a synthetic hierarchical-graph benchmark
generator, clustering baselines, and metric evaluation.
"""

__version__ = "0.1.0"
