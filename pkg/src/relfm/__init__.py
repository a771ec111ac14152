"""relfm: relational databases as heterogeneous entity graphs, pretrained
with masked feature reconstruction and adapted to entity classification."""

__version__ = "0.1.0"
