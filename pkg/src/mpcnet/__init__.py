"""Multispectral point cloud classification with grid-balanced sampling, multi-scale fusion and an adaptive hybrid loss."""
