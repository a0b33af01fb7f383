"""Numerical core: pooling, toy ViT, training, head analysis, retrieval"""
