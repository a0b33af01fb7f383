"""Console output and file formats"""
