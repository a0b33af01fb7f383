"""
Configuration package: experiment config files and runtime worker profiles
"""
