"""
Package ECRF : champs de radiance tensoriels compressés par entropie
"""
