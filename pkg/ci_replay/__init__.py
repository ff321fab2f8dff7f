"""
ci-replay - 失败构建的挖掘、容器化重建与保真度评估
Mining, containerized replay and fidelity scoring of failing CI builds.
"""
__version__ = "0.1.0"
