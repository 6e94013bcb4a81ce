"""DP-FedSAM: 差分隐私联邦学习与锐度感知最小化的确定性模拟器"""

__version__ = "0.1.0"
