"""智能田地保护系统仿真器"""
