# 配置目录
