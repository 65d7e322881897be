"""数据仓库层"""
