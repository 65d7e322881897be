"""子命令"""
