"""数据读写层：IDX、检查点、栅格图与表格"""
