"""
Initialize modules package
"""
