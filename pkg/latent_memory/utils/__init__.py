"""
Initialize utils package
"""
