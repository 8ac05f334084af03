"""
mvocc Components
"""
