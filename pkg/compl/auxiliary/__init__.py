"""
Self-supervised auxiliary methods. Modules defining `_run_imports` are
registered with `compl.method_factory` on import
"""
