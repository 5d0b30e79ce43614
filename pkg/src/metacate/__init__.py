"""Meta-learning CATE estimators from few samples with closed-form task heads."""
__version__ = "0.1.0"
