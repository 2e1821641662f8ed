"""
envelope-em: envelope estimation for multivariate linear regression with
responses and predictors missing at random, fitted by EM
"""
__version__ = "1.0.0"
