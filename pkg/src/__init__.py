# Robust Lasso - outlier detection modules
