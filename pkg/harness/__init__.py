"""Dataset, cross-validation driver, reports and CLI around the sunet core."""
