"""Hypertension risk stratification over longitudinal EHR data.

End-to-end pipeline: synthetic cohort generation, cohort selection and
90-day target construction, train-set feature engineering, from-scratch
logistic-regression and LSTM classifiers with class-weighted cross-entropy,
ROC/AUROC evaluation against a carry-forward baseline, and
integrated-gradients feature attribution.
"""

__version__ = "0.1.0"
