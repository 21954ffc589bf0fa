"""Controlled cohort construction, toy debiasing strategies and subgroup AUC evaluation."""

__version__ = "0.1.0"
