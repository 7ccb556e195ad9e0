"""Infeasible and feasible treatment-effect MSEs and CI coverage."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import numpy as np

from causaltree.data import CausalDataset, DataError, transformed_outcome
from causaltree.honest import EstimateUnavailable, LeafEstimate, predict_arrays
from causaltree.tree import Tree

Predictor = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class EvalResult:
    """Test-sample metrics for one fitted estimator.

    ``mse_tau_infeasible`` is the adjusted form (squared error minus
    tau_i^2); ``mse_tau`` is the plain mean squared error used for ratios.
    """

    mse_tau_infeasible: float
    mse_tau: float
    mse_tot: float
    coverage: float
    coverage_leaf_weighted: float
    n_test: int


def _predictions(test: CausalDataset, predictor: Predictor) -> np.ndarray:
    if callable(predictor):
        pred = np.asarray(predictor(test.covariates), dtype=float)
    else:
        pred = np.broadcast_to(np.asarray(predictor, dtype=float), (test.n,))
    if pred.shape != (test.n,):
        raise ValueError("predictor must give one value per test unit")
    return pred


def _truth(test: CausalDataset) -> np.ndarray:
    if test.true_cate is None:
        raise DataError("infeasible MSE needs the true CATE of the test units")
    return test.true_cate


def mse_tau_infeasible(test: CausalDataset, predictor: Predictor) -> float:
    """Mean of (tau_i - tau_hat(X_i))^2 - tau_i^2 over the test sample."""
    tau = _truth(test)
    pred = _predictions(test, predictor)
    return float(np.mean((tau - pred) ** 2 - tau**2))


def mse_tau(test: CausalDataset, predictor: Predictor) -> float:
    """Plain mean squared error of the predicted CATE."""
    tau = _truth(test)
    pred = _predictions(test, predictor)
    return float(np.mean((tau - pred) ** 2))


def mse_tot(test: CausalDataset, predictor: Predictor, p: Optional[float] = None) -> float:
    """Mean of (Y*_i - tau_hat(X_i))^2; feasible, no true CATE needed."""
    ystar = transformed_outcome(test, p)
    return float(np.mean((ystar - _predictions(test, predictor)) ** 2))


def leaf_estimands(tree: Tree, test: CausalDataset) -> Dict[int, float]:
    """Average true CATE of the test units routed to each leaf."""
    tau = _truth(test)
    leaves = tree.apply(test.covariates)
    return {int(l): float(tau[leaves == l].mean()) for l in np.unique(leaves)}


def coverage(
    test: CausalDataset,
    tree: Tree,
    estimates: Dict[int, LeafEstimate],
    estimands: Optional[Dict[int, float]] = None,
    leaf_weighted: bool = False,
) -> float:
    """Share of test units whose leaf CI covers the leaf-level true effect.

    With ``leaf_weighted`` each populated leaf counts once instead.
    """
    leaves = tree.apply(test.covariates)
    estimands = leaf_estimands(tree, test) if estimands is None else estimands
    hit = {}
    for l in np.unique(leaves).tolist():
        e = estimates.get(l)
        if e is None or not e.available:
            raise EstimateUnavailable(f"leaf {l} has no estimate")
        hit[l] = float(e.ci_lo <= estimands[l] <= e.ci_hi)
    if leaf_weighted:
        return float(np.mean(list(hit.values())))
    return float(np.mean([hit[l] for l in leaves.tolist()]))


def evaluate(test: CausalDataset, tree: Tree, estimates: Dict[int, LeafEstimate]) -> EvalResult:
    """All test-sample metrics for a tree and its leaf estimates."""
    _, tau_hat, _, _ = predict_arrays(tree, estimates, test.covariates)
    if not np.all(np.isfinite(tau_hat)):
        raise EstimateUnavailable("a test unit falls in a leaf without an estimate")
    est = leaf_estimands(tree, test)
    return EvalResult(
        mse_tau_infeasible=mse_tau_infeasible(test, tau_hat),
        mse_tau=mse_tau(test, tau_hat),
        mse_tot=mse_tot(test, tau_hat),
        coverage=coverage(test, tree, estimates, est),
        coverage_leaf_weighted=coverage(test, tree, estimates, est, leaf_weighted=True),
        n_test=test.n,
    )
