"""Robust Levenberg-Marquardt over manifold-valued parameter blocks.

One engine serves every optimization in the package: per-frame pose
estimation, structural endpoint refinement, local map optimization and
axes refinement. Parameter blocks live on their manifolds (SE(3) poses,
3D points, 6D endpoint pairs, unit directions); residual blocks supply
residual vectors and tangent-space Jacobians. Robustness is Huber on the
residual norm, folded into the normal equations IRLS-style.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import NumericalError
from .geometry import Pose, so3_exp


def huber(r, delta):
    """Robust cost of a residual magnitude: r^2 inside delta, linear outside."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    a = abs(r)
    if a <= delta:
        return a * a
    return 2.0 * delta * a - delta * delta


class HuberLoss:
    def __init__(self, delta):
        if delta <= 0:
            raise ValueError("huber delta must be positive")
        self.delta = delta

    def cost(self, x):
        return huber(x, self.delta)

    def weight(self, x):
        # rho'(x) / (2x): 1 on the quadratic branch, delta/x on the linear one
        if x <= self.delta:
            return 1.0
        return self.delta / x


class TrivialLoss:
    def cost(self, x):
        return x * x

    def weight(self, x):
        return 1.0


# ---------------------------------------------------------------------------
# parameter blocks


class ParameterBlock:
    """Base: a value on a manifold with a local tangent parameterization."""

    kind = "abstract"
    dof = 0

    def __init__(self, fixed=False):
        self.fixed = fixed

    def retract(self, delta):
        raise NotImplementedError

    def snapshot(self):
        raise NotImplementedError

    def restore(self, state):
        raise NotImplementedError


class PoseBlock(ParameterBlock):
    """SE(3) element; tangent (dw, dt): R <- Exp(dw) R, t <- t + dt."""

    kind = "pose-SE3"
    dof = 6

    def __init__(self, pose: Pose, fixed=False):
        super().__init__(fixed)
        self.pose = pose

    def retract(self, delta):
        R = so3_exp(delta[:3]) @ self.pose.rotation
        self.pose = Pose(R, self.pose.translation + delta[3:])

    def snapshot(self):
        return self.pose

    def restore(self, state):
        self.pose = state


class PointBlock(ParameterBlock):
    kind = "point-3D"
    dof = 3

    def __init__(self, value, fixed=False):
        super().__init__(fixed)
        self.value = np.array(value, dtype=float).reshape(3)

    def retract(self, delta):
        self.value = self.value + delta

    def snapshot(self):
        return self.value.copy()

    def restore(self, state):
        self.value = state


class LineEndpointsBlock(ParameterBlock):
    """Stacked 3D endpoints [S; E] of a map line."""

    kind = "line-endpoints-6D"
    dof = 6

    def __init__(self, start, end, fixed=False):
        super().__init__(fixed)
        self.value = np.concatenate([np.asarray(start, dtype=float), np.asarray(end, dtype=float)])

    @property
    def start(self):
        return self.value[:3]

    @property
    def end(self):
        return self.value[3:]

    def direction(self):
        d = self.end - self.start
        return d / np.linalg.norm(d)

    def retract(self, delta):
        self.value = self.value + delta

    def snapshot(self):
        return self.value.copy()

    def restore(self, state):
        self.value = state


class UnitDirectionBlock(ParameterBlock):
    """Unit 3-vector on S^2 with a 2D tangent basis, re-derived after updates."""

    kind = "unit-direction-2D-tangent"
    dof = 2

    def __init__(self, value, fixed=False):
        super().__init__(fixed)
        v = np.array(value, dtype=float).reshape(3)
        self.value = v / np.linalg.norm(v)
        self._basis = None

    def tangent_basis(self):
        if self._basis is None:
            u = self.value
            aux = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            b1 = np.cross(u, aux)
            b1 /= np.linalg.norm(b1)
            b2 = np.cross(u, b1)
            self._basis = np.column_stack([b1, b2])
        return self._basis

    def retract(self, delta):
        v = self.value + self.tangent_basis() @ delta
        self.value = v / np.linalg.norm(v)
        self._basis = None

    def snapshot(self):
        return (self.value.copy(), None if self._basis is None else self._basis.copy())

    def restore(self, state):
        self.value, self._basis = state


# ---------------------------------------------------------------------------
# residual blocks


class Residual:
    """Base: residual vector over one or more parameter blocks.

    Subclasses set `dim`, `blocks` (tuple of ParameterBlock) and implement
    evaluate() -> (dim,) array or None when the residual is undefined at the
    current point (e.g. a landmark behind the camera), and jacobians() ->
    list of (dim, block.dof) arrays aligned with `blocks` (entries for fixed
    blocks may be None).
    """

    dim = 0
    blocks: tuple = ()

    def evaluate(self):
        raise NotImplementedError

    def jacobians(self):
        raise NotImplementedError


@dataclass
class SolverReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str

    @property
    def success(self):
        return self.final_cost <= self.initial_cost + 1e-15


@dataclass
class SolverOptions:
    max_iterations: int = 20
    f_tol: float = 1e-8
    g_tol: float = 1e-10
    init_lambda: float = 1e-4
    lambda_up: float = 2.0
    lambda_down: float = 3.0
    dense_threshold: int = 250
    force_mode: str | None = None  # "dense" | "sparse" | None (auto)

    @classmethod
    def for_pose(cls, cfg):
        return cls(max_iterations=cfg.pose_max_iterations, f_tol=cfg.f_tol, g_tol=cfg.g_tol,
                   init_lambda=cfg.init_lambda, lambda_up=cfg.lambda_up, lambda_down=cfg.lambda_down,
                   dense_threshold=cfg.dense_threshold)

    @classmethod
    def for_map(cls, cfg):
        return cls(max_iterations=cfg.map_max_iterations, f_tol=cfg.f_tol, g_tol=cfg.g_tol,
                   init_lambda=cfg.init_lambda, lambda_up=cfg.lambda_up, lambda_down=cfg.lambda_down,
                   dense_threshold=cfg.dense_threshold)


class Problem:
    def __init__(self):
        self.blocks: list[ParameterBlock] = []
        self.residuals: list[tuple[Residual, object]] = []  # (residual, loss)
        self._block_ids = {}

    def add_block(self, block: ParameterBlock):
        if id(block) not in self._block_ids:
            self._block_ids[id(block)] = len(self.blocks)
            self.blocks.append(block)
        return block

    def add_residual(self, residual: Residual, loss=None):
        for b in residual.blocks:
            self.add_block(b)
        self.residuals.append((residual, loss if loss is not None else TrivialLoss()))

    def free_blocks(self):
        return [b for b in self.blocks if not b.fixed]

    def evaluate_cost(self, strict=False):
        """Total robust cost; None when some residual is undefined.

        strict=True raises instead, naming the offending residual.
        """
        total = 0.0
        for i, (res, loss) in enumerate(self.residuals):
            r = res.evaluate()
            if r is None or not np.all(np.isfinite(r)):
                if strict:
                    raise NumericalError(
                        f"residual {i} ({type(res).__name__}) is undefined or non-finite"
                    )
                return None
            total += loss.cost(float(np.linalg.norm(r)))
        return total


def _assemble(problem, offsets, n, sparse_mode):
    """Normal equations of the robustified Gauss-Newton step."""
    b = np.zeros(n)
    if sparse_mode:
        rows, cols, vals = [], [], []
    else:
        H = np.zeros((n, n))
    for idx, (res, loss) in enumerate(problem.residuals):
        r = res.evaluate()
        if r is None or not np.all(np.isfinite(r)):
            raise NumericalError(f"residual {idx} ({type(res).__name__}) is undefined or non-finite")
        jacs = res.jacobians()
        w = loss.weight(float(np.linalg.norm(r)))
        entries = []
        for blk, J in zip(res.blocks, jacs):
            if blk.fixed:
                continue
            if J is None or not np.all(np.isfinite(J)):
                raise NumericalError(f"Jacobian of residual {idx} ({type(res).__name__}) is invalid")
            entries.append((offsets[id(blk)], blk.dof, J))
        for off_i, dof_i, J_i in entries:
            b[off_i:off_i + dof_i] += w * (J_i.T @ r)
            for off_j, dof_j, J_j in entries:
                block = w * (J_i.T @ J_j)
                if sparse_mode:
                    for a in range(dof_i):
                        rows.extend([off_i + a] * dof_j)
                        cols.extend(range(off_j, off_j + dof_j))
                    vals.extend(block.ravel())
                else:
                    H[off_i:off_i + dof_i, off_j:off_j + dof_j] += block
    if sparse_mode:
        H = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
    return H, b


def _solve_damped(H, b, lam, sparse_mode):
    if sparse_mode:
        diag = np.maximum(H.diagonal(), 1e-8)
        A = H + scipy.sparse.diags(lam * diag)
        try:
            return scipy.sparse.linalg.splu(A.tocsc()).solve(-b)
        except RuntimeError:
            return None
    diag = np.maximum(np.diag(H), 1e-8)
    A = H + np.diag(lam * diag)
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    y = np.linalg.solve(c, -b)
    return np.linalg.solve(c.T, y)


def solve(problem: Problem, options: SolverOptions | None = None) -> SolverReport:
    """Minimize the robust total cost. Accepted steps never increase it."""
    options = options or SolverOptions()
    free = problem.free_blocks()
    initial_cost = problem.evaluate_cost(strict=True)

    if not free:
        return SolverReport(initial_cost, initial_cost, 0, "all blocks fixed")

    offsets = {}
    n = 0
    for blk in free:
        offsets[id(blk)] = n
        n += blk.dof
    if options.force_mode == "sparse":
        sparse_mode = True
    elif options.force_mode == "dense":
        sparse_mode = False
    else:
        sparse_mode = n > options.dense_threshold

    cost = initial_cost
    lam = options.init_lambda
    termination = "max iterations"
    iterations = 0
    H, b = _assemble(problem, offsets, n, sparse_mode)

    while iterations < options.max_iterations:
        gnorm = 2.0 * float(np.max(np.abs(b))) if n else 0.0
        if gnorm < options.g_tol:
            termination = "gradient tolerance"
            break
        step = _solve_damped(H, b, lam, sparse_mode)
        iterations += 1
        if step is None or not np.all(np.isfinite(step)):
            lam *= options.lambda_up
            if lam > 1e12:
                termination = "damping limit"
                break
            continue

        states = [blk.snapshot() for blk in free]
        for blk in free:
            blk.retract(step[offsets[id(blk)]:offsets[id(blk)] + blk.dof])
        new_cost = problem.evaluate_cost(strict=False)

        if new_cost is not None and new_cost < cost:
            assert new_cost <= cost, "accepted LM step increased the robust cost"
            decrease = cost - new_cost
            cost = new_cost
            lam = max(lam / options.lambda_down, 1e-12)
            H, b = _assemble(problem, offsets, n, sparse_mode)
            if decrease < options.f_tol * max(cost, 1e-30):
                termination = "cost tolerance"
                break
        else:
            for blk, st in zip(free, states):
                blk.restore(st)
            lam *= options.lambda_up
            if lam > 1e12:
                termination = "damping limit"
                break

    return SolverReport(initial_cost, cost, iterations, termination)


def check_jacobian(residual: Residual, step=1e-6):
    """Max relative deviation of analytic Jacobians vs central differences.

    Differences are taken on each free block's tangent space through the same
    retraction the solver uses.
    """
    analytic = residual.jacobians()
    worst = 0.0
    for blk, J in zip(residual.blocks, analytic):
        if blk.fixed:
            continue
        fd = np.zeros((residual.dim, blk.dof))
        for k in range(blk.dof):
            delta = np.zeros(blk.dof)
            state = blk.snapshot()
            delta[k] = step
            blk.retract(delta)
            r_plus = residual.evaluate()
            blk.restore(state)
            state = blk.snapshot()
            delta[k] = -step
            blk.retract(delta)
            r_minus = residual.evaluate()
            blk.restore(state)
            if r_plus is None or r_minus is None:
                raise NumericalError("residual undefined within the finite-difference stencil")
            fd[:, k] = (r_plus - r_minus) / (2.0 * step)
        scale = max(1.0, float(np.max(np.abs(J))), float(np.max(np.abs(fd))))
        worst = max(worst, float(np.max(np.abs(J - fd))) / scale)
    return worst
